import itertools
import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iclft.prompt import Example, detokenize
from iclft.tasks import (
    LABEL_POOL,
    Dataset,
    SplitSpec,
    TaskFamily,
    TaskFileError,
    flip_labels,
    gen_keyed_classification,
    gen_parity,
    gen_prior_task,
    heldout_key_map,
    heldout_keyed_task,
    load_task_file,
    meta_pretrain_item,
    meta_pretrain_stream,
    oracle_for,
    parity_oracle,
    permute_labels,
    save_task_file,
    split,
)


def _running_parity(bits):
    out, ones = [], 0
    for b in bits:
        ones += b
        out.append("Even" if ones % 2 == 0 else "Odd")
    return out


# --- parity -----------------------------------------------------------------

def test_parity_hand_cases():
    assert parity_oracle("0") == "Even"
    assert parity_oracle("1 1 0") == "Odd Even Even"


def test_parity_generator():
    d = gen_parity(8, 200, seed=3)
    assert len({ex.x for ex in d}) == 200
    for ex in d:
        bits = [int(b) for b in ex.x.split()]
        assert len(bits) == 8
        assert ex.y.split() == _running_parity(bits)
    assert d.labels is None


def test_parity_twenty_bits_shape():
    ex = gen_parity(20, 3, seed=0)[0]
    assert len(ex.x.split()) == 20 and len(ex.y.split()) == 20


def test_parity_errors():
    with pytest.raises(ValueError):
        gen_parity(2, 5, 0)
    with pytest.raises(ValueError):
        gen_parity(0, 1, 0)


# --- keyed classification -------------------------------------------------------

def test_keyed_degenerate_noise_is_the_key():
    d = gen_keyed_classification(3, 3, 0, 50, seed=1)
    keys = set(d.meta["key_map"])
    assert all(ex.x in keys for ex in d)


def test_keyed_map_is_a_function_and_oracle_holds():
    d = gen_keyed_classification(8, 4, 3, 300, seed=2)
    oracle = oracle_for(d)
    seen = {}
    for ex in d:
        key = next(k for k in d.meta["key_map"] if k in ex.x)
        assert seen.setdefault(key, ex.y) == ex.y
        assert oracle(ex.x) == ex.y
        assert len(ex.x) == 1 + 3


def test_keyed_class_balance():
    d = gen_keyed_classification(9, 3, 2, 1000, seed=4)
    counts = Counter(ex.y for ex in d)
    assert set(counts) == set(d.labels)
    for c in counts.values():
        assert abs(c / 1000 - 1 / 3) < 0.1 / 3


def test_keyed_needs_two_classes():
    with pytest.raises(ValueError):
        gen_keyed_classification(4, 1, 0, 10, seed=0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 5), st.integers(0, 4))
def test_generated_pairs_satisfy_oracle(seed, n_classes, noise):
    d = gen_keyed_classification(n_classes + 3, n_classes, noise, 40, seed)
    oracle = oracle_for(d)
    assert all(oracle(ex.x) == ex.y for ex in d)


def test_prior_task_uses_fixed_map():
    a, b = gen_prior_task(50, seed=1), gen_prior_task(50, seed=2)
    assert a.meta["key_map"] == b.meta["key_map"]
    assert a.labels == ["Yes", "No"]
    assert all(oracle_for(a)(ex.x) == ex.y for ex in a)


# --- label variants ---------------------------------------------------------------

def test_flip_is_an_involution_and_mirrors_histogram():
    d = gen_prior_task(100, seed=0)
    f = flip_labels(d)
    assert flip_labels(f) == d
    assert all({u.y, v.y} == {"Yes", "No"} for u, v in zip(d, f))
    c, cf = Counter(ex.y for ex in d), Counter(ex.y for ex in f)
    assert c["Yes"] == cf["No"] and c["No"] == cf["Yes"]
    assert f.labels == d.labels


def test_flip_rejects_non_binary():
    with pytest.raises(ValueError):
        flip_labels(gen_keyed_classification(6, 3, 0, 10, 0))


def test_permute_two_labels_equals_flip():
    d = gen_prior_task(40, seed=3)
    assert permute_labels(d, seed=9) == flip_labels(d)


def test_permute_is_a_non_identity_bijection_with_inverse():
    d = gen_keyed_classification(10, 5, 0, 200, seed=5)
    for s in range(10):
        p = permute_labels(d, s)
        mapping = p.meta["label_mapping"]
        assert sorted(mapping.values()) == sorted(d.labels)
        assert any(k != v for k, v in mapping.items())
        inverse = {v: k for k, v in mapping.items()}
        assert [Example(ex.x, inverse[ex.y]) for ex in p] == d.examples


# --- splits ---------------------------------------------------------------------------

def test_split_determinism_and_disjointness():
    d = gen_parity(10, 300, seed=0)
    a = split(d, SplitSpec(7, 50, 100))
    b = split(d, SplitSpec(7, 50, 100))
    assert a[0] == b[0] and a[1] == b[1]
    assert not {ex.x for ex in a[0]} & {ex.x for ex in a[1]}


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(0, 100), st.integers(0, 100))
def test_split_prefix_property(seed, n1, n2):
    d = gen_parity(9, 300, seed=1)
    lo, hi = sorted((n1, n2))
    small_train, small_test = split(d, SplitSpec(seed, lo, 150))
    big_train, big_test = split(d, SplitSpec(seed, hi, 150))
    assert big_train.examples[:lo] == small_train.examples
    assert small_test == big_test


def test_split_overflow():
    with pytest.raises(ValueError):
        split(gen_parity(4, 16, 0), SplitSpec(0, 10, 7))


# --- task files -----------------------------------------------------------------

def test_task_file_round_trip(tmp_path):
    d = Dataset([Example("a b", "Yes"), Example("ü", "No")], ["Yes", "No"], "t")
    save_task_file(d, tmp_path / "t.jsonl")
    assert load_task_file(tmp_path / "t.jsonl") == d


def test_parity_export_reloads_equal(tmp_path):
    d = gen_parity(8, 50, seed=2)
    save_task_file(d, tmp_path / "p.jsonl")
    assert load_task_file(tmp_path / "p.jsonl") == d


def test_missing_y_names_line(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"x": "a", "y": "b"}\n{"x": "c"}\n')
    with pytest.raises(TaskFileError, match=":2: missing field 'y'"):
        load_task_file(p)


def test_malformed_json_names_line(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"labels": ["A"]}\n{"x": "a", "y": "A"}\n{oops\n')
    with pytest.raises(TaskFileError, match=":3:"):
        load_task_file(p)


def test_labels_inferred_and_checked(tmp_path):
    p = tmp_path / "u.jsonl"
    p.write_text('{"labels": true}\n{"x": "1", "y": "B"}\n{"x": "2", "y": "A"}\n{"x": "3", "y": "B"}\n')
    assert load_task_file(p).labels == ["B", "A"]
    q = tmp_path / "v.jsonl"
    q.write_text('{"labels": ["A"]}\n{"x": "1", "y": "B"}\n')
    with pytest.raises(TaskFileError, match=":2:"):
        load_task_file(q)


def test_per_line_labels_must_agree(tmp_path):
    ok = tmp_path / "ok.jsonl"
    ok.write_text("".join(json.dumps({"x": str(i), "y": "A", "labels": ["A", "B"]}) + "\n" for i in range(3)))
    d = load_task_file(ok)
    assert d.labels == ["A", "B"] and len(d) == 3
    bad = tmp_path / "bad.jsonl"
    bad.write_text(
        json.dumps({"x": "1", "y": "A", "labels": ["A", "B"]}) + "\n" + json.dumps({"x": "2", "y": "A", "labels": ["A"]}) + "\n"
    )
    with pytest.raises(TaskFileError, match=":2: labels"):
        load_task_file(bad)


# --- meta-pretraining stream -----------------------------------------------------------

FAM = TaskFamily(reserved_seeds=tuple(range(5)), max_seq_len=160)


def test_stream_determinism():
    a = [s.tokens for s in itertools.islice(meta_pretrain_stream(FAM, 11), 10)]
    b = [s.tokens for s in itertools.islice(meta_pretrain_stream(FAM, 11), 10)]
    c = [s.tokens for s in itertools.islice(meta_pretrain_stream(FAM, 12), 10)]
    assert a == b and a != c


def test_stream_respects_max_len_and_masks():
    for s in itertools.islice(meta_pretrain_stream(FAM, 0), 300):
        assert len(s.tokens) <= FAM.max_seq_len
        assert s.n_masked >= 2


def test_stream_never_emits_reserved_maps():
    reserved = FAM.reserved_maps()
    assert len(reserved) == 5
    for i in range(2000):
        _, info = meta_pretrain_item(FAM, 3, i, reserved)
        if info["kind"] == "keyed":
            assert info["key_map"] not in reserved


def test_stream_rejects_a_colliding_map():
    """Force collisions: a family whose only possible keyed map is reserved
    must still emit only non-reserved maps (here: different label choices)."""
    fam = TaskFamily(n_keys=(2, 2), n_classes=(2, 2), reserved_seeds=tuple(range(200)), reserved_n_keys=2,
                     reserved_n_classes=2, max_seq_len=160)
    reserved = fam.reserved_maps()
    for i in range(300):
        _, info = meta_pretrain_item(fam, 0, i, reserved)
        if info["kind"] == "keyed":
            assert info["key_map"] not in reserved


def test_heldout_task_lives_in_reserved_space():
    d = heldout_keyed_task(0, 60)
    assert d.meta["key_map"] == heldout_key_map(0)
    assert set(d.labels) <= set(LABEL_POOL) and len(d.labels) == 4
    assert all(oracle_for(d)(ex.x) == ex.y for ex in d)


def test_stream_items_cover_kinds():
    kinds = Counter(meta_pretrain_item(FAM, 0, i)[1]["kind"] for i in range(400))
    assert kinds["keyed"] > kinds["copy"] > 0 and kinds["prior"] > 0 and kinds["parity"] == 0
    assert np.isclose(kinds["keyed"] / 400, 0.6, atol=0.08)


def test_copy_items_repeat_the_query():
    fam = TaskFamily(weights=(("copy", 1.0),), k_range=(0, 0), max_seq_len=64)
    for i in range(20):
        seq, info = meta_pretrain_item(fam, 0, i)
        assert info["kind"] == "copy"
        text = detokenize(seq.tokens)
        x, y = text.split(fam.template.query_suffix) if fam.template.query_suffix else (text[: len(text) // 2], text[len(text) // 2 :])
        assert x == y and x.isalpha() and fam.copy_len[0] <= len(x) <= fam.copy_len[1]
        assert seq.n_masked == len(x) + 1
