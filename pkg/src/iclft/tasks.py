"""Synthetic tasks with exact oracles, label variants, seeded splits, the
line-JSON task file format and the meta-pretraining stream.

Character classes are kept disjoint so every task is unambiguous:

* keyed-classification keys are lowercase letters,
* prior-task keys are decimal digits,
* filler noise is punctuation,
* keyed labels are upper-case words with distinct initials; the prior task
  answers ``Yes``/``No``.

Copy-task strings draw from all ASCII letters; they carry no label.
"""
from __future__ import annotations

import itertools
import json
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .prompt import Example, PromptSequence, SequenceTooLongError, Template, build_training_sequence

KEY_ALPHABET = string.ascii_lowercase
# both cases, so copying is learned for key and label characters alike
COPY_ALPHABET = string.ascii_letters
PRIOR_ALPHABET = string.digits
FILLER_ALPHABET = ".,:;!?~^"
LABEL_POOL = ("RED", "BLUE", "GREEN", "PINK", "CYAN", "TAN", "WHITE", "OLIVE", "MINT", "LIME")
PRIOR_LABELS = ("Yes", "No")


class TaskFileError(ValueError):
    pass


@dataclass(eq=False)
class Dataset:
    examples: list[Example]
    labels: list[str] | None = None
    name: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.labels is not None:
            allowed = set(self.labels)
            for i, ex in enumerate(self.examples):
                if ex.y not in allowed:
                    raise ValueError(f"example {i}: y={ex.y!r} not in label set {self.labels}")

    def __len__(self) -> int:
        return len(self.examples)

    def __getitem__(self, i) -> Example:
        return self.examples[i]

    def __iter__(self):
        return iter(self.examples)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.examples == other.examples and self.labels == other.labels

    @property
    def is_classification(self) -> bool:
        return self.labels is not None

    def subset(self, indices, name: str | None = None) -> Dataset:
        return Dataset([self.examples[int(i)] for i in indices], self.labels, name or self.name, dict(self.meta))


@dataclass(frozen=True)
class SplitSpec:
    seed: int
    n_train: int
    n_test: int


# ---------------------------------------------------------------------------
# parity


def parity_oracle(x: str) -> str:
    """Running parity after each bit: ``"1 1 0" -> "Odd Even Even"``."""
    words, acc = [], 0
    for b in x.split():
        acc ^= int(b)
        words.append("Odd" if acc else "Even")
    return " ".join(words)


def gen_parity(n_bits: int, n_examples: int, seed: int) -> Dataset:
    if not 1 <= n_bits <= 24:
        raise ValueError(f"n_bits must be in [1, 24], got {n_bits}")
    if n_examples > 2**n_bits:
        raise ValueError(f"cannot draw {n_examples} distinct {n_bits}-bit strings")
    rng = np.random.default_rng(seed)
    seen: set[int] = set()
    examples = []
    while len(examples) < n_examples:
        v = int(rng.integers(0, 2**n_bits))
        if v in seen:
            continue
        seen.add(v)
        x = " ".join(format(v, f"0{n_bits}b"))
        examples.append(Example(x, parity_oracle(x)))
    return Dataset(examples, None, f"parity{n_bits}", {"kind": "parity", "n_bits": n_bits})


# ---------------------------------------------------------------------------
# keyed classification


def keyed_oracle(key_map: dict[str, str], x: str) -> str:
    hits = [k for k in key_map if k in x]
    if len(hits) != 1:
        raise ValueError(f"expected exactly one key in {x!r}, found {hits}")
    return key_map[hits[0]]


def sample_key_map(
    rng: np.random.Generator,
    n_keys: int,
    n_classes: int,
    labels=None,
    key_alphabet: str = KEY_ALPHABET,
    key_len: int = 1,
) -> tuple[dict[str, str], list[str]]:
    """Random balanced key -> label map (every class gets at least one key)."""
    if n_classes < 2:
        raise ValueError("n_classes must be >= 2")
    if n_keys < n_classes:
        raise ValueError(f"n_keys={n_keys} cannot cover n_classes={n_classes}")
    if labels is None:
        if n_classes > len(LABEL_POOL):
            raise ValueError(f"at most {len(LABEL_POOL)} pool labels available")
        labels = [LABEL_POOL[i] for i in sorted(rng.choice(len(LABEL_POOL), n_classes, replace=False))]
    labels = list(labels)
    if len(labels) != n_classes:
        raise ValueError("labels must have n_classes entries")
    keys: set[str] = set()
    while len(keys) < n_keys:
        keys.add("".join(rng.choice(list(key_alphabet), key_len)))
    keys_l = sorted(keys)
    order = rng.permutation(n_keys)
    key_map = {keys_l[j]: labels[r % n_classes] for r, j in enumerate(order)}
    return dict(sorted(key_map.items())), labels


def gen_keyed_classification(
    n_keys: int,
    n_classes: int,
    noise_len: int,
    n_examples: int,
    seed: int,
    *,
    labels=None,
    key_map: dict[str, str] | None = None,
    key_alphabet: str = KEY_ALPHABET,
    key_len: int = 1,
    name: str | None = None,
) -> Dataset:
    """Queries are a trigger key hidden in ``noise_len`` filler characters;
    the response is the key's class under a random (or given) map.

    Classes are sampled uniformly, then a key uniformly within the class.
    """
    rng = np.random.default_rng(seed)
    if key_map is None:
        key_map, labels = sample_key_map(rng, n_keys, n_classes, labels, key_alphabet, key_len)
    else:
        key_map = dict(key_map)
        labels = list(labels) if labels is not None else sorted(set(key_map.values()))
    by_class = {lab: sorted(k for k, v in key_map.items() if v == lab) for lab in labels}
    examples = []
    for _ in range(n_examples):
        lab = labels[int(rng.integers(len(labels)))]
        keys = by_class[lab]
        key = keys[int(rng.integers(len(keys)))]
        filler = "".join(rng.choice(list(FILLER_ALPHABET), noise_len)) if noise_len else ""
        pos = int(rng.integers(noise_len + 1))
        examples.append(Example(filler[:pos] + key + filler[pos:], lab))
    meta = {"kind": "keyed", "key_map": key_map, "noise_len": noise_len}
    return Dataset(examples, labels, name or f"keyed{len(key_map)}x{len(labels)}", meta)


def prior_key_map(seed: int = 0) -> dict[str, str]:
    """Fixed digit -> Yes/No assignment used as in-weights knowledge during
    meta-pretraining (the analogue of a pretrained model's task prior)."""
    rng = np.random.default_rng([seed, 7919])
    order = rng.permutation(len(PRIOR_ALPHABET))
    return {PRIOR_ALPHABET[j]: PRIOR_LABELS[r % 2] for r, j in enumerate(order)}


def gen_prior_task(n_examples: int, seed: int, noise_len: int = 0, prior_seed: int = 0) -> Dataset:
    d = gen_keyed_classification(
        len(PRIOR_ALPHABET), 2, noise_len, n_examples, seed,
        labels=list(PRIOR_LABELS), key_map=prior_key_map(prior_seed), name="prior",
    )
    d.meta["kind"] = "prior"
    return d


def oracle_for(d: Dataset):
    kind = d.meta.get("kind")
    if kind == "parity":
        return parity_oracle
    if kind in ("keyed", "prior"):
        key_map = d.meta["key_map"]
        return lambda x: keyed_oracle(key_map, x)
    raise ValueError(f"dataset {d.name!r} carries no oracle")


# ---------------------------------------------------------------------------
# label variants


def relabel(d: Dataset, mapping: dict[str, str], suffix: str) -> Dataset:
    examples = [Example(ex.x, mapping[ex.y]) for ex in d.examples]
    meta = dict(d.meta)
    if "key_map" in meta:
        meta["key_map"] = {k: mapping[v] for k, v in meta["key_map"].items()}
    meta["label_mapping"] = dict(mapping)
    return Dataset(examples, list(d.labels), f"{d.name}-{suffix}", meta)


def flip_labels(d: Dataset) -> Dataset:
    if d.labels is None or len(d.labels) != 2:
        raise ValueError(f"flip_labels needs exactly 2 labels, dataset {d.name!r} has {d.labels}")
    a, b = d.labels
    return relabel(d, {a: b, b: a}, "flipped")


def permute_labels(d: Dataset, seed: int) -> Dataset:
    """Apply a random non-identity permutation of the label set to every y."""
    if d.labels is None or len(d.labels) < 2:
        raise ValueError("permute_labels needs at least 2 labels")
    rng = np.random.default_rng(seed)
    n = len(d.labels)
    while True:
        perm = rng.permutation(n)
        if np.any(perm != np.arange(n)):
            break
    mapping = {d.labels[i]: d.labels[int(perm[i])] for i in range(n)}
    return relabel(d, mapping, "permuted")


# ---------------------------------------------------------------------------
# splits


def split(d: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    """Seeded permutation; the first n_train indices train, the last n_test test.

    For a fixed seed the train set for a smaller n_train is a prefix of the
    one for a larger n_train, and the test set does not depend on n_train.
    """
    if spec.n_train < 0 or spec.n_test < 0 or spec.n_train + spec.n_test > len(d):
        raise ValueError(f"split {spec.n_train}+{spec.n_test} exceeds dataset size {len(d)}")
    perm = np.random.default_rng(spec.seed).permutation(len(d))
    train_idx = perm[: spec.n_train]
    test_idx = perm[len(d) - spec.n_test :] if spec.n_test else perm[:0]
    return (
        d.subset(train_idx, f"{d.name}/train"),
        d.subset(test_idx, f"{d.name}/test"),
    )


# ---------------------------------------------------------------------------
# task files


def save_task_file(d: Dataset, path) -> None:
    lines = []
    if d.labels is not None:
        lines.append(json.dumps({"labels": list(d.labels)}, ensure_ascii=False))
    lines += [json.dumps({"x": ex.x, "y": ex.y}, ensure_ascii=False) for ex in d.examples]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_task_file(path) -> Dataset:
    """Read a line-JSON task file.

    An optional first line ``{"labels": [...]}`` declares the closed label
    set; ``{"labels": true}`` asks for the union of all y's in order of first
    appearance.  Example lines may also carry their own ``labels`` list, which
    must then be identical on every line.  Without any labels the task is
    open-ended.
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    labels = None
    infer = False
    per_line = False
    examples = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise TaskFileError(f"{path}:{lineno}: invalid JSON ({e.msg})") from None
        if not isinstance(obj, dict):
            raise TaskFileError(f"{path}:{lineno}: expected a JSON object")
        if set(obj) == {"labels"} and not examples and labels is None and not infer:
            if obj["labels"] is True:
                infer = True
            elif isinstance(obj["labels"], list) and all(isinstance(s, str) for s in obj["labels"]):
                labels = list(obj["labels"])
            else:
                raise TaskFileError(f"{path}:{lineno}: labels must be a list of strings or true")
            continue
        if "labels" in obj:
            line_labels = obj["labels"]
            if not (isinstance(line_labels, list) and all(isinstance(v, str) for v in line_labels)):
                raise TaskFileError(f"{path}:{lineno}: labels must be a list of strings")
            if labels is not None and line_labels != labels:
                raise TaskFileError(f"{path}:{lineno}: labels {line_labels} disagree with {labels}")
            if labels is None and (examples or infer):
                raise TaskFileError(f"{path}:{lineno}: labels given on some lines only")
            labels = list(line_labels)
        elif labels is not None and per_line:
            raise TaskFileError(f"{path}:{lineno}: labels given on some lines only")
        per_line = per_line or "labels" in obj
        for key in ("x", "y"):
            if key not in obj:
                raise TaskFileError(f"{path}:{lineno}: missing field {key!r}")
            if not isinstance(obj[key], str):
                raise TaskFileError(f"{path}:{lineno}: field {key!r} must be a string")
        if not obj["y"]:
            raise TaskFileError(f"{path}:{lineno}: empty y")
        if labels is not None and obj["y"] not in labels:
            raise TaskFileError(f"{path}:{lineno}: y={obj['y']!r} not in declared labels {labels}")
        examples.append(Example(obj["x"], obj["y"]))
    if infer:
        labels = list(dict.fromkeys(ex.y for ex in examples))
    return Dataset(examples, labels, path.stem, {"kind": "file", "path": str(path)})


# ---------------------------------------------------------------------------
# meta-pretraining stream


@dataclass(frozen=True)
class TaskFamily:
    """Distribution over synthetic task instances used for meta-pretraining.

    ``weights`` gives the sampling probability of each kind (keyed, prior,
    copy, parity).  A copy example maps a random string of letters to itself;
    it is the cheapest sequence that rewards attending back to an earlier
    match and copying what followed it, which keyed tasks need in context.
    Keyed maps generated from ``reserved_seeds`` (see
    :func:`heldout_keyed_task`) are never emitted.
    """

    weights: tuple[tuple[str, float], ...] = (("keyed", 0.6), ("prior", 0.15), ("copy", 0.25), ("parity", 0.0))
    n_keys: tuple[int, int] = (2, 10)
    n_classes: tuple[int, int] = (2, 5)
    noise_len: tuple[int, int] = (0, 2)
    k_range: tuple[int, int] = (0, 16)
    parity_bits: tuple[int, int] = (2, 4)
    copy_len: tuple[int, int] = (4, 10)
    prior_seed: int = 0
    reserved_seeds: tuple[int, ...] = ()
    reserved_n_keys: int = 8
    reserved_n_classes: int = 4
    template: Template = Template(separator="\n", query_suffix="")
    max_seq_len: int = 256

    def reserved_maps(self) -> list[dict[str, str]]:
        return [
            heldout_key_map(s, self.reserved_n_keys, self.reserved_n_classes) for s in self.reserved_seeds
        ]


RESERVED_SEED_BASE = 1_000_003


def heldout_key_map(seed: int, n_keys: int = 8, n_classes: int = 4) -> dict[str, str]:
    rng = np.random.default_rng([RESERVED_SEED_BASE, seed])
    return sample_key_map(rng, n_keys, n_classes)[0]


def heldout_keyed_task(seed: int, n_examples: int, n_keys: int = 8, n_classes: int = 4, noise_len: int = 0) -> Dataset:
    """Evaluation task whose map lives in the reserved seed space."""
    key_map = heldout_key_map(seed, n_keys, n_classes)
    labels = sorted(set(key_map.values()), key=LABEL_POOL.index)
    return gen_keyed_classification(
        n_keys, n_classes, noise_len, n_examples, seed=(RESERVED_SEED_BASE, seed, 1),
        labels=labels, key_map=key_map, name=f"heldout{seed}",
    )


def _sample_task(family: TaskFamily, rng: np.random.Generator, reserved: list[dict]) -> tuple[str, object]:
    kinds = [k for k, w in family.weights if w > 0]
    probs = np.array([w for k, w in family.weights if w > 0], dtype=float)
    kind = kinds[int(rng.choice(len(kinds), p=probs / probs.sum()))]
    if kind == "keyed":
        while True:
            n_classes = int(rng.integers(family.n_classes[0], family.n_classes[1] + 1))
            n_keys = int(rng.integers(max(n_classes, family.n_keys[0]), family.n_keys[1] + 1))
            key_map, labels = sample_key_map(rng, n_keys, n_classes)
            if key_map not in reserved:
                return kind, (key_map, labels)
    if kind == "prior":
        return kind, prior_key_map(family.prior_seed)
    if kind == "parity":
        return kind, int(rng.integers(family.parity_bits[0], family.parity_bits[1] + 1))
    if kind == "copy":
        return kind, family.copy_len
    raise ValueError(f"unknown task kind {kind!r}")


def _draw_example(kind: str, task, noise_len: int, rng: np.random.Generator) -> Example:
    if kind == "copy":
        x = "".join(rng.choice(list(COPY_ALPHABET), int(rng.integers(task[0], task[1] + 1))))
        return Example(x, x)
    if kind == "parity":
        x = " ".join(str(int(b)) for b in rng.integers(0, 2, task))
        return Example(x, parity_oracle(x))
    key_map = task[0] if kind == "keyed" else task
    labels = task[1] if kind == "keyed" else list(PRIOR_LABELS)
    lab = labels[int(rng.integers(len(labels)))]
    keys = sorted(k for k, v in key_map.items() if v == lab)
    key = keys[int(rng.integers(len(keys)))]
    filler = "".join(rng.choice(list(FILLER_ALPHABET), noise_len)) if noise_len else ""
    pos = int(rng.integers(noise_len + 1))
    return Example(filler[:pos] + key + filler[pos:], lab)


def meta_pretrain_item(family: TaskFamily, seed: int, index: int, reserved=None) -> tuple[PromptSequence, dict]:
    """The ``index``-th item of the stream; items are independent given (seed, index)."""
    rng = np.random.default_rng([seed, index])
    if reserved is None:
        reserved = family.reserved_maps()
    kind, task = _sample_task(family, rng, reserved)
    noise = int(rng.integers(family.noise_len[0], family.noise_len[1] + 1)) if kind in ("keyed", "prior") else 0
    k = int(rng.integers(family.k_range[0], family.k_range[1] + 1))
    exs = [_draw_example(kind, task, noise, rng) for _ in range(k + 1)]
    while True:
        try:
            seq = build_training_sequence(exs[:k], exs[k], family.template, family.max_seq_len)
            break
        except SequenceTooLongError:
            if k == 0:
                raise
            k -= 1
    info = {"kind": kind, "k": k}
    if kind == "keyed":
        info["key_map"] = task[0]
    return seq, info


def meta_pretrain_stream(family: TaskFamily, seed: int, start: int = 0) -> Iterator[PromptSequence]:
    """Infinite deterministic stream of k-shot training sequences."""
    reserved = family.reserved_maps()
    for index in itertools.count(start):
        yield meta_pretrain_item(family, seed, index, reserved)[0]
