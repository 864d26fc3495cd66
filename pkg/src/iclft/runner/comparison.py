"""Strategy comparison across sample-size budgets and seeds."""
from __future__ import annotations

import csv
import json
import logging
import platform
import time
from dataclasses import astuple, dataclass, fields
from pathlib import Path

import numpy as np

from .. import __version__
from ..checkpoint import load_checkpoint
from ..model import Parameters
from ..prequential import hp_select, prequential_average
from ..strategies import StrategyKind, evaluate, make_predictor, train_iid
from ..tasks import (
    Dataset,
    SplitSpec,
    flip_labels,
    gen_keyed_classification,
    gen_parity,
    gen_prior_task,
    heldout_keyed_task,
    load_task_file,
    permute_labels,
    split,
)
from .config import RunConfig, TaskSpec
from .report import aggregate, write_summary

log = logging.getLogger(__name__)


@dataclass
class ResultRow:
    task: str
    strategy: str
    model_tag: str
    budget: int
    seed: int
    selected_hp: str
    test_accuracy: float | None
    preq_score: float | None
    error: str = ""


RESULT_COLUMNS = tuple(f.name for f in fields(ResultRow))


def build_task(spec: TaskSpec) -> Dataset:
    if spec.kind == "heldout_keyed":
        d = heldout_keyed_task(spec.seed, spec.n_examples, spec.n_keys, spec.n_classes, spec.noise_len)
    elif spec.kind == "keyed":
        d = gen_keyed_classification(spec.n_keys, spec.n_classes, spec.noise_len, spec.n_examples, spec.seed)
    elif spec.kind == "prior":
        d = gen_prior_task(spec.n_examples, spec.seed, spec.noise_len)
    elif spec.kind == "parity":
        d = gen_parity(spec.n_bits, spec.n_examples, spec.seed)
    elif spec.kind == "file":
        if not spec.path:
            raise ValueError("task kind 'file' needs a path")
        d = load_task_file(spec.path)
    else:
        raise ValueError(f"unknown task kind {spec.kind!r}")
    if spec.variant == "flipped":
        d = flip_labels(d)
    elif spec.variant == "permuted":
        d = permute_labels(d, spec.variant_seed)
    return d


def strategy_names(cfg: RunConfig) -> list[str]:
    """Row labels: trained strategies by name, ICL_ONLY once per K."""
    out = []
    for s in cfg.strategies:
        if s == StrategyKind.ICL_ONLY.value:
            out += [f"icl_only:k{k}" for k in cfg.k_eval]
        else:
            out.append(s)
    return out


def _fmt(v):
    if v is None:
        return ""
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _write_rows(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _trained_params(base, train, grid, cfg: RunConfig, template, seed):
    hp, trace = hp_select(base, train, grid, template, seed, cfg.selection_metric)
    score = prequential_average(trace, cfg.selection_metric).value
    params = trace.params
    if cfg.training_mode == "iid":
        # hp chosen prequentially, weights retrained i.i.d. on the same data
        params = train_iid(base, train, hp, seed, template)
    return hp, params, score, trace


def run_comparison(cfg: RunConfig, base: Parameters | None = None, out_dir=None) -> list[ResultRow]:
    """Run every (seed, budget, strategy) cell and write results.csv,
    summary.csv, timings.csv and manifest.json under the output directory.
    Rows whose cell raised carry the message in ``error``."""
    cfg.validate()
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if base is None:
        base, _, _ = load_checkpoint(cfg.base_checkpoint)
    template = cfg.template.build()
    data = build_task(cfg.task)
    if max(cfg.budgets) + cfg.n_test > len(data):
        raise ValueError(
            f"task has {len(data)} examples; largest budget plus n_test needs {max(cfg.budgets) + cfg.n_test}"
        )
    rows: list[ResultRow] = []
    timings: list[tuple] = []
    trace_dir = out / "traces"
    trace_dir.mkdir(exist_ok=True)

    for seed in cfg.seeds:
        for budget in cfg.budgets:
            train, test = split(data, SplitSpec(seed, budget, cfg.n_test))
            for strategy in cfg.strategies:
                kind = StrategyKind(strategy)
                if kind is StrategyKind.ICL_ONLY:
                    for k in cfg.k_eval:
                        name = f"icl_only:k{k}"
                        t0 = time.perf_counter()
                        try:
                            p = make_predictor(kind, base, k, template, train, resample_context=cfg.resample_context)
                            acc = evaluate(p, test, seed).accuracy
                            rows.append(ResultRow(data.name, name, cfg.model_tag, budget, seed, f"K={k}", acc, None))
                        except Exception as e:  # recorded, run continues
                            log.exception("cell %s/%d/%d failed", name, budget, seed)
                            rows.append(ResultRow(data.name, name, cfg.model_tag, budget, seed, f"K={k}", None, None, repr(e)))
                        timings.append((name, budget, seed, "eval", time.perf_counter() - t0))
                    continue
                k_train = 0 if kind is StrategyKind.FT_ONLY else cfg.grid.K
                grid = cfg.grid.configs(k_train)
                t0 = time.perf_counter()
                try:
                    hp, params, score, trace = _trained_params(base, train, grid, cfg, template, seed)
                    t1 = time.perf_counter()
                    trace.to_csv(trace_dir / f"{strategy}_b{budget}_s{seed}.csv")
                    p = make_predictor(kind, params, hp, template, train, resample_context=cfg.resample_context)
                    acc = evaluate(p, test, seed).accuracy
                    t2 = time.perf_counter()
                    rows.append(ResultRow(data.name, strategy, cfg.model_tag, budget, seed, hp.tag, acc, score))
                    timings.append((strategy, budget, seed, "train_select", t1 - t0))
                    timings.append((strategy, budget, seed, "eval", t2 - t1))
                except Exception as e:
                    log.exception("cell %s/%d/%d failed", strategy, budget, seed)
                    rows.append(ResultRow(data.name, strategy, cfg.model_tag, budget, seed, "", None, None, repr(e)))
                    timings.append((strategy, budget, seed, "failed", time.perf_counter() - t0))
            log.info("seed %d budget %d done", seed, budget)

    _write_rows(out / "results.csv", RESULT_COLUMNS, (astuple(r) for r in rows))
    _write_rows(out / "timings.csv", ("strategy", "budget", "seed", "phase", "seconds"), timings)
    write_summary(out / "summary.csv", aggregate(rows))
    manifest = {
        "config_digest": cfg.digest(),
        "config": cfg.to_dict(),
        "seeds": cfg.seeds,
        "task": data.name,
        "n_rows": len(rows),
        "versions": {"iclft": __version__, "numpy": np.__version__, "python": platform.python_version()},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return rows


def read_results(path) -> list[ResultRow]:
    def num(s):
        return float(s) if s != "" else None

    with open(path, newline="") as f:
        return [
            ResultRow(r["task"], r["strategy"], r["model_tag"], int(r["budget"]), int(r["seed"]), r["selected_hp"],
                      num(r["test_accuracy"]), num(r["preq_score"]), r["error"])
            for r in csv.DictReader(f)
        ]
