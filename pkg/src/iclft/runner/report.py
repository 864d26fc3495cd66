"""Seed aggregation (mean and 2·SEM) and the reporting queries built on it."""
from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import astuple, dataclass, fields

import numpy as np


@dataclass(frozen=True)
class Cell:
    task: str
    strategy: str
    budget: int
    n: int
    mean: float
    sem2: float | None  # 2 * sample std / sqrt(n); None when n == 1
    n_errors: int = 0


SUMMARY_COLUMNS = tuple(f.name for f in fields(Cell))


def mean_sem2(values) -> tuple[float, float | None]:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("no values to aggregate")
    if v.size == 1:
        return float(v[0]), None
    return float(v.mean()), float(2.0 * v.std(ddof=1) / math.sqrt(v.size))


def aggregate(rows) -> list[Cell]:
    """One Cell per (task, strategy, budget), sorted by those keys.  Rows
    with an error (no accuracy) are counted but not averaged."""
    groups: dict[tuple, list] = defaultdict(list)
    errors: dict[tuple, int] = defaultdict(int)
    for r in rows:
        key = (r.task, r.strategy, r.budget)
        if r.test_accuracy is None:
            errors[key] += 1
            groups.setdefault(key, [])
        else:
            groups[key].append(r.test_accuracy)
    cells = []
    for key in sorted(groups):
        vals = groups[key]
        if vals:
            m, s = mean_sem2(vals)
        else:
            m, s = float("nan"), None
        cells.append(Cell(*key, n=len(vals), mean=m, sem2=s, n_errors=errors[key]))
    return cells


def write_summary(path, cells) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for c in cells:
            w.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in astuple(c)])


def cell(cells, strategy: str, budget: int) -> Cell:
    for c in cells:
        if c.strategy == strategy and c.budget == budget:
            return c
    raise KeyError(f"no cell for {strategy} at budget {budget}")


def best_icl(cells, budget: int) -> Cell:
    """The ICL_ONLY K with the highest mean accuracy at ``budget`` (smallest K on ties)."""
    cands = [c for c in cells if c.strategy.startswith("icl_only:") and c.budget == budget and c.n]
    if not cands:
        raise KeyError(f"no ICL_ONLY cells at budget {budget}")
    return max(cands, key=lambda c: (c.mean, -int(c.strategy.split(":k")[1])))


def joint_sem2(a: Cell, b: Cell) -> float:
    """2σ of the difference of two independent cell means."""
    return math.sqrt((a.sem2 or 0.0) ** 2 + (b.sem2 or 0.0) ** 2)


def format_table(cells) -> str:
    lines = [f"{'strategy':<16} {'budget':>6} {'n':>3} {'mean':>7} {'±2sem':>7}"]
    for c in cells:
        s = "" if c.sem2 is None else f"{c.sem2:.3f}"
        lines.append(f"{c.strategy:<16} {c.budget:>6} {c.n:>3} {c.mean:>7.3f} {s:>7}")
    return "\n".join(lines)
