"""Prequential (predict-then-train) fine-tuning on k-shot sequences,
prequential scores, grid-based hyperparameter selection and
multi-permutation next-step curves.

Randomness is drawn from generators keyed on ``(seed, step, slot)`` so the
context used at step i depends only on the seed and the examples before i.
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from . import optim
from .model import Parameters, sequence_nll
from .prompt import Template, build_training_sequence
from .runner.parsing import answers_match
from .tasks import Dataset
from .training import HPConfig, gradient_step, predict_raw, prepare_params, sample_context

__all__ = [
    "HPConfig",
    "PrequentialTrace",
    "PrequentialScore",
    "run_prequential",
    "prequential_average",
    "hp_sweep",
    "hp_select",
    "multi_permutation_curve",
]

TRACE_COLUMNS = ("step", "x_id", "acc", "nll", "cum_acc", "cum_nll", "n_ctx", "epoch_steps")


@dataclass
class PrequentialTrace:
    hp: HPConfig
    params: Parameters
    acc: list[float] = field(default_factory=list)
    nll: list[float] = field(default_factory=list)
    cum_acc: list[float] = field(default_factory=list)
    cum_nll: list[float] = field(default_factory=list)
    n_ctx: list[int] = field(default_factory=list)
    epoch_steps: list[int] = field(default_factory=list)
    x_ids: list[int] = field(default_factory=list)
    predictions: list[str] = field(default_factory=list)
    wall_time: list[float] = field(default_factory=list)
    train_losses: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.acc)

    @property
    def n_gradient_steps(self) -> int:
        return sum(self.epoch_steps)

    def rows(self):
        for i in range(len(self)):
            yield (i + 1, self.x_ids[i], self.acc[i], self.nll[i], self.cum_acc[i], self.cum_nll[i],
                   self.n_ctx[i], self.epoch_steps[i])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(TRACE_COLUMNS)
            for row in self.rows():
                w.writerow([repr(v) if isinstance(v, float) else v for v in row])


@dataclass(frozen=True)
class PrequentialScore:
    value: float
    kind: str
    window: int | None = None


def run_prequential(
    theta0: Parameters,
    data: Dataset,
    hp: HPConfig,
    template: Template,
    seed: int,
    *,
    max_new: int = 64,
    x_ids=None,
) -> PrequentialTrace:
    """Evaluate each example on the model trained on its predecessors, then
    take ``hp.epochs`` gradient steps on freshly sampled k-shot sequences
    ending in that example.  ``theta0`` is never modified."""
    if len(data) == 0:
        raise ValueError("run_prequential needs a non-empty dataset")
    params = prepare_params(theta0, hp, seed) if hp.epochs > 0 else theta0
    state = optim.new_state(hp.optimizer)
    max_len = params.config.max_seq_len
    trace = PrequentialTrace(hp, params)
    ex = data.examples
    L_acc = 0.0
    L_nll = 0.0
    for i, target in enumerate(ex):
        t0 = time.perf_counter()
        history = ex[:i]
        ctx = sample_context(history, hp.K, np.random.default_rng([seed, i, 0]))
        raw = predict_raw(params, ctx, target.x, template, data.labels, max_new)
        acc = 1.0 if answers_match(raw, target.y) else 0.0
        with nx.no_grad():
            seq = build_training_sequence(ctx, target, template, max_len, mask_context=False)
            nll = sequence_nll(params, seq).item()
        L_acc = L_acc + acc
        L_nll = L_nll + nll
        for e in range(hp.epochs):
            ctx_e = sample_context(history, hp.K, np.random.default_rng([seed, i, e + 1]))
            seq = build_training_sequence(ctx_e, target, template, max_len)
            trace.train_losses.append(gradient_step(params, seq, ctx_e + [target], hp.lr, state))
        trace.acc.append(acc)
        trace.nll.append(nll)
        trace.cum_acc.append(L_acc)
        trace.cum_nll.append(L_nll)
        trace.n_ctx.append(len(ctx))
        trace.epoch_steps.append(hp.epochs)
        trace.x_ids.append(i if x_ids is None else int(x_ids[i]))
        trace.predictions.append(raw)
        trace.wall_time.append(time.perf_counter() - t0)
    return trace


def prequential_average(trace: PrequentialTrace, kind: str = "accuracy", window: int | None = None) -> PrequentialScore:
    """L_N / N over the whole run, or the mean of the last ``window`` steps."""
    values = {"accuracy": trace.acc, "nll": trace.nll}.get(kind)
    if values is None:
        raise ValueError(f"kind must be 'accuracy' or 'nll', got {kind!r}")
    n = len(values)
    if n == 0:
        raise ValueError("empty trace")
    if window is None:
        cum = trace.cum_acc if kind == "accuracy" else trace.cum_nll
        return PrequentialScore(cum[-1] / n, kind, None)
    if not 1 <= window <= n:
        raise ValueError(f"window {window} outside [1, {n}]")
    return PrequentialScore(float(sum(values[n - window :]) / window), kind, window)


def hp_sweep(theta0, data, grid, template, seed, **kw) -> list[PrequentialTrace]:
    """One prequential run per grid point, all from ``theta0`` and the same data order."""
    return [run_prequential(theta0, data, hp, template, seed, **kw) for hp in grid]


def select_best(grid, traces, metric: str = "accuracy", window: int | None = None) -> int:
    """Index of the winning grid point.  Higher accuracy or lower NLL wins;
    ties go to the lower learning rate, then fewer epochs, then grid order."""
    sign = -1.0 if metric == "accuracy" else 1.0

    def key(i):
        score = prequential_average(traces[i], metric, window).value
        return (sign * score, grid[i].lr, grid[i].epochs, i)

    return min(range(len(grid)), key=key)


def hp_select(theta0, data, grid, template, seed, metric: str = "accuracy", window: int | None = None, **kw):
    """Return (best HPConfig, its trace); the trace carries the trained parameters."""
    grid = list(grid)
    if not grid:
        raise ValueError("hp_select needs a non-empty grid")
    traces = hp_sweep(theta0, data, grid, template, seed, **kw)
    best = select_best(grid, traces, metric, window)
    return grid[best], traces[best]


@dataclass
class NextStepCurve:
    mean_acc: np.ndarray
    var_acc: np.ndarray
    mean_nll: np.ndarray
    var_nll: np.ndarray
    n_perms: int


def multi_permutation_curve(theta0, data: Dataset, hp: HPConfig, n_perms: int, seed: int, template: Template, **kw) -> NextStepCurve:
    """Position-wise mean and (population) variance of next-step accuracy and
    NLL over ``n_perms`` data orders.  Order 0 is the given order."""
    if n_perms < 1:
        raise ValueError("n_perms must be >= 1")
    accs, nlls = [], []
    for r in range(n_perms):
        order = np.arange(len(data)) if r == 0 else np.random.default_rng([seed, r, 99]).permutation(len(data))
        trace = run_prequential(theta0, data.subset(order), hp, template, seed + r, x_ids=order, **kw)
        accs.append(trace.acc)
        nlls.append(trace.nll)
    A, N = np.asarray(accs), np.asarray(nlls)
    return NextStepCurve(A.mean(axis=0), A.var(axis=0), N.mean(axis=0), N.var(axis=0), n_perms)
