"""ICL-only, FT-only and ICL+FT behind one predictor, plus i.i.d. fine-tuning."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import optim
from .model import Parameters
from .prompt import Template, build_training_sequence
from .runner.parsing import parse_response
from .tasks import Dataset
from .training import HPConfig, gradient_step, predict_raw, prepare_params, sample_context


class StrategyKind(str, enum.Enum):
    ICL_ONLY = "icl_only"
    FT_ONLY = "ft_only"
    ICL_FT = "icl_ft"


class TrainingMode(str, enum.Enum):
    PREQUENTIAL = "prequential"
    IID = "iid"


@dataclass
class Predictor:
    params: Parameters
    kind: StrategyKind
    k_eval: int
    template: Template
    train: Dataset | None = None
    labels: list[str] | None = None
    resample_context: bool = True  # False: one context set shared by every query
    max_new: int = 64

    def __post_init__(self):
        self.kind = StrategyKind(self.kind)
        if self.kind is StrategyKind.FT_ONLY and self.k_eval:
            raise ValueError("FT_ONLY predicts without in-context examples (k_eval must be 0)")
        if self.kind is not StrategyKind.FT_ONLY and self.k_eval > 0 and not (self.train and len(self.train)):
            raise ValueError(f"{self.kind.value} with k_eval={self.k_eval} needs a non-empty train set")
        if self.labels is None and self.train is not None:
            self.labels = self.train.labels


def _context_rng(p: Predictor, seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index] if p.resample_context else [seed])


def predict(p: Predictor, x: str, seed: int, index: int = 0) -> str:
    """Raw prediction for query ``x``; ``index`` keys the context draw."""
    pool = p.train.examples if p.train is not None else []
    ctx = sample_context(pool, p.k_eval, _context_rng(p, seed, index))
    return predict_raw(p.params, ctx, x, p.template, p.labels, p.max_new)


@dataclass
class EvalResult:
    accuracy: float
    records: list[dict] = field(default_factory=list)


def evaluate(p: Predictor, test: Dataset, seed: int, predict_fn=None) -> EvalResult:
    """Whitespace-trimmed exact match of the parsed prediction against y."""
    if len(test) == 0:
        raise ValueError("evaluate needs a non-empty test set")
    predict_fn = predict_fn or predict
    records, hits = [], 0
    for i, ex in enumerate(test.examples):
        raw = predict_fn(p, ex.x, seed, i)
        parsed = parse_response(raw)
        ok = parsed == ex.y.strip()
        hits += ok
        records.append({"index": i, "x": ex.x, "y": ex.y, "raw": raw, "parsed": parsed, "correct": ok})
    return EvalResult(hits / len(test), records)


def train_iid(theta0: Parameters, train: Dataset, hp: HPConfig, seed: int, template: Template) -> Parameters:
    """Standard fine-tuning: each epoch visits a seeded shuffle of the train
    set; every target gets ``hp.K`` context examples from the rest of the
    train set and one optimizer step."""
    if len(train) == 0:
        raise ValueError("train_iid needs a non-empty train set")
    if hp.epochs == 0:
        return theta0
    params = prepare_params(theta0, hp, seed)
    state = optim.new_state(hp.optimizer)
    ex = train.examples
    for e in range(hp.epochs):
        order = np.random.default_rng([seed, e, 0]).permutation(len(ex))
        for j in order:
            rng = np.random.default_rng([seed, e, 1, int(j)])
            ctx = sample_context(ex, hp.K, rng, exclude=int(j))
            seq = build_training_sequence(ctx, ex[j], template, params.config.max_seq_len)
            gradient_step(params, seq, ctx + [ex[j]], hp.lr, state)
    return params


def make_predictor(kind, params, hp_or_k, template, train, **kw) -> Predictor:
    """Predictor for a trained (or base) model; FT_ONLY never uses context."""
    kind = StrategyKind(kind)
    k = hp_or_k.K if isinstance(hp_or_k, HPConfig) else int(hp_or_k)
    if kind is StrategyKind.FT_ONLY:
        k = 0
    return Predictor(params, kind, k, template, train, **kw)
