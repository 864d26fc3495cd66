"""Adafactor (factored second moments, update clipping) and Adam.

Both rules update the trainable tensors of a :class:`~iclft.model.Parameters`
in place.  Gradients are passed explicitly as a name -> array mapping; a
trainable tensor without an entry is treated as having a zero gradient.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ADAFACTOR_DECAY = -0.8
ADAFACTOR_EPS = 1e-30
ADAFACTOR_CLIP = 1.0
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class OptimizerAbort(FloatingPointError):
    """Non-finite gradient; no parameter was modified."""


@dataclass
class OptimizerState:
    kind: str
    step: int = 0
    slots: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {f"{name}/{k}": v for name, s in self.slots.items() for k, v in s.items()}

    @classmethod
    def from_arrays(cls, kind: str, step: int, arrays: dict[str, np.ndarray]) -> OptimizerState:
        slots: dict[str, dict[str, np.ndarray]] = {}
        for key, v in arrays.items():
            name, k = key.rsplit("/", 1)
            slots.setdefault(name, {})[k] = np.array(v, dtype=np.float64)
        return cls(kind, step, slots)


def _collect(params, grads) -> list[tuple[str, np.ndarray]]:
    out = []
    for name in params.trainable():
        g = grads.get(name)
        out.append((name, np.zeros_like(params[name].data) if g is None else np.asarray(g, dtype=np.float64)))
    return out


def _check_finite(items, step: int) -> None:
    for name, g in items:
        if not np.all(np.isfinite(g)):
            raise OptimizerAbort(f"non-finite gradient in {name!r} at step {step}")


def adafactor_step(params, grads, lr: float, state: OptimizerState):
    """One Adafactor update with an explicit learning rate.

    Matrices keep row and column means of g**2 + eps; their outer product
    divided by the mean row statistic estimates the second moment.  Vectors
    keep the full second moment.  The normalised update is clipped to RMS 1.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    items = _collect(params, grads)
    t = state.step + 1
    _check_finite(items, t)
    decay = 1.0 - t**ADAFACTOR_DECAY
    for name, g in items:
        p = params[name].data
        g2 = g * g + ADAFACTOR_EPS
        slot = state.slots.setdefault(name, {})
        if g.ndim == 2:
            r = g2.mean(axis=1)
            c = g2.mean(axis=0)
            if "row" in slot:
                r = decay * slot["row"] + (1.0 - decay) * r
                c = decay * slot["col"] + (1.0 - decay) * c
            slot["row"], slot["col"] = r, c
            v = np.outer(r, c) / r.mean()
        else:
            v = g2
            if "v" in slot:
                v = decay * slot["v"] + (1.0 - decay) * g2
            slot["v"] = v
        u = g / np.sqrt(v)
        rms = np.sqrt(np.mean(u * u)) if u.size else 0.0
        u = u / max(1.0, rms / ADAFACTOR_CLIP)
        p -= lr * u
    state.step = t
    return params, state


def adam_step(params, grads, lr: float, state: OptimizerState):
    """Bias-corrected Adam (beta1 0.9, beta2 0.999, eps 1e-8)."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    items = _collect(params, grads)
    t = state.step + 1
    _check_finite(items, t)
    c1 = 1.0 - ADAM_BETA1**t
    c2 = 1.0 - ADAM_BETA2**t
    for name, g in items:
        slot = state.slots.setdefault(name, {"m": np.zeros_like(g), "v": np.zeros_like(g)})
        slot["m"] = ADAM_BETA1 * slot["m"] + (1.0 - ADAM_BETA1) * g
        slot["v"] = ADAM_BETA2 * slot["v"] + (1.0 - ADAM_BETA2) * (g * g)
        params[name].data -= lr * (slot["m"] / c1) / (np.sqrt(slot["v"] / c2) + ADAM_EPS)
    state.step = t
    return params, state


STEP_RULES = {"adafactor": adafactor_step, "adam": adam_step}


def new_state(kind: str) -> OptimizerState:
    if kind not in STEP_RULES:
        raise ValueError(f"unknown optimizer {kind!r}; expected one of {sorted(STEP_RULES)}")
    return OptimizerState(kind)


def apply_gradients(params, lr: float, state: OptimizerState):
    """Step ``state.kind`` using the ``.grad`` fields of the trainable tensors."""
    grads = {n: params[n].grad for n in params.trainable() if params[n].grad is not None}
    return STEP_RULES[state.kind](params, grads, lr, state)
