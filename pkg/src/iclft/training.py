"""Pieces shared by prequential training, i.i.d. training and prediction."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from . import optim
from .model import LoRAConfig, Parameters, attach_lora, greedy_continuation, map_label, score_labels, sequence_nll
from .prompt import EOS, Example, PromptSequence, Template, build_eval_prompt, detokenize, tokenize

# Callables invoked with the examples of every sequence that reaches a
# gradient step (context examples followed by the target).
GRADIENT_HOOKS: list = []


@dataclass(frozen=True)
class HPConfig:
    lr: float
    epochs: int
    K: int = 0
    optimizer: str = "adafactor"
    adapter: str = "none"
    lora_rank: int = 16

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.epochs < 0 or self.K < 0:
            raise ValueError("epochs and K must be non-negative")
        if self.optimizer not in optim.STEP_RULES:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.adapter not in ("none", "lora"):
            raise ValueError(f"adapter must be 'none' or 'lora', got {self.adapter!r}")

    @property
    def tag(self) -> str:
        s = f"lr={self.lr:g};E={self.epochs};K={self.K};opt={self.optimizer}"
        if self.adapter == "lora":
            s += f";lora={self.lora_rank}"
        return s


def prepare_params(base: Parameters, hp: HPConfig, seed: int) -> Parameters:
    """Private trainable copy of ``base`` (with adapters when requested)."""
    if hp.adapter == "lora":
        params, _ = attach_lora(base, LoRAConfig(rank=hp.lora_rank), seed)
        return params
    params = base.copy()
    for t in params.tensors.values():
        t.requires_grad = True
    return params


def sample_context(pool: list[Example], k: int, rng: np.random.Generator, exclude: int | None = None) -> list[Example]:
    """Up to ``k`` examples drawn uniformly without replacement, in sampled order."""
    idx = [i for i in range(len(pool)) if i != exclude] if exclude is not None else range(len(pool))
    idx = np.asarray(list(idx), dtype=np.int64)
    n = min(k, len(idx))
    if n == 0:
        return []
    return [pool[int(j)] for j in rng.choice(idx, n, replace=False)]


def gradient_step(params: Parameters, seq: PromptSequence, examples, lr: float, state: optim.OptimizerState) -> float:
    for hook in GRADIENT_HOOKS:
        hook(examples)
    params.zero_grad()
    loss = sequence_nll(params, seq)
    nx.backward(loss)
    optim.apply_gradients(params, lr, state)
    params.zero_grad()
    return loss.item()


def label_token_lists(labels) -> list[list[int]]:
    return [tokenize(lab) + [EOS] for lab in labels]


def predict_raw(
    params: Parameters,
    ctx,
    x: str,
    template: Template,
    labels=None,
    max_new: int = 64,
) -> str:
    """MAP over ``labels`` when given, otherwise greedy decoding to EOS."""
    prefix = build_eval_prompt(ctx, x, template, params.config.max_seq_len)
    if labels:
        return labels[map_label(score_labels(params, prefix, label_token_lists(labels)))]
    return detokenize(greedy_continuation(params, prefix, EOS, max_new))
