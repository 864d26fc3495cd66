"""Tiny decoder-only causal transformer on top of :mod:`iclft.numerics`.

Pre-norm blocks (RMSNorm), multi-head causal attention with separate Q/K/V/O
projections, a GELU MLP, learned absolute position embeddings and an untied
unembedding.  No biases.  Weight matrices are stored as (in, out) so a linear
layer is ``x @ W``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .prompt import VOCAB_SIZE, PromptSequence, SequenceTooLongError


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = VOCAB_SIZE
    d_model: int = 128
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 512
    max_seq_len: int = 256

    def __post_init__(self):
        for k, v in asdict(self).items():
            if int(v) < 1:
                raise ValueError(f"ModelConfig.{k} must be positive, got {v}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")


@dataclass(frozen=True)
class LoRAConfig:
    rank: int = 16
    targets: tuple[str, ...] = ("wk", "wv", "w_in", "w_out")
    alpha: float = 16.0

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank


def _layer_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d = cfg.d_model
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (cfg.vocab_size, d),
        "pos_emb": (cfg.max_seq_len, d),
    }
    for i in range(cfg.n_layers):
        p = f"h{i}."
        shapes[p + "attn_norm"] = (d,)
        for w in ("wq", "wk", "wv", "wo"):
            shapes[p + w] = (d, d)
        shapes[p + "mlp_norm"] = (d,)
        shapes[p + "w_in"] = (d, cfg.d_ff)
        shapes[p + "w_out"] = (cfg.d_ff, d)
    shapes["final_norm"] = (d,)
    shapes["unembed"] = (d, cfg.vocab_size)
    return shapes


class Parameters:
    """Named tensors of one model.  ``requires_grad`` marks the trainable set."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor], lora: LoRAConfig | None = None):
        self.config = config
        self.tensors = tensors
        self.lora = lora

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return list(self.tensors)

    def trainable(self) -> list[str]:
        return [n for n, t in self.tensors.items() if t.requires_grad]

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> Parameters:
        return Parameters(
            self.config,
            {n: Tensor(t.data.copy(), requires_grad=t.requires_grad) for n, t in self.tensors.items()},
            self.lora,
        )

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.tensors.items()}

    def equal(self, other: Parameters) -> bool:
        """Byte-level equality of every tensor."""
        if self.names() != other.names():
            return False
        return all(
            a.data.shape == b.data.shape and a.data.tobytes() == b.data.tobytes()
            for a, b in zip(self.tensors.values(), other.tensors.values())
        )


def sinusoid_table(n: int, d: int) -> np.ndarray:
    """Sine/cosine position table with per-entry RMS d**-0.5."""
    pos = np.arange(n)[:, None]
    freq = np.exp(-np.log(10000.0) * (np.arange(0, d, 2) / d))
    table = np.zeros((n, d))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq[: d // 2])
    return table * np.sqrt(2.0 / d)


def init_params(config: ModelConfig, seed: int) -> Parameters:
    """Gaussian init with std d_model**-0.5 for every projection and the token
    embedding, unit norm gains, and a sinusoidal start for the (learned)
    position embedding, which makes relative-offset attention easy to find."""
    rng = np.random.default_rng(seed)
    std = config.d_model**-0.5
    tensors = {}
    for name, shape in _layer_shapes(config).items():
        if len(shape) == 1:
            data = np.ones(shape)
        elif name == "pos_emb":
            data = sinusoid_table(*shape)
        else:
            data = rng.normal(0.0, std, size=shape)
        tensors[name] = Tensor(data, requires_grad=True)
    return Parameters(config, tensors)


def attach_lora(params: Parameters, cfg: LoRAConfig, seed: int) -> tuple[Parameters, list[str]]:
    """Add low-rank adapters to every target matrix and freeze the base model.

    A has shape (in, rank) with Gaussian entries of std in**-0.5; B has shape
    (rank, out) and starts at zero, so the adapted model initially computes
    exactly the base function.
    """
    if cfg.rank < 1:
        raise ValueError("LoRA rank must be >= 1")
    rng = np.random.default_rng(seed)
    tensors = {n: Tensor(t.data.copy(), requires_grad=False) for n, t in params.tensors.items()}
    adapters = []
    for name, t in params.tensors.items():
        if name.split(".")[-1] not in cfg.targets or name.endswith((".lora_A", ".lora_B")):
            continue
        n_in, n_out = t.shape
        if cfg.rank >= min(n_in, n_out):
            raise ValueError(f"LoRA rank {cfg.rank} too large for {name} with shape {t.shape}")
        tensors[name + ".lora_A"] = Tensor(rng.normal(0.0, n_in**-0.5, size=(n_in, cfg.rank)), requires_grad=True)
        tensors[name + ".lora_B"] = Tensor(np.zeros((cfg.rank, n_out)), requires_grad=True)
        adapters += [name + ".lora_A", name + ".lora_B"]
    if not adapters:
        raise ValueError(f"no LoRA targets matched {cfg.targets}")
    return Parameters(params.config, tensors, cfg), adapters


def lora_delta(params: Parameters, name: str) -> np.ndarray:
    """Effective weight change scaling * A @ B contributed by the adapter on ``name``."""
    a = params[name + ".lora_A"].data
    b = params[name + ".lora_B"].data
    return params.lora.scaling * (a @ b)


# ---------------------------------------------------------------------------
# forward


def _linear(params: Parameters, x: Tensor, name: str) -> Tensor:
    out = nx.matmul(x, params[name])
    a = params.tensors.get(name + ".lora_A")
    if a is not None:
        low = nx.matmul(nx.matmul(x, a), params[name + ".lora_B"])
        out = nx.add(out, nx.scale(low, params.lora.scaling))
    return out


def _check_tokens(cfg: ModelConfig, tokens: np.ndarray) -> None:
    if tokens.shape[-1] > cfg.max_seq_len:
        raise SequenceTooLongError(f"sequence of {tokens.shape[-1]} tokens exceeds max_seq_len={cfg.max_seq_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise ValueError(f"token id out of range for vocab_size={cfg.vocab_size}")


def forward_batch(params: Parameters, tokens) -> Tensor:
    """Logits for a (B, T) token matrix, returned flattened as (B*T, V)."""
    cfg = params.config
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2 or tokens.shape[1] == 0:
        raise ValueError(f"expected a non-empty (B, T) token matrix, got shape {tokens.shape}")
    _check_tokens(cfg, tokens)
    B, T = tokens.shape
    d, H = cfg.d_model, cfg.n_heads
    dh = d // H
    x = nx.add(
        nx.embedding(params["tok_emb"], tokens.reshape(-1)),
        nx.embedding(params["pos_emb"], np.tile(np.arange(T), B)),
    )
    for i in range(cfg.n_layers):
        p = f"h{i}."
        h = nx.rms_norm(x, params[p + "attn_norm"])

        def heads(t):
            return nx.reshape(nx.transpose(nx.reshape(t, (B, T, H, dh)), (0, 2, 1, 3)), (B * H, T, dh))

        q = heads(_linear(params, h, p + "wq"))
        k = heads(_linear(params, h, p + "wk"))
        v = heads(_linear(params, h, p + "wv"))
        att = nx.causal_softmax(nx.scale(nx.matmul(q, nx.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh)))
        o = nx.matmul(att, v)
        o = nx.reshape(nx.transpose(nx.reshape(o, (B, H, T, dh)), (0, 2, 1, 3)), (B * T, d))
        x = nx.add(x, _linear(params, o, p + "wo"))
        h = nx.rms_norm(x, params[p + "mlp_norm"])
        x = nx.add(x, _linear(params, nx.gelu(_linear(params, h, p + "w_in")), p + "w_out"))
    x = nx.rms_norm(x, params["final_norm"])
    return _linear(params, x, "unembed")


def forward_logits(params: Parameters, tokens) -> Tensor:
    """Next-token logits (T x V) for one sequence; row t depends on tokens[:t+1] only."""
    return forward_batch(params, np.asarray(tokens, dtype=np.int64).reshape(1, -1))


def nll_from_targets(params: Parameters, inputs, targets, weights) -> Tensor:
    """Mean weighted NLL where row t of forward(inputs) scores targets[t]."""
    logits = forward_logits(params, inputs)
    m = np.asarray(weights, dtype=np.float64)
    if m.sum() == 0:
        raise nx.InvalidMaskError("mask selects no positions")
    return nx.softmax_cross_entropy_masked(logits, targets, m)


def sequence_nll(params: Parameters, prompt: PromptSequence) -> Tensor:
    """Mean NLL per masked token; logits at position t score token t+1."""
    toks = prompt.tokens
    if sum(prompt.loss_mask[1:]) == 0:
        raise nx.InvalidMaskError("prompt has no masked target positions")
    return nll_from_targets(params, toks[:-1], toks[1:], prompt.loss_mask[1:])


def batch_nll(params: Parameters, prompts: list[PromptSequence]) -> Tensor:
    """Mean NLL over all masked tokens of several right-padded sequences."""
    T = max(len(p.tokens) for p in prompts) - 1
    B = len(prompts)
    inputs = np.zeros((B, T), dtype=np.int64)
    targets = np.zeros((B, T), dtype=np.int64)
    weights = np.zeros((B, T))
    for b, p in enumerate(prompts):
        n = len(p.tokens) - 1
        inputs[b, :n] = p.tokens[:-1]
        targets[b, :n] = p.tokens[1:]
        weights[b, :n] = p.loss_mask[1:]
    total = weights.sum()
    if total == 0:
        raise nx.InvalidMaskError("batch has no masked target positions")
    logits = forward_batch(params, inputs)
    return nx.scale(nx.weighted_nll(logits, targets.reshape(-1), weights.reshape(-1)), 1.0 / total)


# ---------------------------------------------------------------------------
# inference


def greedy_continuation(params: Parameters, prefix, stop: int, max_new: int) -> list[int]:
    """Argmax decoding; the stop token is consumed but not returned."""
    if len(prefix) == 0:
        raise ValueError("prefix must be non-empty")
    seq = [int(t) for t in prefix]
    out: list[int] = []
    limit = params.config.max_seq_len
    with nx.no_grad():
        while len(out) < max_new and len(seq) < limit:
            nxt = int(np.argmax(forward_logits(params, seq).data[-1]))
            if nxt == stop:
                break
            out.append(nxt)
            seq.append(nxt)
    return out


def _log_softmax_rows(L: np.ndarray) -> np.ndarray:
    m = L.max(axis=-1, keepdims=True)
    z = L - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def score_labels(params: Parameters, prefix, labels) -> list[float]:
    """Total log-probability of each candidate continuation given ``prefix``."""
    if not labels:
        raise ValueError("score_labels needs at least one label")
    prefix = [int(t) for t in prefix]
    if not prefix:
        raise ValueError("prefix must be non-empty")
    seqs = [prefix + [int(t) for t in lab] for lab in labels]
    if any(len(lab) == 0 for lab in labels):
        raise ValueError("labels must be non-empty token lists")
    T = max(len(s) for s in seqs) - 1
    inputs = np.zeros((len(seqs), T), dtype=np.int64)
    for b, s in enumerate(seqs):
        inputs[b, : len(s) - 1] = s[:-1]
    with nx.no_grad():
        logits = forward_batch(params, inputs).data.reshape(len(seqs), T, -1)
    P = len(prefix)
    scores = []
    for b, lab in enumerate(labels):
        rows = _log_softmax_rows(logits[b, P - 1 : P - 1 + len(lab)])
        scores.append(float(rows[np.arange(len(lab)), lab].sum()))
    return scores


def map_label(scores) -> int:
    """Index of the best score; ties go to the lowest index."""
    return int(np.argmax(np.asarray(scores)))
