"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every primitive returns a new :class:`Tensor` and, when any input requires a
gradient, records a node holding its parents and a closure mapping the output
gradient to input gradients.  :func:`backward` sorts the recorded nodes
topologically and replays the closures in reverse.

Only the operations needed by a small decoder-only transformer are provided.
Broadcasting is limited to adding a vector along the last axis (bias-add).
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

RMS_EPS = 1e-6

_grad_enabled = True


class ShapeError(ValueError):
    """Operand shapes are incompatible for a primitive."""


class InvalidMaskError(ValueError):
    """A loss mask selects no positions."""


class GraphError(RuntimeError):
    """Backward was requested on a graph that cannot be differentiated."""


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (evaluation-only forwards)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # operator sugar; the named functions below are the primitives
    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__


def _make(data: np.ndarray, parents: tuple[Tensor, ...], op: str, backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        out._op = op
    return out


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-D operands, or batched product of 3-D operands
    sharing the leading batch size."""
    sa, sb = a.shape, b.shape
    ok = (len(sa) == len(sb) == 2 and sa[1] == sb[0]) or (
        len(sa) == len(sb) == 3 and sa[0] == sb[0] and sa[2] == sb[1]
    )
    if not ok:
        raise ShapeError(f"matmul: incompatible shapes {sa} and {sb}")
    A, B = a.data, b.data

    def back(g):
        if A.ndim == 2:
            return g @ B.T, A.T @ g
        return g @ B.transpose(0, 2, 1), A.transpose(0, 2, 1) @ g

    out = _rows_matmul(A, B) if A.ndim == 2 else _blocked_bmm(A, B)
    return _make(out, (a, b), "matmul", back)


# BLAS picks different kernels (and so different rounding) depending on the
# operand shapes.  Forward products are therefore computed as stacks of
# fixed-size tiles, which makes every output entry a function of its own
# inputs only: logits for a prefix are bit-identical whatever follows it.
TILE = 32


def _ceil(n: int) -> int:
    return -(-n // TILE) * TILE


def _rows_matmul(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    M, K = A.shape
    P = np.zeros((_ceil(M), K))
    P[:M] = A
    return np.matmul(P.reshape(-1, TILE, K), B).reshape(-1, B.shape[1])[:M]


def _blocked_bmm(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    G, M, K = A.shape
    N = B.shape[2]
    Mp, Kp, Np = _ceil(M), _ceil(K), _ceil(N)
    Ap = np.zeros((G, Mp, Kp))
    Ap[:, :M, :K] = A
    Bp = np.zeros((G, Kp, Np))
    Bp[:, :K, :N] = B
    nm, nk, nn = Mp // TILE, Kp // TILE, Np // TILE
    At = Ap.reshape(G, nm, TILE, nk, TILE).transpose(0, 1, 3, 2, 4)  # G nm nk t t
    Bt = Bp.reshape(G, nk, TILE, nn, TILE).transpose(0, 1, 3, 2, 4)  # G nk nn t t
    C = np.matmul(At[:, :, 0, None], Bt[:, None, 0])
    for j in range(1, nk):  # fixed summation order over reduction tiles
        C += np.matmul(At[:, :, j, None], Bt[:, None, j])
    return C.transpose(0, 1, 3, 2, 4).reshape(G, Mp, Np)[:, :M, :N]


def _row_sum(x: np.ndarray) -> np.ndarray:
    """Sum over the last axis in tile-sized chunks, so trailing zeros never
    change the rounding of the sum."""
    n = x.shape[-1]
    p = np.zeros(x.shape[:-1] + (_ceil(n),))
    p[..., :n] = x
    parts = p.reshape(x.shape[:-1] + (-1, TILE)).sum(axis=-1)
    total = parts[..., 0].copy()
    for j in range(1, parts.shape[-1]):
        total += parts[..., j]
    return total[..., None]


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a vector added along the last axis."""
    if a.shape == b.shape:
        return _make(a.data + b.data, (a, b), "add", lambda g: (g, g))
    if b.data.ndim == 1 and a.shape and a.shape[-1] == b.shape[0]:
        n = b.shape[0]
        return _make(a.data + b.data, (a, b), "bias_add", lambda g: (g, g.reshape(-1, n).sum(axis=0)))
    raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data
    return _make(A * B, (a, b), "mul", lambda g: (g * B, g * A))


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), "scale", lambda g: (g * c,))


def tensor_sum(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.asarray(a.data.sum()), (a,), "sum", lambda g: (np.full(shape, float(g)),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), "transpose", lambda g: (g.transpose(inv),))


def gelu(a: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    x = a.data
    c = np.sqrt(2.0 / np.pi)
    x2 = x * x
    u = c * x * (1.0 + 0.044715 * x2)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def back(g):
        du = c * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _make(out, (a,), "gelu", back)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table`` (shape V x d) for an integer index array."""
    ids = np.asarray(ids, dtype=np.int64)
    V, d = table.shape
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise ShapeError(f"embedding: index out of range for table of {V} rows")

    def back(g):
        gt = np.zeros((V, d))
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, d))
        return (gt,)

    return _make(table.data[ids], (table,), "embedding", back)


def rms_norm(x: Tensor, gain: Tensor) -> Tensor:
    """x / sqrt(mean(x**2) + eps) * gain over the last axis."""
    if gain.data.ndim != 1 or x.shape[-1] != gain.shape[0]:
        raise ShapeError(f"rms_norm: last dim of {x.shape} must equal gain length {gain.shape}")
    X, G = x.data, gain.data
    d = X.shape[-1]
    inv = 1.0 / np.sqrt((X * X).mean(axis=-1, keepdims=True) + RMS_EPS)
    xhat = X * inv

    def back(g):
        gx_hat = g * G
        dx = inv * (gx_hat - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True) / d)
        dgain = (g * xhat).reshape(-1, d).sum(axis=0)
        return dx, dgain

    return _make(xhat * G, (x, gain), "rms_norm", back)


def causal_softmax(scores: Tensor) -> Tensor:
    """Softmax over the last axis of a (B, T, T) score stack, with entries
    above the diagonal (future keys) excluded."""
    S = scores.data
    if S.ndim != 3 or S.shape[1] != S.shape[2]:
        raise ShapeError(f"causal_softmax: expected (B, T, T), got {S.shape}")
    T = S.shape[1]
    future = np.triu(np.ones((T, T), dtype=bool), k=1)
    z = np.where(future, -np.inf, S)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    P = e / _row_sum(e)

    def back(g):
        return (P * (g - (g * P).sum(axis=-1, keepdims=True)),)

    return _make(P, (scores,), "causal_softmax", back)


def _log_softmax(L: np.ndarray) -> np.ndarray:
    m = L.max(axis=-1, keepdims=True)
    z = L - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def weighted_nll(logits: Tensor, targets, weights) -> Tensor:
    """sum_t w_t * -log softmax(logits_t)[target_t] with arbitrary weights.

    Building block of :func:`softmax_cross_entropy_masked`; no normalisation.
    """
    L = logits.data
    if L.ndim != 2:
        raise ShapeError(f"weighted_nll: logits must be (T, V), got {L.shape}")
    T, V = L.shape
    tg = np.asarray(targets, dtype=np.int64)
    w = np.asarray(weights, dtype=np.float64)
    if tg.shape != (T,) or w.shape != (T,):
        raise ShapeError(f"weighted_nll: targets/weights must have length {T}")
    rows = np.arange(T)
    sel = w != 0
    if np.any(tg[sel] < 0) or np.any(tg[sel] >= V):
        raise ShapeError(f"weighted_nll: target id out of range for V={V}")
    tg_safe = np.where(sel, tg, 0)
    logp = _log_softmax(L)
    value = -(w * logp[rows, tg_safe]).sum()

    def back(g):
        p = np.exp(logp)
        p[rows, tg_safe] -= 1.0
        return (p * (w * float(g))[:, None],)

    return _make(np.asarray(value), (logits,), "weighted_nll", back)


def softmax_cross_entropy_masked(logits: Tensor, targets, mask) -> Tensor:
    """Mean negative log-likelihood over positions where ``mask`` is 1."""
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim != 1 or not np.all((m == 0) | (m == 1)):
        raise InvalidMaskError("mask must be a 0/1 vector")
    n = m.sum()
    if n == 0:
        raise InvalidMaskError("mask selects no positions")
    return scale(weighted_nll(logits, targets, m), 1.0 / n)


# ---------------------------------------------------------------------------
# reverse pass


def topological_order(root: Tensor) -> list[Tensor]:
    """Recorded nodes reachable from ``root`` in a valid forward order."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf that
    requires a gradient.  The graph is released afterwards; a second call on
    the same loss raises :class:`GraphError`."""
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("backward already ran on this graph; rebuild the forward pass")
    if not loss.requires_grad or loss._backward is None:
        raise GraphError("loss is detached from every trainable tensor")
    order = topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if node._consumed:
                raise GraphError("graph passes through an already-differentiated node")
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            node._consumed = True
