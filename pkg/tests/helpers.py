"""Shared oracles for the test suite."""
import numpy as np


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Numerical gradient of scalar f at x (x is perturbed in place and restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def log_softmax_ref(L):
    """Plain log-sum-exp, written independently of the library."""
    out = np.empty_like(L)
    for t in range(L.shape[0]):
        m = max(L[t])
        lse = m + np.log(sum(np.exp(v - m) for v in L[t]))
        out[t] = L[t] - lse
    return out


def model_gradcheck(seed: int, d_model: int = 32, n_heads: int = 4, d_ff: int = 64, T: int = 8):
    """Worst per-tensor normwise relative error between backward() and central
    differences of the independent reference forward, for a 1-layer model.

    Token- and position-embedding rows the sequence never reads cannot
    influence the loss, so their finite difference is exactly zero; those
    rows are asserted to carry an exactly-zero analytic gradient instead of
    being perturbed.
    """
    from iclft import numerics as nx
    from iclft.model import ModelConfig, init_params, nll_from_targets
    from refmodel import fd_gradients

    cfg = ModelConfig(d_model=d_model, n_layers=1, n_heads=n_heads, d_ff=d_ff, max_seq_len=T + 4)
    params = init_params(cfg, seed)
    rng = np.random.default_rng([seed, 1])
    # perturb away from the init so gains and position rows are generic
    for t in params.tensors.values():
        t.data = t.data + rng.normal(0, 0.05, t.shape)
    toks = rng.integers(0, cfg.vocab_size, T + 1)
    mask = rng.integers(0, 2, T)
    mask[-1] = 1
    inputs, targets = toks[:-1], toks[1:]
    params.zero_grad()
    nx.backward(nll_from_targets(params, inputs, targets, mask))
    used_tok = np.unique(inputs)
    d = cfg.d_model
    entries = {
        "tok_emb": (used_tok[:, None] * d + np.arange(d)).reshape(-1),
        "pos_emb": np.arange(T * d),
    }
    fd = fd_gradients(params.arrays(), inputs, targets, mask, 1, n_heads, entries=entries)
    errs, unused_zero = {}, True
    for name, g in fd.items():
        a = params[name].grad
        sel = ~np.isnan(g)
        errs[name] = rel_err(a[sel], g[sel])
        unused_zero &= bool(np.all(a[~sel] == 0.0))
    return errs, unused_zero
