"""Meta-pretraining of the base model on the synthetic task family."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .. import numerics as nx
from .. import optim
from ..checkpoint import load_checkpoint, save_checkpoint
from ..model import batch_nll, init_params
from ..tasks import meta_pretrain_item
from .config import PretrainConfig

log = logging.getLogger(__name__)

BASE_NAME = "base.ckpt"
LAST_NAME = "last.ckpt"
CURVE_NAME = "pretrain_loss.csv"


class PretrainDiverged(RuntimeError):
    pass


def _lr_at(cfg: PretrainConfig, step: int) -> float:
    if cfg.warmup and step <= cfg.warmup:
        return cfg.lr * step / cfg.warmup
    return cfg.lr


def _save(path, params, state, step, cfg, wall):
    meta = {
        "step": step,
        "wall_seconds": wall,
        "optimizer": state.kind,
        "optimizer_step": state.step,
        "pretrain": {"steps": cfg.steps, "batch_size": cfg.batch_size, "lr": cfg.lr,
                     "stream_seed": cfg.stream_seed, "init_seed": cfg.init_seed,
                     "family": repr(cfg.family)},
    }
    save_checkpoint(path, params, meta, state.to_arrays())


def meta_pretrain(cfg: PretrainConfig, steps: int | None = None, resume: bool = True, progress=None) -> Path:
    """Train from ``init_params`` on the meta stream for ``steps`` optimizer
    steps (default ``cfg.steps``).  Writes ``last.ckpt`` every
    ``checkpoint_every`` steps and ``base.ckpt`` at the end, and appends the
    per-step loss to ``pretrain_loss.csv``.  With ``resume`` an existing
    ``last.ckpt`` is continued; because item j of the stream depends only on
    (stream_seed, j) the continuation replays exactly."""
    steps = cfg.steps if steps is None else steps
    if steps < 1:
        raise ValueError("meta_pretrain needs steps >= 1")
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    last = out / LAST_NAME
    curve = out / CURVE_NAME
    if resume and last.exists():
        params, meta, extra = load_checkpoint(last)
        state = optim.OptimizerState.from_arrays(meta["optimizer"], meta["optimizer_step"], extra)
        start = int(meta["step"])
        wall0 = float(meta.get("wall_seconds", 0.0))
        log.info("resuming pretraining at step %d", start)
        _truncate_curve(curve, start)
    else:
        params = init_params(cfg.model, cfg.init_seed)
        state = optim.new_state(cfg.optimizer)
        start = 0
        wall0 = 0.0
        with open(curve, "w", newline="") as f:
            csv.writer(f, lineterminator="\n").writerow(["step", "loss", "lr"])
    reserved = cfg.family.reserved_maps()
    B = cfg.batch_size
    t0 = time.perf_counter()
    with open(curve, "a", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        for step in range(start + 1, steps + 1):
            batch = [meta_pretrain_item(cfg.family, cfg.stream_seed, (step - 1) * B + b, reserved)[0] for b in range(B)]
            params.zero_grad()
            loss = batch_nll(params, batch)
            value = loss.item()
            if not math.isfinite(value):
                raise PretrainDiverged(f"non-finite loss at step {step}; last good checkpoint kept at {last}")
            nx.backward(loss)
            lr = _lr_at(cfg, step)
            try:
                optim.apply_gradients(params, lr, state)
            except optim.OptimizerAbort as e:
                raise PretrainDiverged(f"{e}; last good checkpoint kept at {last}") from None
            writer.writerow([step, repr(value), repr(lr)])
            if progress is not None:
                progress(step, value)
            if step % cfg.checkpoint_every == 0 or step == steps:
                f.flush()
                _save(last, params, state, step, cfg, wall0 + time.perf_counter() - t0)
    params.zero_grad()
    base = out / BASE_NAME
    _save(base, params, state, steps, cfg, wall0 + time.perf_counter() - t0)
    return base


def _truncate_curve(curve: Path, upto: int) -> None:
    if not curve.exists():
        with open(curve, "w", newline="") as f:
            csv.writer(f, lineterminator="\n").writerow(["step", "loss", "lr"])
        return
    lines = curve.read_text().splitlines()
    kept = [lines[0]] + [ln for ln in lines[1:] if int(ln.split(",")[0]) <= upto]
    curve.write_text("\n".join(kept) + "\n")


def read_loss_curve(path) -> np.ndarray:
    with open(path) as f:
        rows = list(csv.DictReader(f))
    return np.array([[int(r["step"]), float(r["loss"])] for r in rows])


def model_summary(cfg: PretrainConfig) -> dict:
    return asdict(cfg.model)
