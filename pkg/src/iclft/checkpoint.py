"""Single-file binary checkpoints.

Layout (all integers little-endian)::

    offset 0   8 bytes   magic b"ICLFTCKP"
    offset 8   uint32    format version (currently 1)
    offset 12  uint64    header length H in bytes
    offset 20  H bytes   UTF-8 JSON header
    offset 20+H          tensor data: float64 little-endian, row-major,
                         concatenated in header order

The header holds ``config`` (ModelConfig fields), ``lora`` (LoRAConfig
fields or null), ``meta`` (free-form JSON, e.g. training step and optimizer
state descriptor) and ``tensors``: a list of
``{"name", "shape", "offset", "trainable"}`` records where ``offset`` counts
bytes from the start of the data section.  Names starting with ``optim/``
carry optimizer accumulators rather than model parameters.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .model import LoRAConfig, ModelConfig, Parameters
from .numerics import Tensor

MAGIC = b"ICLFTCKP"
VERSION = 1
OPTIM_PREFIX = "optim/"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: Parameters, meta: dict | None = None, extra: dict | None = None) -> None:
    """Write ``params`` (plus optional ``extra`` arrays) atomically to ``path``."""
    records, blobs, offset = [], [], 0
    items = [(n, t.data, t.requires_grad) for n, t in params.tensors.items()]
    items += [(OPTIM_PREFIX + n, np.asarray(a, dtype=np.float64), False) for n, a in (extra or {}).items()]
    for name, arr, trainable in items:
        blob = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        records.append({"name": name, "shape": list(arr.shape), "offset": offset, "trainable": trainable})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "config": asdict(params.config),
        "lora": None if params.lora is None else {**asdict(params.lora), "targets": list(params.lora.targets)},
        "meta": meta or {},
        "tensors": records,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(hbytes)))
        f.write(hbytes)
        for b in blobs:
            f.write(b)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[Parameters, dict, dict[str, np.ndarray]]:
    """Return (parameters, meta, extra arrays) from a checkpoint file."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    header = json.loads(raw[20 : 20 + hlen].decode("utf-8"))
    base = 20 + hlen
    config = ModelConfig(**header["config"])
    lora = None
    if header["lora"] is not None:
        lc = header["lora"]
        lora = LoRAConfig(rank=lc["rank"], targets=tuple(lc["targets"]), alpha=lc["alpha"])
    tensors, extra = {}, {}
    for rec in header["tensors"]:
        n = int(np.prod(rec["shape"])) if rec["shape"] else 1
        start = base + rec["offset"]
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=start).astype(np.float64).reshape(rec["shape"])
        if rec["name"].startswith(OPTIM_PREFIX):
            extra[rec["name"][len(OPTIM_PREFIX):]] = arr
        else:
            tensors[rec["name"]] = Tensor(arr, requires_grad=rec["trainable"])
    return Parameters(config, tensors, lora), header["meta"], extra
