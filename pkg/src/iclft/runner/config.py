"""Run configuration files (YAML).  Unknown keys are rejected so a typo in a
grid never silently falls back to a default."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from ..model import ModelConfig
from ..prompt import Template
from ..tasks import TaskFamily
from ..training import HPConfig

DEFAULT_LRS = (1e-4, 2e-4, 3e-4)
DEFAULT_EPOCHS = (1, 2, 5, 10, 15)


class ConfigError(ValueError):
    pass


@dataclass
class TaskSpec:
    kind: str = "heldout_keyed"  # heldout_keyed | keyed | prior | parity | file
    seed: int = 0
    n_examples: int = 400
    n_keys: int = 8
    n_classes: int = 4
    noise_len: int = 0
    n_bits: int = 8
    path: str | None = None
    variant: str = "none"  # none | flipped | permuted
    variant_seed: int = 0


@dataclass
class GridSpec:
    lr: list[float] = field(default_factory=lambda: list(DEFAULT_LRS))
    epochs: list[int] = field(default_factory=lambda: list(DEFAULT_EPOCHS))
    K: int = 4
    optimizer: str = "adafactor"
    adapter: str = "none"
    lora_rank: int = 16

    def configs(self, k: int) -> list[HPConfig]:
        return [
            HPConfig(lr=float(lr), epochs=int(e), K=k, optimizer=self.optimizer, adapter=self.adapter, lora_rank=self.lora_rank)
            for lr in self.lr
            for e in self.epochs
        ]


@dataclass
class TemplateSpec:
    separator: str = "\n== Next Example ==\n"
    query_suffix: str = ""
    instruction: str | None = None

    def build(self) -> Template:
        return Template(self.separator, self.query_suffix, self.instruction)


@dataclass
class RunConfig:
    task: TaskSpec = field(default_factory=TaskSpec)
    strategies: list[str] = field(default_factory=lambda: ["icl_only", "ft_only", "icl_ft"])
    grid: GridSpec = field(default_factory=GridSpec)
    training_mode: str = "prequential"
    selection_metric: str = "accuracy"
    budgets: list[int] = field(default_factory=lambda: [3, 5, 10, 30, 100, 150])
    n_test: int = 100
    n_seeds: int = 5
    seed_offset: int = 0
    k_eval: list[int] = field(default_factory=lambda: [1, 3, 5, 10, 15, 30, 100])
    resample_context: bool = True
    template: TemplateSpec = field(default_factory=TemplateSpec)
    base_checkpoint: str = "checkpoints/base.ckpt"
    output_dir: str = "runs/default"
    model_tag: str = "base"

    def validate(self) -> RunConfig:
        if list(self.budgets) != sorted(self.budgets) or any(b < 1 for b in self.budgets):
            raise ConfigError("budgets must be positive and sorted ascending")
        if self.n_seeds < 1:
            raise ConfigError("n_seeds must be >= 1")
        bad = set(self.strategies) - {"icl_only", "ft_only", "icl_ft"}
        if bad:
            raise ConfigError(f"unknown strategies {sorted(bad)}")
        if self.training_mode not in ("prequential", "iid"):
            raise ConfigError(f"training_mode must be prequential or iid, got {self.training_mode!r}")
        if self.selection_metric not in ("accuracy", "nll"):
            raise ConfigError("selection_metric must be accuracy or nll")
        if self.task.variant not in ("none", "flipped", "permuted"):
            raise ConfigError(f"unknown task variant {self.task.variant!r}")
        return self

    @property
    def seeds(self) -> list[int]:
        return [self.seed_offset + s for s in range(self.n_seeds)]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class PretrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    family: TaskFamily = field(default_factory=TaskFamily)
    steps: int = 6000
    batch_size: int = 16
    lr: float = 1e-3
    warmup: int = 200
    optimizer: str = "adam"
    checkpoint_every: int = 500
    init_seed: int = 0
    stream_seed: int = 0
    output_dir: str = "checkpoints"


def _build(cls, data, where: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        nested = _NESTED.get((cls, name))
        if nested is not None:
            value = _build(nested, value, f"{where}.{name}")
        elif (cls, name) in _TUPLES:
            value = _tuplify(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from None


def _tuplify(v):
    if isinstance(v, dict):
        return tuple((k, _tuplify(x)) for k, x in v.items())
    if isinstance(v, list):
        return tuple(_tuplify(x) for x in v)
    return v


_NESTED = {
    (RunConfig, "task"): TaskSpec,
    (RunConfig, "grid"): GridSpec,
    (RunConfig, "template"): TemplateSpec,
    (PretrainConfig, "model"): ModelConfig,
    (PretrainConfig, "family"): TaskFamily,
    (TaskFamily, "template"): Template,
}
_TUPLES = {
    (TaskFamily, k)
    for k in ("weights", "n_keys", "n_classes", "noise_len", "k_range", "parity_bits", "copy_len", "reserved_seeds")
}


def run_config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "run").validate()


def pretrain_config_from_dict(data: dict) -> PretrainConfig:
    return _build(PretrainConfig, data, "pretrain")


def load_yaml(path) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    data = yaml.safe_load(text) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def load_run_config(path) -> RunConfig:
    data = load_yaml(path)
    data.pop("pretrain", None)
    return run_config_from_dict(data.get("run", data))


def load_pretrain_config(path) -> PretrainConfig:
    data = load_yaml(path)
    return pretrain_config_from_dict(data.get("pretrain", data))
