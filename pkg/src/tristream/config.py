"""Layered run configuration.

Config files are JSON documents whose keys mirror the dataclass fields below;
unknown keys are rejected. Precedence: file values < TRISTREAM_SEED
environment variable < command-line flags. The effective config is echoed at
the start of every run so a run is fully determined by its log in
deterministic mode.

Schema (all keys optional, defaults shown by the dataclasses):
  seed: int                     deterministic: bool        workers: int
  model: {comp: {...}, struct: {...}, inter: {...}, head: {...},
          streams: [..], graph_cutoff: float, max_neighbors: int}
  augment: AugmentationConfig fields
  ssl_weights: SSLWeights fields
  pretrain: OptimizerConfig fields
  finetune: OptimizerConfig fields
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .compstream import CompStreamConfig
from .fusion import HeadConfig
from .interstream import InterStreamConfig
from .model import ModelConfig
from .ssl import AugmentationConfig, SSLWeights
from .structstream import StructStreamConfig
from .trainer import OptimizerConfig, finetune_optimizer_defaults


class ConfigError(ValueError):
    pass


def to_dict(obj):
    """Recursively convert a config dataclass to JSON-ready primitives."""
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_dict(v) for v in obj]
    return obj


def _from_dict(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object")
    field_map = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(field_map)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = _NESTED.get((cls, name))
        if sub is not None:
            kwargs[name] = _from_dict(sub, value, f"{path}.{name}")
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{path}: {err}") from err


_NESTED = {
    (ModelConfig, "comp"): CompStreamConfig,
    (ModelConfig, "struct"): StructStreamConfig,
    (ModelConfig, "inter"): InterStreamConfig,
    (ModelConfig, "head"): HeadConfig,
}


def model_config_from_dict(data: dict, path: str = "model") -> ModelConfig:
    return _from_dict(ModelConfig, data, path)


@dataclass
class RunConfig:
    """Everything a CLI run needs; defaults follow the reference tables."""

    seed: int = 0
    deterministic: bool = True
    workers: int = 1
    model: ModelConfig = field(default_factory=ModelConfig)
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)
    ssl_weights: SSLWeights = field(default_factory=SSLWeights)
    pretrain: OptimizerConfig = field(default_factory=OptimizerConfig)
    finetune: OptimizerConfig = field(default_factory=finetune_optimizer_defaults)


_NESTED.update({
    (RunConfig, "model"): ModelConfig,
    (RunConfig, "augment"): AugmentationConfig,
    (RunConfig, "ssl_weights"): SSLWeights,
    (RunConfig, "pretrain"): OptimizerConfig,
    (RunConfig, "finetune"): OptimizerConfig,
})


def load_run_config(path=None, seed_flag: int | None = None,
                    env: dict | None = None) -> RunConfig:
    """Layering: file < TRISTREAM_SEED env var < --seed flag."""
    env = os.environ if env is None else env
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as err:
            raise ConfigError(f"config file {path}: {err}") from err
    cfg = _from_dict(RunConfig, data, "config")
    if "TRISTREAM_SEED" in env:
        try:
            cfg.seed = int(env["TRISTREAM_SEED"])
        except ValueError as err:
            raise ConfigError(f"TRISTREAM_SEED: {err}") from err
    if seed_flag is not None:
        cfg.seed = seed_flag
    return cfg


def echo_config(cfg: RunConfig) -> str:
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True)
