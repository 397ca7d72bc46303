"""INI run configuration: one section per stage, keys named after dataclass fields."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .model import SuperNetConfig
from .train import TrainConfig


@dataclass
class DataConfig:
    corpus: str = "data/kjv_excerpt.txt"
    val_fraction: float = 0.1
    eval_windows: int = 256          # validation windows used for eval / RPD (0 = all)


@dataclass
class SortConfig:
    scheme: str = "mean-mean"
    block_scheme: str = "cosine"
    calib_samples: int = 400
    rpd_samples: int = 50
    seed: int = 0


@dataclass
class GridConfig:
    bins: int = 22
    per_bin: int = 5
    max_trials: int = 10000
    seed: int = 0
    variant: str = "joint"


@dataclass
class PretrainConfig:
    epochs: int = 0
    lr: float = 1e-3
    final_lr: float = 1e-4
    steps_per_epoch: int = 0


@dataclass
class EvalConfig:
    latency_reps: int = 10
    latency_warmup: int = 2
    latency_seq_len: int = 64
    batch_size: int = 32


@dataclass
class RunConfig:
    supernet: SuperNetConfig = field(default_factory=SuperNetConfig)
    data: DataConfig = field(default_factory=DataConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    sort: SortConfig = field(default_factory=SortConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0


SECTIONS = {"supernet": SuperNetConfig, "data": DataConfig, "pretrain": PretrainConfig,
            "sort": SortConfig, "grid": GridConfig, "train": TrainConfig, "eval": EvalConfig}


def _coerce(cls, section, raw):
    types = {f.name: type(f.default) for f in fields(cls)}
    out = {}
    for key, value in raw.items():
        if key not in types:
            raise ConfigError(f"[{section}] has unknown key {key!r}")
        kind = types[key]
        try:
            if kind is bool:
                low = value.strip().lower()
                if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                    raise ValueError(value)
                out[key] = low in ("1", "true", "yes", "on")
            else:
                out[key] = kind(value)
        except ValueError as e:
            raise ConfigError(f"[{section}] {key} = {value!r} is not a valid {kind.__name__}") from e
    return cls(**out)


def load_config(path=None):
    """Read an INI file (missing sections and keys keep their defaults)."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    if path is not None:
        if not Path(path).exists():
            raise ConfigError(f"config file {path} not found")
        parser.read(path, encoding="utf-8")
    unknown = set(parser.sections()) - set(SECTIONS) - {"run"}
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    parts = {name: _coerce(cls, name, dict(parser[name]) if parser.has_section(name) else {})
             for name, cls in SECTIONS.items()}
    seed = int(parser.get("run", "seed", fallback="0"))
    cfg = RunConfig(**parts, seed=seed)
    if not 0 < cfg.data.val_fraction < 1:
        raise ConfigError("val_fraction must lie in (0, 1)")
    cfg.supernet.validate()
    cfg.train.validate()
    return cfg
