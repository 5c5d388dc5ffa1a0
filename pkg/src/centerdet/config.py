"""Run configuration: one dataclass per subsystem, loaded from a JSON file.

The JSON document mirrors the dataclass fields, e.g.:

    {
      "train":   {"lr_max": 0.001, "epochs": 12, ...},
      "pyramid": {"input_size": 128, "strides": [4, 8, 16, 32, 64, 128], ...},
      "assign":  {"eps_p": 0.75, "eps_n": 1.25, "lam": 2.5, ...},
      "loss":    {"beta": 0.45, "gamma": 2.0, "alpha_t": 0.25},
      "synth":   {"image_size": 128, "seed": 7, ...},
      "data":    {"train_count": 512, "val_count": 128}
    }

Missing sections or keys fall back to defaults; unknown keys are an error.
"lambda" is accepted as an alias for the assign key "lam".
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .assign import AssignConfig
from .data import SynthConfig
from .losses import LossConfig
from .pyramid import PyramidConfig


class ConfigError(ValueError):
    """A configuration file failed to parse or validate."""


@dataclass(frozen=True)
class TrainConfig:
    lr_max: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0005
    anneal_period: int = 20
    lr_min: float = 1e-5
    batch_size: int = 8
    epochs: int = 12
    seed: int = 7
    dtype: str = "float32"

    def __post_init__(self) -> None:
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if not self.lr_min < self.lr_max:
            raise ConfigError(f"lr_min {self.lr_min} must be < lr_max {self.lr_max}")
        if self.anneal_period < 1:
            raise ConfigError(f"anneal_period must be >= 1, got {self.anneal_period}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")


@dataclass(frozen=True)
class DataConfig:
    train_count: int = 512
    val_count: int = 128

    def __post_init__(self) -> None:
        if self.train_count < 1 or self.val_count < 0:
            raise ConfigError("train_count must be >= 1 and val_count >= 0")


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    pyramid: PyramidConfig = field(default_factory=PyramidConfig)
    assign: AssignConfig = field(default_factory=AssignConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    data: DataConfig = field(default_factory=DataConfig)


_SECTIONS = {
    "train": TrainConfig,
    "pyramid": PyramidConfig,
    "assign": AssignConfig,
    "loss": LossConfig,
    "synth": SynthConfig,
    "data": DataConfig,
}

_ALIASES = {"assign": {"lambda": "lam"}}

_TUPLE_KEYS = {"strides", "count_range", "radius_range"}


def _build_section(name: str, cls, values: dict):
    fields = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, val in values.items():
        key = _ALIASES.get(name, {}).get(key, key)
        if key not in fields:
            raise ConfigError(f"unknown key '{key}' in section '{name}' "
                              f"(known: {sorted(fields)})")
        if key in _TUPLE_KEYS and isinstance(val, list):
            val = tuple(val)
        kwargs[key] = val
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"section '{name}': {e}")


def run_config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError(f"config root must be an object, got {type(doc).__name__}")
    raw: dict[str, dict] = {}
    for name, values in doc.items():
        if name not in _SECTIONS:
            raise ConfigError(f"unknown config section '{name}' "
                              f"(known: {sorted(_SECTIONS)})")
        if not isinstance(values, dict):
            raise ConfigError(f"section '{name}' must be an object")
        raw[name] = dict(values)

    pyramid = _build_section("pyramid", PyramidConfig, raw.get("pyramid", {}))
    # these two follow the pyramid unless explicitly pinned
    assign_raw = raw.get("assign", {})
    assign_raw.setdefault("k", pyramid.k)
    synth_raw = raw.get("synth", {})
    synth_raw.setdefault("image_size", pyramid.input_size)

    cfg = RunConfig(
        train=_build_section("train", TrainConfig, raw.get("train", {})),
        pyramid=pyramid,
        assign=_build_section("assign", AssignConfig, assign_raw),
        loss=_build_section("loss", LossConfig, raw.get("loss", {})),
        synth=_build_section("synth", SynthConfig, synth_raw),
        data=_build_section("data", DataConfig, raw.get("data", {})),
    )
    if cfg.assign.k != cfg.pyramid.k:
        raise ConfigError(f"assign.k = {cfg.assign.k} must equal the pyramid "
                          f"level count {cfg.pyramid.k}")
    if cfg.synth.image_size != cfg.pyramid.input_size:
        raise ConfigError(f"synth.image_size {cfg.synth.image_size} must equal "
                          f"pyramid.input_size {cfg.pyramid.input_size}")
    return cfg


def load_run_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})")
    return run_config_from_dict(doc)


def run_config_to_dict(cfg: RunConfig) -> dict:
    return {name: dataclasses.asdict(getattr(cfg, name)) for name in _SECTIONS}
