"""Configuration dataclasses and the flat ``key = value`` file format.

A config file has one section per module::

    [model]
    bank_size = 32

    [train]
    lr = 5e-4
    scenes = data/a, data/b

Command-line overrides use dotted paths (``train.lr=1e-3``). Tuples are
written comma-separated.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    encoder_channels: tuple = (8, 16, 16, 32, 32, 64)
    encoder_strides: tuple = (1, 2, 1, 2, 1, 2)
    encoder_kernel: int = 3
    bank_size: int = 32
    agg_window: int = 4
    agg_depth: int = 1
    decoder_hidden: tuple = (128, 128)
    color_bias_init: float = -2.5
    density_bias_init: float = 0.2
    seed: int = 0

    @property
    def descriptor_dim(self) -> int:
        return 3 + sum(self.encoder_channels)

    def validate(self) -> None:
        if len(self.encoder_channels) != len(self.encoder_strides):
            raise ConfigError("model.encoder_channels and model.encoder_strides differ in length")
        if self.bank_size < 1 or self.agg_window < 1 or self.agg_depth < 1:
            raise ConfigError("model.bank_size, agg_window and agg_depth must be >= 1")


@dataclass
class RenderConfig:
    n_bins: int = 64
    batch_size: int = 1024


@dataclass
class TrainConfig:
    scenes: tuple = ()
    rays_per_batch: int = 512
    n_bins: int = 64
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_steps: int = 2000
    max_seconds: float = 0.0
    val_every: int = 250
    patience: int = 0
    density_noise_std: float = 0.0
    seed: int = 0
    checkpoint_every: int = 0

    def validate(self) -> None:
        if self.rays_per_batch < 1:
            raise ConfigError("train.rays_per_batch must be >= 1")
        if self.max_steps < 0 or self.max_seconds < 0:
            raise ConfigError("train budgets must be non-negative")


@dataclass
class FinetuneConfig:
    steps: int = 100
    seconds: float = 0.0
    lr: float = 5e-4
    rays_per_batch: int = 512
    n_bins: int = 64
    seed: int = 0


@dataclass
class MeshConfig:
    resolution: int = 64
    threshold: Optional[float] = None
    threshold_ratio: float = 0.5
    bbox: tuple = ()
    batch_size: int = 4096


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    mesh: MeshConfig = field(default_factory=MeshConfig)

    SECTIONS = ("model", "render", "train", "finetune", "mesh")

    def set(self, dotted: str, value) -> None:
        try:
            section, key = dotted.split(".", 1)
        except ValueError:
            raise ConfigError(f"override {dotted!r} must be section.key") from None
        if section not in self.SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        obj = getattr(self, section)
        names = {f.name: f for f in fields(obj)}
        if key not in names:
            raise ConfigError(f"unknown config key {dotted!r}")
        setattr(obj, key, _coerce(getattr(obj, key), names[key], value, dotted))

    def to_dict(self) -> dict:
        return {s: dataclasses.asdict(getattr(self, s)) for s in self.SECTIONS}

    @classmethod
    def from_dict(cls, data: dict) -> "Config":
        cfg = cls()
        for section, values in data.items():
            for key, value in values.items():
                cfg.set(f"{section}.{key}", value)
        return cfg

    def dumps(self) -> str:
        parser = configparser.ConfigParser()
        for section, values in self.to_dict().items():
            parser[section] = {k: _format(v) for k, v in values.items()}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def validate(self) -> None:
        self.model.validate()
        self.train.validate()


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, (tuple, list)):
        return ", ".join(str(v) for v in value)
    return str(value)


_TUPLE_ITEM = {"scenes": str, "bbox": float}


def _coerce(current, f, value, dotted):
    if not isinstance(value, str):
        if isinstance(value, list):
            return tuple(value)
        return value
    text = value.strip()
    try:
        if f.type == "tuple":
            items = [s.strip() for s in text.split(",") if s.strip()]
            item_type = _TUPLE_ITEM.get(f.name, int)
            return tuple(item_type(s) for s in items)
        if f.type == "Optional[float]":
            return None if text.lower() in ("none", "") else float(text)
        if f.type == "bool":
            return text.lower() in ("1", "true", "yes", "on")
        if f.type == "int":
            return int(text)
        if f.type == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {dotted}: {value!r}") from None
    return text


def load_config(path=None, overrides=()) -> Config:
    cfg = Config()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser()
        try:
            parser.read_string(path.read_text())
        except configparser.Error as exc:
            raise ConfigError(f"unreadable config {path}: {exc}") from None
        for section in parser.sections():
            for key, value in parser[section].items():
                cfg.set(f"{section}.{key}", value)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        k, v = item.split("=", 1)
        cfg.set(k.strip(), v)
    cfg.validate()
    return cfg


def describe_keys() -> str:
    """Human readable list of every config key with its default."""
    lines = []
    cfg = Config()
    for section in Config.SECTIONS:
        for f in fields(getattr(cfg, section)):
            lines.append(f"  {section}.{f.name} = {_format(getattr(getattr(cfg, section), f.name))}")
    return "\n".join(lines)
