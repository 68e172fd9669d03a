"""Run configuration: defaults, key=value files, and CLI overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError, IoError


@dataclass
class TrainConfig:
    image_size: int = 64
    working_resolution: int = 7
    groups_per_step: int = 2
    images_per_group: int = 4
    positive_layers: tuple = (3, 4, 5)
    negative_layers: tuple = (3, 4, 5)
    tau: float = 0.07
    lambda1: float = 1.0
    lambda2: float = 1.0
    lr: float = 1e-4
    epochs: int = 30
    steps_per_epoch: int = 40
    seed: int = 0
    dice_factor_two: bool = False
    igp_softmax_before_mean: bool = False
    resize_mode: str = "bilinear"
    use_clm: bool = True
    feature_dim: int = 64
    encoder_channels: tuple = (16, 32, 64, 64, 64)
    categories: int = 12
    train_groups: int = 8
    val_groups: int = 4

    def __post_init__(self):
        if self.groups_per_step < 2:
            raise ConfigError(f"groups_per_step must be at least 2, got {self.groups_per_step}")
        if self.images_per_group < 1:
            raise ConfigError(f"images_per_group must be at least 1, got {self.images_per_group}")
        if self.working_resolution < 2:
            raise ConfigError(f"working_resolution must be at least 2, got {self.working_resolution}")
        if self.image_size % 16 != 0:
            raise ConfigError(f"image_size {self.image_size} is not a multiple of 16")
        if not self.positive_layers or not set(self.positive_layers) <= {1, 2, 3, 4, 5}:
            raise ConfigError(f"positive_layers {self.positive_layers} must be a nonempty subset of 1..5")
        if not self.negative_layers or not set(self.negative_layers) <= {3, 4, 5}:
            raise ConfigError(f"negative_layers {self.negative_layers} must be a nonempty subset of 3..5")
        if self.tau <= 0 or self.lr <= 0:
            raise ConfigError("tau and lr must be positive")
        if self.epochs < 1 or self.steps_per_epoch < 1:
            raise ConfigError("epochs and steps_per_epoch must be at least 1")
        if self.feature_dim < 2 or self.feature_dim % 2 != 0:
            raise ConfigError(f"feature_dim {self.feature_dim} must be an even number >= 2")
        if len(self.encoder_channels) != 5:
            raise ConfigError(f"encoder_channels needs 5 entries, got {len(self.encoder_channels)}")
        if self.resize_mode not in ("bilinear", "area"):
            raise ConfigError(f"unknown resize_mode {self.resize_mode!r}")
        if self.train_groups < self.groups_per_step:
            raise ConfigError(
                f"need at least {self.groups_per_step} train groups to sample distinct categories"
            )
        self.positive_layers = tuple(sorted(set(self.positive_layers)))
        self.negative_layers = tuple(sorted(set(self.negative_layers)))
        self.encoder_channels = tuple(self.encoder_channels)

    def echo_lines(self) -> list:
        """One deterministic key=value line per field, for the run log."""
        return [f"{f.name}={_format(getattr(self, f.name))}" for f in dataclasses.fields(self)]


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _parse_value(name: str, raw: str, kind):
    raw = raw.strip()
    try:
        if kind is bool:
            lowered = raw.lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is tuple:
            return tuple(int(part) for part in raw.split(",") if part.strip())
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc


def _field_types() -> dict:
    return {f.name: type(f.default) for f in dataclasses.fields(TrainConfig)}


def read_config_file(path) -> dict:
    """key=value lines with # comments -> raw string mapping."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read config {path}: {exc}") from exc
    raw = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        raw[key.strip()] = value.strip()
    return raw


def build_config(file_path=None, overrides: dict | None = None) -> TrainConfig:
    """Defaults, then the config file, then CLI overrides, then validate."""
    kinds = _field_types()
    values = {}
    merged = dict(read_config_file(file_path)) if file_path else {}
    merged.update(overrides or {})
    for name, raw in merged.items():
        if name not in kinds:
            raise ConfigError(f"unknown config key {name!r}")
        if isinstance(raw, str):
            values[name] = _parse_value(name, raw, kinds[name])
        else:
            values[name] = raw
    return TrainConfig(**values)
