"""Run configuration: flat ``key = value`` files with command-line overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ValidationError
from .model import ArchSpec
from .training import TrainConfig

TINY_DIVISOR = 4  # --tiny: channel tables / 4, small enough for CPU smoke runs, large enough to fit 8 images


class ConfigError(ValidationError):
    """Bad config file, unknown key or unparsable value."""


@dataclass
class RunConfig:
    manifest: str | None = None
    out: str = "runs/estan"
    checkpoint: str | None = None
    fold: int = 0  # -1 trains on every record
    folds: int = 5
    seed: int = 0
    learning_rate: float = 1e-4
    batch_size: int = 4
    epochs: int = 50
    input_hw: int = 256
    shift_augment: bool = False
    max_shift_fraction: float = 0.1
    checkpoint_every: int = 0
    per_image_dice: bool = False
    tiny: bool = False
    width_divisor: int = 1
    threshold: float = 0.5

    def __post_init__(self):
        if self.width_divisor < 1:
            raise ConfigError(f"width_divisor must be >= 1, got {self.width_divisor}")
        if self.fold < -1 or self.fold >= self.folds:
            raise ConfigError(f"fold {self.fold} outside [-1, {self.folds})")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError(f"threshold must be in [0, 1], got {self.threshold}")

    def arch(self) -> ArchSpec:
        divisor = TINY_DIVISOR if self.tiny else self.width_divisor
        try:
            return ArchSpec.scaled(divisor, self.input_hw) if divisor > 1 else ArchSpec(input_hw=self.input_hw)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(
                learning_rate=self.learning_rate,
                batch_size=self.batch_size,
                max_epochs=self.epochs,
                seed=self.seed,
                shift_augment=self.shift_augment,
                max_shift_fraction=self.max_shift_fraction,
                input_hw=self.input_hw,
                checkpoint_every=self.checkpoint_every,
                per_image_dice=self.per_image_dice,
            )
        except ValidationError as exc:
            raise ConfigError(str(exc)) from exc

    def updated(self, **overrides) -> "RunConfig":
        """Copy with the non-None ``overrides`` applied (command-line flags win)."""
        return dataclasses.replace(self, **{k: v for k, v in overrides.items() if v is not None})

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            lines.append(f"{f.name} = {_format(v)}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_text())


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r} (expected {kind})") from None
    return raw


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Key -> typed value. ``#`` starts a comment; unknown keys are errors."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, raw)
    return values


def load_config(path=None, **overrides) -> RunConfig:
    values = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        values = parse_config_text(text, str(path))
    return RunConfig(**values).updated(**overrides)
