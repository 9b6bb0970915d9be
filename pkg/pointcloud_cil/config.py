"""Run configuration: a flat ``key = value`` text file with ``#`` comments.

Unknown keys and unparsable values are rejected with the offending line.
``RunConfig.to_text`` produces a file that loads back to an equal config, and
is echoed into every run directory.
"""

from __future__ import annotations

import dataclasses
import os
from collections.abc import Iterable
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

from .centroid import CentroidConfig
from .data import equal_schedule
from .encoder import EncoderConfig
from .errors import ConfigError, PointCloudCILError
from .model import ModelConfig
from .trainer import SELECTION_MODES, IncrementalSchedule, TrainHyper

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


@dataclass(frozen=True)
class RunConfig:
    dataset: str = "data/shapes"
    out: str = "runs/default"
    seed: int = 0
    # dataset generation
    num_classes: int = 10
    train_per_class: int = 80
    test_per_class: int = 20
    points: int = 256
    # schedule and memory
    states: int = 5
    exemplars: int = 60
    exemplar_selection: str = "herding"
    # architecture
    structures: int = 64
    neighbors: int = 16
    refine_iters: int = 1
    reduction: int = 4
    encoder_widths: tuple[int, ...] = (3, 32, 64, 64)
    feature_tap: int = 3
    hidden: tuple[int, ...] = (64, 64, 32)
    # optimisation
    epochs: int = 150
    batch_size: int = 32
    lr: float = 0.0025
    weight_decay: float = 0.0005
    augment: bool = True
    # ablations and baselines
    agc: bool = True
    gaa: bool = True
    sfc: bool = True
    joint: bool = False
    timing: bool = False

    def __post_init__(self) -> None:
        if self.exemplar_selection not in SELECTION_MODES:
            raise ConfigError(
                f"exemplar_selection must be one of {', '.join(SELECTION_MODES)}, got {self.exemplar_selection!r}"
            )
        for name in ("num_classes", "train_per_class", "test_per_class", "points", "states", "epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.exemplars < 0:
            raise ConfigError(f"exemplars must be >= 0, got {self.exemplars}")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("lr must be positive and weight_decay non-negative")
        if self.structures > self.points:
            raise ConfigError(f"structures ({self.structures}) cannot exceed points ({self.points})")
        if self.neighbors >= self.points:
            raise ConfigError(f"neighbors ({self.neighbors}) must be below points ({self.points})")

    def replace(self, **changes: Any) -> RunConfig:
        unknown = set(changes) - {f.name for f in fields(self)}
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return dataclasses.replace(self, **changes)

    def model_config(self) -> ModelConfig:
        try:
            return ModelConfig(
                encoder=EncoderConfig(self.encoder_widths, self.feature_tap),
                centroid=CentroidConfig(self.structures, self.neighbors, self.refine_iters),
                reduction=self.reduction,
                hidden=self.hidden,
                agc=self.agc,
                gaa=self.gaa,
            )
        except PointCloudCILError as e:
            raise ConfigError(f"invalid architecture: {e}") from e

    def hyper(self) -> TrainHyper:
        return TrainHyper(self.epochs, self.batch_size, self.lr, self.weight_decay, self.augment)

    def schedule(self, num_classes: int | None = None) -> IncrementalSchedule:
        classes = self.num_classes if num_classes is None else num_classes
        return IncrementalSchedule(tuple(equal_schedule(classes, self.states)), self.exemplars, self.seed)

    def to_text(self) -> str:
        lines = ["# pointcloud-cil effective run configuration"]
        for f in fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def write(self, path: str | os.PathLike) -> Path:
        Path(path).write_text(self.to_text(), encoding="utf-8")
        return Path(path)


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _field_types() -> dict[str, Any]:
    defaults = RunConfig()
    return {f.name: type(getattr(defaults, f.name)) for f in fields(RunConfig)}


def parse_value(key: str, raw: str) -> Any:
    kinds = _field_types()
    if key not in kinds:
        raise ConfigError(f"unknown config key {key!r}")
    kind, text = kinds[key], raw.strip()
    try:
        if kind is bool:
            lowered = text.lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if kind is tuple:
            return tuple(int(v) for v in text.split(",") if v.strip())
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {e}") from None
    return text


def parse_config(text: str, source: str = "<config>", base: RunConfig | None = None) -> RunConfig:
    values: dict[str, Any] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        content = line.split("#", 1)[0].strip()
        if not content:
            continue
        if "=" not in content:
            raise ConfigError(f"{source}:{number}: expected 'key = value', got {line.strip()!r}")
        key, raw = (part.strip() for part in content.split("=", 1))
        try:
            values[key] = parse_value(key, raw)
        except ConfigError as e:
            raise ConfigError(f"{source}:{number}: {e}") from None
    return (base or RunConfig()).replace(**values)


def load_config(path: str | os.PathLike | None = None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    return parse_config(text, str(path))


def apply_assignments(config: RunConfig, assignments: Iterable[str]) -> RunConfig:
    """Apply ``key=value`` strings (from ``--set``) on top of ``config``."""
    changes = {}
    for item in assignments:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = (part.strip() for part in item.split("=", 1))
        changes[key] = parse_value(key, raw)
    return config.replace(**changes)
