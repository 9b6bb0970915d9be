"""Per-point feature extractor E (a PointNet-style shared MLP without T-nets)."""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np

from . import nncore
from .errors import ConfigError, PreconditionError
from .geometry import PointCloud, coords
from .nncore import Tensor

NORM_TOLERANCE = 1e-3


@dataclass(frozen=True)
class EncoderConfig:
    """Block widths starting at the 3 input coordinates; ``tap`` is the 1-based
    block whose output feeds the local structures."""

    widths: tuple[int, ...] = (3, 32, 64, 64)
    tap: int = 3

    def __post_init__(self) -> None:
        if len(self.widths) < 2 or self.widths[0] != 3:
            raise ConfigError(f"encoder widths must start at 3, got {self.widths}")
        if any(w < 1 for w in self.widths):
            raise ConfigError(f"encoder widths must be positive, got {self.widths}")
        if not 1 <= self.tap < len(self.widths):
            raise ConfigError(f"feature tap {self.tap} outside blocks 1..{len(self.widths) - 1}")

    @property
    def feature_dim(self) -> int:
        return self.widths[self.tap]


def init_encoder(params: nncore.ParamSet, cfg: EncoderConfig, rng: np.random.Generator) -> None:
    # Blocks past the tap never reach the classifier, so they are not created.
    for block in range(cfg.tap):
        params.add_linear(f"encoder.{block}", cfg.widths[block], cfg.widths[block + 1], rng)


def encode(cloud: PointCloud | np.ndarray, params: Mapping[str, Tensor], cfg: EncoderConfig) -> Tensor:
    """Row ``i`` of the result is the tapped feature of point ``i``."""
    points = coords(cloud)
    largest = np.sqrt((points**2).sum(axis=1)).max() if points.size else 0.0
    if largest > 1.0 + NORM_TOLERANCE:
        raise PreconditionError(f"encoder expects a normalized cloud, max norm is {largest:.6f}")
    h = Tensor(points)
    for block in range(cfg.tap):
        h = nncore.relu(nncore.linear(h, params[f"encoder.{block}.W"], params[f"encoder.{block}.b"]))
    return h
