"""Geometric-aware attention: residual per-structure channel gating, then max pooling."""

from __future__ import annotations

import csv
import os
from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np

from . import nncore
from .errors import ConfigError, DimensionError
from .nncore import Tensor


@dataclass(frozen=True)
class AttentionConfig:
    channels: int = 64
    reduction: int = 4

    def __post_init__(self) -> None:
        if self.reduction < 1 or self.channels % self.reduction or self.channels // self.reduction < 1:
            raise ConfigError(f"{self.channels} channels are not divisible by reduction {self.reduction}")

    @property
    def bottleneck(self) -> int:
        return self.channels // self.reduction


def init_attention(params: nncore.ParamSet, cfg: AttentionConfig, rng: np.random.Generator) -> None:
    params.add_linear("attention.down", cfg.channels, cfg.bottleneck, rng)
    params.add_linear("attention.up", cfg.bottleneck, cfg.channels, rng)


def attend(f_g: Tensor, params: Mapping[str, Tensor]) -> tuple[Tensor, Tensor]:
    """Return ``(f_p, A_g)`` with ``A_g = sigmoid(T_u(relu(T_d(f_g))))`` and
    ``f_p = A_g * f_g + f_g`` (evaluated as ``(1 + A_g) * f_g``), row by row."""
    down = params["attention.down.W"]
    if f_g.ndim < 2 or f_g.shape[-1] != down.shape[0]:
        raise DimensionError(f"attention expects [..., L, {down.shape[0]}] features, got {f_g.shape}")
    squeezed = nncore.relu(nncore.linear(f_g, down, params["attention.down.b"]))
    gate = nncore.sigmoid(nncore.linear(squeezed, params["attention.up.W"], params["attention.up.b"]))
    return (gate + 1.0) * f_g, gate


def global_pool(f_p: Tensor) -> Tensor:
    """Elementwise max over the structure axis: ``[..., L, d] -> [..., d]``."""
    if f_p.ndim < 2:
        raise DimensionError(f"global_pool expects [..., L, d], got {f_p.shape}")
    return nncore.max_reduce(f_p, axis=-2)


def export_attention_csv(gate: np.ndarray, path: str | os.PathLike) -> None:
    """Write an ``[L, d]`` attention map as CSV, one row per structure."""
    gate = np.asarray(gate)
    if gate.ndim != 2:
        raise DimensionError(f"attention map must be [L, d], got {gate.shape}")
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["structure"] + [f"c{j}" for j in range(gate.shape[1])])
        for l, row in enumerate(gate):
            writer.writerow([l] + [repr(float(v)) for v in row])
