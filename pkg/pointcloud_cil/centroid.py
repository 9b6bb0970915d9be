"""Adaptive-geometric centroid construction.

``L`` structural centroids are seeded by farthest point sampling and given
their ``k`` nearest neighbors. Each centroid then moves by the mean of its
edge vectors ``(p_hat - p_i)``, each weighted by a learned scalar ``T_p``
of the feature difference ``(f_hat - f_i)``; the neighborhood is searched
again around the moved centroid and its feature is re-gathered as
``max_i T_g(f_i)``.

Neighbor selection is a discrete choice and carries no gradient. Gradients
reach the offset weights through the edge vectors of the moved centroid,
which ``T_g`` consumes next to the neighbor features when
``relative_positions`` is on.
"""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from . import nncore
from .errors import ConfigError, DimensionError, NeighborhoodError, NumericError
from .geometry import PointCloud, coords, farthest_point_sampling, knn_many
from .nncore import Tensor

Array = np.ndarray


@dataclass(frozen=True)
class CentroidConfig:
    structures: int = 64
    neighbors: int = 16
    refine_iters: int = 1
    relative_positions: bool = True

    def __post_init__(self) -> None:
        if self.structures < 1 or self.neighbors < 1:
            raise ConfigError("structure count and neighborhood size must be positive")
        if self.refine_iters < 0:
            raise ConfigError(f"refine_iters must be >= 0, got {self.refine_iters}")


@dataclass(frozen=True)
class LocalStructure:
    centroid_pos: Tensor
    neighbor_idx: Array
    centroid_feat: Tensor


@dataclass(frozen=True)
class StructureSet:
    """All ``L`` structures of one cloud: positions ``[L, 3]``, neighbors
    ``[L, k]`` and features ``[L, d]``, ordered by structure index."""

    positions: Tensor
    neighbor_idx: Array
    features: Tensor

    def __len__(self) -> int:
        return self.neighbor_idx.shape[0]

    def __getitem__(self, l: int) -> LocalStructure:
        return LocalStructure(
            centroid_pos=nncore.take_rows(self.positions, np.intp(l)),
            neighbor_idx=self.neighbor_idx[l],
            centroid_feat=nncore.take_rows(self.features, np.intp(l)),
        )


def init_centroid_params(
    params: nncore.ParamSet, cfg: CentroidConfig, feature_dim: int, rng: np.random.Generator
) -> None:
    params.add_linear("centroid.offset", feature_dim, 1, rng)
    gather_in = feature_dim + 3 if cfg.relative_positions else feature_dim
    params.add_linear("centroid.gather", gather_in, feature_dim, rng)


def edge_vectors(points: Array, positions: Tensor, neighbor_idx: Array) -> Tensor:
    """``[L, k, 3]`` vectors from each neighbor to its centroid."""
    count = neighbor_idx.shape[0]
    return nncore.reshape(positions, (count, 1, 3)) - Tensor(points[neighbor_idx])


def gather_feature(
    neighbor_feats: Tensor, params: Mapping[str, Tensor], edges: Tensor | None = None
) -> Tensor:
    """``max_i relu(T_g(f_i))`` over the neighbor axis (second to last)."""
    if neighbor_feats.ndim < 2 or neighbor_feats.shape[-2] == 0:
        raise NeighborhoodError("gather_feature needs at least one neighbor")
    x = neighbor_feats if edges is None else nncore.concat([neighbor_feats, edges], axis=-1)
    h = nncore.relu(nncore.linear(x, params["centroid.gather.W"], params["centroid.gather.b"]))
    return nncore.max_reduce(h, axis=-2)


def _gather(
    points: Array,
    positions: Tensor,
    neighbor_idx: Array,
    features: Tensor,
    params: Mapping[str, Tensor],
    cfg: CentroidConfig,
) -> Tensor:
    neighbor_feats = nncore.take_rows(features, neighbor_idx)
    edges = edge_vectors(points, positions, neighbor_idx) if cfg.relative_positions else None
    return gather_feature(neighbor_feats, params, edges)


def init_structures(
    cloud: PointCloud | Array, features: Tensor, cfg: CentroidConfig, params: Mapping[str, Tensor]
) -> StructureSet:
    points = coords(cloud)
    if features.ndim != 2 or features.shape[0] != points.shape[0]:
        raise DimensionError(f"features {features.shape} not row-aligned with {points.shape[0]} points")
    if cfg.neighbors >= points.shape[0] and points.shape[0] > 1:
        raise NeighborhoodError(f"neighborhood size {cfg.neighbors} must be below {points.shape[0]} points")
    centers = farthest_point_sampling(points, cfg.structures)
    positions = Tensor(points[centers])
    neighbor_idx = knn_many(points, points[centers], cfg.neighbors)
    feats = _gather(points, positions, neighbor_idx, features, params, cfg)
    return StructureSet(positions, neighbor_idx, feats)


def predict_offset(
    structures: StructureSet, cloud: PointCloud | Array, features: Tensor, params: Mapping[str, Tensor]
) -> Tensor:
    """``[L, 3]`` offsets ``(1/k) sum_i T_p(f_hat - f_i) * (p_hat - p_i)``."""
    points = coords(cloud)
    idx = structures.neighbor_idx
    count, k = idx.shape
    neighbor_feats = nncore.take_rows(features, idx)
    diff = nncore.reshape(structures.features, (count, 1, features.shape[-1])) - neighbor_feats
    if not np.all(np.isfinite(diff.data)):
        raise NumericError("non-finite feature in offset prediction")
    weights = nncore.linear(diff, params["centroid.offset.W"], params["centroid.offset.b"])
    edges = edge_vectors(points, structures.positions, idx)
    return nncore.mean(weights * edges, axis=1)


def update_structure(
    structures: StructureSet,
    delta: Tensor,
    cloud: PointCloud | Array,
    features: Tensor,
    params: Mapping[str, Tensor],
    cfg: CentroidConfig,
    neighbor_idx: Array | None = None,
) -> StructureSet:
    """Move every centroid by ``delta`` and rebuild its neighborhood and feature.

    ``neighbor_idx`` pins the neighbor choice instead of searching again
    (used to differentiate with the selection held fixed).
    """
    if not np.all(np.isfinite(delta.data)):
        raise NumericError("non-finite centroid offset")
    points = coords(cloud)
    positions = structures.positions + delta
    if neighbor_idx is None:
        neighbor_idx = knn_many(points, positions.data, cfg.neighbors)
    feats = _gather(points, positions, neighbor_idx, features, params, cfg)
    return StructureSet(positions, np.asarray(neighbor_idx, dtype=np.intp), feats)


def build_structures(
    cloud: PointCloud | Array,
    features: Tensor,
    cfg: CentroidConfig,
    params: Mapping[str, Tensor],
    adaptive: bool = True,
    frozen: Sequence[Array] | None = None,
) -> tuple[StructureSet, list[Array]]:
    """Initialize structures and apply ``refine_iters`` offset updates.

    Returns the final structures and the neighbor indices chosen by each
    update, which can be passed back as ``frozen``.
    """
    structures = init_structures(cloud, features, cfg, params)
    history: list[Array] = []
    if not adaptive:
        return structures, history
    for step in range(cfg.refine_iters):
        delta = predict_offset(structures, cloud, features, params)
        pinned = None if frozen is None else frozen[step]
        structures = update_structure(structures, delta, cloud, features, params, cfg, pinned)
        history.append(structures.neighbor_idx)
    return structures, history


def assemble(structures: StructureSet | Sequence[LocalStructure]) -> Tensor:
    """``[L, d]`` matrix ``f_g`` whose row ``l`` is the feature of structure ``l``."""
    if isinstance(structures, StructureSet):
        return structures.features
    return nncore.stack([s.centroid_feat for s in structures], axis=0)
