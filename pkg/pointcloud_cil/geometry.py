"""Deterministic point-set kernels: normalization, farthest point sampling, kNN.

All distances are squared Euclidean; no square roots are taken, ordering is
unaffected. Every tie is broken deterministically so the selections are
reproducible and invariant (as sets of coordinates) under point permutation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    DimensionError,
    NeighborhoodError,
    NormalizationError,
    NumericError,
    SamplingError,
)

Array = np.ndarray


@dataclass(frozen=True, eq=False)
class PointCloud:
    """``U`` points in 3D plus a class label (``-1`` when unlabeled)."""

    points: Array
    label: int = -1

    def __post_init__(self) -> None:
        points = np.asarray(self.points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 3:
            raise DimensionError(f"point cloud must be U x 3, got {points.shape}")
        if not np.all(np.isfinite(points)):
            raise NumericError("point cloud has non-finite coordinates")
        object.__setattr__(self, "points", points)

    @property
    def size(self) -> int:
        return self.points.shape[0]


def coords(cloud: PointCloud | Array) -> Array:
    if isinstance(cloud, PointCloud):
        return cloud.points
    points = np.asarray(cloud, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise DimensionError(f"point cloud must be U x 3, got {points.shape}")
    return points


def normalize(cloud: PointCloud | Array) -> PointCloud | Array:
    """Center on the mean and scale so the largest point norm is 1."""
    points = coords(cloud)
    if points.shape[0] == 0:
        raise NormalizationError("cannot normalize an empty cloud")
    centered = points - points.mean(axis=0)
    radius = np.sqrt((centered**2).sum(axis=1)).max()
    if radius == 0.0:
        raise NormalizationError("cannot normalize a cloud whose points are all identical")
    out = centered / radius
    return PointCloud(out, cloud.label) if isinstance(cloud, PointCloud) else out


def squared_distances(points: Array, queries: Array) -> Array:
    """``[Q, U]`` squared distances from each query to each point."""
    diff = points[None, :, :] - queries[:, None, :]
    return (diff**2).sum(axis=-1)


def _pick_farthest(points: Array, scores: Array) -> int:
    """Index of the largest score; ties by lexicographic (x, y, z), then index."""
    candidates = np.flatnonzero(scores == scores.max())
    if candidates.size == 1:
        return int(candidates[0])
    tied = points[candidates]
    order = np.lexsort((candidates, tied[:, 2], tied[:, 1], tied[:, 0]))
    return int(candidates[order[0]])


def farthest_point_sampling(cloud: PointCloud | Array, count: int) -> Array:
    """Select ``count`` duplicate-free indices by farthest point sampling.

    The first index is the point farthest from the cloud mean; each next one
    maximizes the minimum distance to the points already chosen.
    """
    points = coords(cloud)
    n = points.shape[0]
    if not 1 <= count <= n:
        raise SamplingError(f"cannot sample {count} of {n} points")

    center = points.mean(axis=0, keepdims=True)
    first = _pick_farthest(points, squared_distances(points, center)[0])
    chosen = [first]
    nearest = squared_distances(points, points[first : first + 1])[0]
    for _ in range(count - 1):
        scores = nearest.copy()
        scores[chosen] = -1.0
        nxt = _pick_farthest(points, scores)
        chosen.append(nxt)
        nearest = np.minimum(nearest, squared_distances(points, points[nxt : nxt + 1])[0])
    return np.asarray(chosen, dtype=np.intp)


def knn_many(cloud: PointCloud | Array, queries: Array, k: int) -> Array:
    """``[Q, k]`` nearest point indices per query, sorted by (distance, index)."""
    points = coords(cloud)
    n = points.shape[0]
    if not 1 <= k <= n:
        raise NeighborhoodError(f"cannot take {k} neighbors from {n} points")
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    d2 = squared_distances(points, queries)
    return np.argsort(d2, axis=1, kind="stable")[:, :k]


def knn(cloud: PointCloud | Array, query: Array, k: int) -> Array:
    """The ``k`` point indices closest to ``query`` (which need not be a cloud point)."""
    return knn_many(cloud, np.asarray(query, dtype=np.float64).reshape(1, 3), k)[0]
