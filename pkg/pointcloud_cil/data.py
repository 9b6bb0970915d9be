"""Synthetic shape benchmark, ``pcd`` text files, augmentation and class-incremental splits.

Ten procedural surface classes stand in for CAD/scan benchmarks. Every
sample is drawn from its own seeded generator, so a dataset is fully
determined by ``(num_classes, counts, points, seed)``.

The ``pcd`` text format is a header line ``pcd <U> <label>`` followed by
``U`` lines of three decimals.
"""

from __future__ import annotations

import logging
import os
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CloudParseError, DatasetNotFoundError, GenerationError, ScheduleError
from .geometry import PointCloud, coords, normalize
from .store import read_json, write_json_atomic

logger = logging.getLogger(__name__)

Array = np.ndarray

MIN_POINTS = 64
DECIMALS = 9
MANIFEST = "manifest.json"
MANIFEST_FORMAT = "pcd-dataset"
MANIFEST_VERSION = 1

# Pre-normalization surface noise of generated samples.
SURFACE_NOISE = 0.005


# ---------------------------------------------------------------------------
# Shape primitives (surface samplers)
# ---------------------------------------------------------------------------


def _unit_vectors(rng: np.random.Generator, n: int) -> Array:
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _by_area(rng: np.random.Generator, n: int, areas: Sequence[float]) -> Array:
    """How many of ``n`` samples land on each patch, proportional to area."""
    weights = np.asarray(areas, dtype=np.float64)
    return rng.multinomial(n, weights / weights.sum())


def _disk(rng: np.random.Generator, n: int, radius: float, z: float) -> Array:
    r = radius * np.sqrt(rng.uniform(size=n))
    a = rng.uniform(0.0, 2.0 * np.pi, size=n)
    return np.column_stack([r * np.cos(a), r * np.sin(a), np.full(n, z)])


def _sphere(rng: np.random.Generator, n: int) -> Array:
    return _unit_vectors(rng, n)


def _ellipsoid(rng: np.random.Generator, n: int) -> Array:
    axes = np.array([1.0, rng.uniform(0.47, 0.53), rng.uniform(0.47, 0.53)])
    return _unit_vectors(rng, n) * axes


def _box(rng: np.random.Generator, n: int) -> Array:
    half = np.array([1.0, rng.uniform(0.66, 0.74), rng.uniform(0.42, 0.48)])
    areas = [half[1] * half[2]] * 2 + [half[0] * half[2]] * 2 + [half[0] * half[1]] * 2
    parts = []
    for face, count in enumerate(_by_area(rng, n, areas)):
        axis, sign = divmod(face, 2)
        p = rng.uniform(-1.0, 1.0, size=(count, 3)) * half
        p[:, axis] = half[axis] * (1.0 if sign else -1.0)
        parts.append(p)
    return np.concatenate(parts)


def _cylinder(rng: np.random.Generator, n: int) -> Array:
    radius, height = rng.uniform(0.57, 0.63), rng.uniform(1.14, 1.26)
    side, top, bottom = _by_area(rng, n, [2 * np.pi * radius * height, np.pi * radius**2, np.pi * radius**2])
    a = rng.uniform(0.0, 2.0 * np.pi, size=side)
    z = rng.uniform(-height / 2, height / 2, size=side)
    wall = np.column_stack([radius * np.cos(a), radius * np.sin(a), z])
    return np.concatenate([wall, _disk(rng, top, radius, height / 2), _disk(rng, bottom, radius, -height / 2)])


def _cone(rng: np.random.Generator, n: int) -> Array:
    radius, height = rng.uniform(0.95, 1.05), rng.uniform(1.9, 2.1)
    slant = np.hypot(radius, height)
    side, base = _by_area(rng, n, [np.pi * radius * slant, np.pi * radius**2])
    t = np.sqrt(rng.uniform(size=side))
    a = rng.uniform(0.0, 2.0 * np.pi, size=side)
    wall = np.column_stack([radius * t * np.cos(a), radius * t * np.sin(a), height * (1.0 - t)])
    return np.concatenate([wall, _disk(rng, base, radius, 0.0)])


def _torus(rng: np.random.Generator, n: int) -> Array:
    tube = rng.uniform(0.22, 0.28)
    u = rng.uniform(0.0, 2.0 * np.pi, size=n)
    v = rng.uniform(0.0, 2.0 * np.pi, size=n)
    ring = 1.0 + tube * np.cos(v)
    return np.column_stack([ring * np.cos(u), ring * np.sin(u), tube * np.sin(v)])


def _plate_with_hole(rng: np.random.Generator, n: int) -> Array:
    hole = rng.uniform(0.45, 0.55)
    kept = np.zeros((0, 2))
    while kept.shape[0] < n:
        p = rng.uniform(-1.0, 1.0, size=(2 * n, 2))
        kept = np.concatenate([kept, p[(p**2).sum(axis=1) > hole**2]])
    return np.column_stack([kept[:n], np.zeros(n)])


def _capsule(rng: np.random.Generator, n: int) -> Array:
    radius, length = rng.uniform(0.23, 0.27), rng.uniform(1.5, 1.7)
    side, caps = _by_area(rng, n, [2 * np.pi * radius * length, 4 * np.pi * radius**2])
    a = rng.uniform(0.0, 2.0 * np.pi, size=side)
    z = rng.uniform(-length / 2, length / 2, size=side)
    wall = np.column_stack([radius * np.cos(a), radius * np.sin(a), z])
    ends = _unit_vectors(rng, caps) * radius
    ends[:, 2] += np.where(ends[:, 2] >= 0.0, length / 2, -length / 2)
    return np.concatenate([wall, ends])


def _pyramid(rng: np.random.Generator, n: int) -> Array:
    half, height = rng.uniform(0.95, 1.05), rng.uniform(1.5, 1.7)
    corners = np.array([[half, half], [-half, half], [-half, -half], [half, -half]])
    face_area = 0.5 * (2 * half) * np.hypot(half, height)
    counts = _by_area(rng, n, [face_area] * 4 + [(2 * half) ** 2])
    apex = np.array([0.0, 0.0, height])
    parts = []
    for face in range(4):
        a = np.append(corners[face], 0.0)
        b = np.append(corners[(face + 1) % 4], 0.0)
        r1, r2 = rng.uniform(size=(2, counts[face]))
        s = np.sqrt(r1)
        parts.append((1 - s)[:, None] * apex + (s * (1 - r2))[:, None] * a + (s * r2)[:, None] * b)
    base = rng.uniform(-half, half, size=(counts[4], 2))
    parts.append(np.column_stack([base, np.zeros(counts[4])]))
    return np.concatenate(parts)


def _helix(rng: np.random.Generator, n: int) -> Array:
    coil, height, turns = rng.uniform(0.57, 0.63), rng.uniform(1.9, 2.1), 3.0
    t = rng.uniform(0.0, 1.0, size=n)
    a = 2.0 * np.pi * turns * t
    center = np.column_stack([coil * np.cos(a), coil * np.sin(a), height * (t - 0.5)])
    return center + 0.04 * _unit_vectors(rng, n)


@dataclass(frozen=True)
class ShapeClass:
    name: str
    sampler: Callable[[np.random.Generator, int], Array]


SHAPE_CLASSES: tuple[ShapeClass, ...] = (
    ShapeClass("sphere", _sphere),
    ShapeClass("box", _box),
    ShapeClass("cylinder", _cylinder),
    ShapeClass("cone", _cone),
    ShapeClass("torus", _torus),
    ShapeClass("plate_with_hole", _plate_with_hole),
    ShapeClass("capsule", _capsule),
    ShapeClass("ellipsoid", _ellipsoid),
    ShapeClass("pyramid", _pyramid),
    ShapeClass("helix", _helix),
)


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


@dataclass
class DatasetSplit:
    class_names: list[str]
    train: list[PointCloud]
    test: list[PointCloud]
    points: int
    seed: int = 0

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


def sample_shape(kind: int, points: int, rng: np.random.Generator, noise: float = SURFACE_NOISE) -> Array:
    """One normalized surface sample of shape class ``kind``."""
    raw = SHAPE_CLASSES[kind].sampler(rng, points)
    if noise:
        raw = raw + noise * rng.standard_normal(raw.shape)
    return normalize(raw)


def generate(
    num_classes: int = 10,
    train_per_class: int = 80,
    test_per_class: int = 20,
    points: int = 256,
    seed: int = 0,
) -> DatasetSplit:
    if not 1 <= num_classes <= len(SHAPE_CLASSES):
        raise GenerationError(f"num_classes must be 1..{len(SHAPE_CLASSES)}, got {num_classes}")
    if train_per_class < 1 or test_per_class < 1:
        raise GenerationError("per-class train and test counts must be at least 1")
    if points < MIN_POINTS:
        raise GenerationError(f"clouds need at least {MIN_POINTS} points, got {points}")

    train, test = [], []
    for kind in range(num_classes):
        for split, count, bucket in ((0, train_per_class, train), (1, test_per_class, test)):
            for i in range(count):
                rng = np.random.default_rng([seed, kind, split, i])
                bucket.append(PointCloud(sample_shape(kind, points, rng), kind))
    logger.info(
        "Generated %d classes: %d train / %d test clouds of %d points",
        num_classes,
        len(train),
        len(test),
        points,
    )
    return DatasetSplit([s.name for s in SHAPE_CLASSES[:num_classes]], train, test, points, seed)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


def rotate_vertical(points: Array, angle: float) -> Array:
    c, s = np.cos(angle), np.sin(angle)
    rotation = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return points @ rotation.T


def jitter(points: Array, rng: np.random.Generator, sigma: float = 0.01, clip: float = 0.05) -> Array:
    return points + np.clip(sigma * rng.standard_normal(points.shape), -clip, clip)


def augment(
    cloud: PointCloud,
    rng: np.random.Generator,
    sigma: float = 0.01,
    clip: float = 0.05,
    rotate: bool = True,
) -> PointCloud:
    """Random rotation about the vertical axis, clipped Gaussian jitter, renormalize."""
    points = cloud.points
    if rotate:
        points = rotate_vertical(points, rng.uniform(0.0, 2.0 * np.pi))
    if sigma:
        points = jitter(points, rng, sigma, clip)
    return PointCloud(normalize(points), cloud.label)


# ---------------------------------------------------------------------------
# Class-incremental splitting
# ---------------------------------------------------------------------------


@dataclass
class StateData:
    """Data of one incremental state with labels remapped to arrival order."""

    state: int
    class_ids: list[int]
    labels: list[int]
    train: list[PointCloud] = field(default_factory=list)
    test: list[PointCloud] = field(default_factory=list)


def equal_schedule(num_classes: int, states: int) -> list[int]:
    """Split ``num_classes`` over ``states``; earlier states take any remainder."""
    if not 1 <= states <= num_classes:
        raise ScheduleError(f"cannot spread {num_classes} classes over {states} states")
    base, extra = divmod(num_classes, states)
    return [base + (1 if s < extra else 0) for s in range(states)]


def class_order(num_classes: int, seed: int) -> list[int]:
    return [int(c) for c in np.random.default_rng([seed, 7]).permutation(num_classes)]


def incremental_split(dataset: DatasetSplit, classes_per_state: Sequence[int], seed: int = 0) -> list[StateData]:
    """Assign classes to states by a seeded shuffle; class ``order[t]`` becomes label ``t``."""
    if any(c < 1 for c in classes_per_state) or sum(classes_per_state) != dataset.num_classes:
        raise ScheduleError(
            f"schedule {list(classes_per_state)} does not partition {dataset.num_classes} classes"
        )
    order = class_order(dataset.num_classes, seed)
    relabel = {original: new for new, original in enumerate(order)}
    states, start = [], 0
    for index, count in enumerate(classes_per_state, start=1):
        ids = order[start : start + count]
        labels = list(range(start, start + count))
        chosen = set(ids)
        states.append(
            StateData(
                state=index,
                class_ids=ids,
                labels=labels,
                train=[PointCloud(c.points, relabel[c.label]) for c in dataset.train if c.label in chosen],
                test=[PointCloud(c.points, relabel[c.label]) for c in dataset.test if c.label in chosen],
            )
        )
        start += count
    return states


# ---------------------------------------------------------------------------
# pcd text files and dataset directories
# ---------------------------------------------------------------------------


def format_cloud(cloud: PointCloud) -> str:
    lines = [f"pcd {cloud.size} {cloud.label}"]
    lines += [f"{x:.{DECIMALS}f} {y:.{DECIMALS}f} {z:.{DECIMALS}f}" for x, y, z in cloud.points]
    return "\n".join(lines) + "\n"


def save_cloud(cloud: PointCloud, path: str | os.PathLike) -> None:
    Path(path).write_text(format_cloud(cloud), encoding="utf-8")


def parse_cloud(text: str, path: str = "<string>") -> PointCloud:
    lines = text.splitlines()
    if not lines:
        raise CloudParseError(path, 1, "missing header line 'pcd <U> <label>'")
    header = lines[0].split()
    if len(header) != 3 or header[0] != "pcd":
        raise CloudParseError(path, 1, f"bad header {lines[0]!r}, expected 'pcd <U> <label>'")
    try:
        count, label = int(header[1]), int(header[2])
    except ValueError:
        raise CloudParseError(path, 1, f"bad header {lines[0]!r}, expected integers") from None
    if count < 1:
        raise CloudParseError(path, 1, f"point count must be positive, got {count}")

    body = lines[1:]
    while body and not body[-1].strip():
        body.pop()
    if len(body) < count:
        raise CloudParseError(path, len(body) + 2, f"missing line {len(body) + 2}: header declares {count} points")
    if len(body) > count:
        raise CloudParseError(path, count + 2, f"header declares {count} points but the file has {len(body)}")
    points = np.empty((count, 3))
    for i, line in enumerate(body):
        values = line.split()
        if len(values) != 3:
            raise CloudParseError(path, i + 2, f"expected 3 coordinates, got {len(values)}")
        try:
            points[i] = [float(v) for v in values]
        except ValueError:
            raise CloudParseError(path, i + 2, f"non-numeric coordinate in {line!r}") from None
    if not np.all(np.isfinite(points)):
        raise CloudParseError(path, 2, "non-finite coordinate")
    return PointCloud(points, label)


def load_cloud(path: str | os.PathLike) -> PointCloud:
    return parse_cloud(Path(path).read_text(encoding="utf-8"), str(path))


def write_dataset(dataset: DatasetSplit, directory: str | os.PathLike) -> Path:
    """Write every cloud as a ``pcd`` file plus ``manifest.json``; returns the manifest path."""
    root = Path(directory)
    files: dict[str, dict[str, list[str]]] = {"train": {}, "test": {}}
    for split, clouds in (("train", dataset.train), ("test", dataset.test)):
        counters: dict[int, int] = {}
        for cloud in clouds:
            index = counters.get(cloud.label, 0)
            counters[cloud.label] = index + 1
            rel = Path(split) / f"{cloud.label:02d}_{dataset.class_names[cloud.label]}" / f"{index:04d}.pcd"
            (root / rel).parent.mkdir(parents=True, exist_ok=True)
            save_cloud(cloud, root / rel)
            files[split].setdefault(str(cloud.label), []).append(rel.as_posix())
    manifest = {
        "metadata": {
            "format": MANIFEST_FORMAT,
            "version": MANIFEST_VERSION,
            "classes": dataset.class_names,
            "points": dataset.points,
            "seed": dataset.seed,
        },
        "data": files,
    }
    path = root / MANIFEST
    write_json_atomic(path, manifest)
    logger.info("Wrote dataset manifest %s", path)
    return path


def load_dataset(directory: str | os.PathLike) -> DatasetSplit:
    """Load a dataset directory written by :func:`write_dataset` (or converted externally)."""
    root = Path(directory)
    path = root / MANIFEST
    if not path.exists():
        raise DatasetNotFoundError(f"no {MANIFEST} in {root}")
    manifest = read_json(path, error=DatasetNotFoundError)
    meta, files = manifest.get("metadata", {}), manifest.get("data", {})
    if meta.get("format") != MANIFEST_FORMAT:
        raise DatasetNotFoundError(f"{path} is not a {MANIFEST_FORMAT} manifest")
    splits: dict[str, list[PointCloud]] = {"train": [], "test": []}
    for split in splits:
        for label, rels in sorted(files.get(split, {}).items(), key=lambda kv: int(kv[0])):
            for rel in rels:
                cloud = load_cloud(root / rel)
                splits[split].append(PointCloud(normalize(cloud.points), int(label)))
    return DatasetSplit(
        class_names=list(meta["classes"]),
        train=splits["train"],
        test=splits["test"],
        points=int(meta.get("points", 0)),
        seed=int(meta.get("seed", 0)),
    )


# ---------------------------------------------------------------------------
# Generator self-test
# ---------------------------------------------------------------------------


def oracle_features(cloud: PointCloud | Array) -> Array:
    """Shape statistics invariant to rotation about the vertical axis."""
    points = coords(cloud)
    centered = points - points.mean(axis=0)
    cov = np.cov(centered.T)
    eig = np.sort(np.linalg.eigvalsh(cov))[::-1]
    total = eig.sum()
    radius = np.linalg.norm(centered, axis=1)
    radius = radius / radius.max()
    planar = np.linalg.norm(centered[:, :2], axis=1)
    return np.concatenate(
        [
            eig / total,
            [cov[2, 2] / total],
            np.quantile(radius, [0.1, 0.25, 0.5, 0.75, 0.9]),
            [radius.std(), np.abs(centered[:, 2]).mean(), planar.mean(), planar.std()],
        ]
    )


def oracle_accuracy(train: Sequence[PointCloud], test: Sequence[PointCloud]) -> float:
    """Nearest-class-centroid accuracy on standardized :func:`oracle_features`."""
    x_train = np.array([oracle_features(c) for c in train])
    y_train = np.array([c.label for c in train])
    x_test = np.array([oracle_features(c) for c in test])
    y_test = np.array([c.label for c in test])
    mu, sd = x_train.mean(axis=0), x_train.std(axis=0) + 1e-12
    x_train, x_test = (x_train - mu) / sd, (x_test - mu) / sd
    classes = np.unique(y_train)
    centroids = np.array([x_train[y_train == c].mean(axis=0) for c in classes])
    d2 = ((x_test[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=-1)
    return float((classes[d2.argmin(axis=1)] == y_test).mean())
