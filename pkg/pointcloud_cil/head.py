"""Classifier C and score-fairness compensation.

The classifier is a four-layer MLP whose last layer grows as classes arrive.
Compensation rescales past-class scores at inference whenever the raw
prediction is a class introduced in the current state::

    score(t) <- score(t) * (psi_init(t) / psi_cur(t)) * (psi_new(s) / psi_new(s_i(t)))

where ``psi_init(t)`` is the mean score of class ``t`` on its own training
samples in the state ``s_i(t)`` that introduced it, ``psi_cur(t)`` the mean
score on its exemplars after state ``s``, and ``psi_new(s)`` the mean of the
per-class means of the classes new in state ``s``. Rectified scores are not
renormalized; they only decide the argmax.
"""

from __future__ import annotations

import logging
from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

from . import nncore
from .errors import ClassRangeError, CompensationError, ConfigError, StatisticsError
from .nncore import Tensor

logger = logging.getLogger(__name__)

Array = np.ndarray

# Stored mean scores stay in (0, 1]; an underflowed zero is raised to this.
PSI_FLOOR = 1e-12


@dataclass(frozen=True)
class ClassifierConfig:
    in_dim: int = 64
    hidden: tuple[int, ...] = (64, 64, 32)

    def __post_init__(self) -> None:
        if self.in_dim < 1 or any(h < 1 for h in self.hidden):
            raise ConfigError(f"classifier widths must be positive: {self.in_dim}, {self.hidden}")

    @property
    def output_layer(self) -> str:
        return f"head.{len(self.hidden)}"


def init_classifier(
    params: nncore.ParamSet, cfg: ClassifierConfig, rng: np.random.Generator, num_classes: int = 0
) -> None:
    widths = (cfg.in_dim, *cfg.hidden)
    for layer in range(len(cfg.hidden)):
        params.add_linear(f"head.{layer}", widths[layer], widths[layer + 1], rng)
    params.add_linear(cfg.output_layer, widths[-1], num_classes, rng)


def class_count(params: Mapping[str, Tensor], cfg: ClassifierConfig) -> int:
    return params[f"{cfg.output_layer}.W"].shape[1]


def logits(f_c: Tensor, params: Mapping[str, Tensor], cfg: ClassifierConfig) -> Tensor:
    h = f_c
    for layer in range(len(cfg.hidden)):
        h = nncore.relu(nncore.linear(h, params[f"head.{layer}.W"], params[f"head.{layer}.b"]))
    out = cfg.output_layer
    return nncore.linear(h, params[f"{out}.W"], params[f"{out}.b"])


def classify(
    f_c: Tensor, params: Mapping[str, Tensor], cfg: ClassifierConfig, num_classes: int | None = None
) -> Tensor:
    """Softmax scores over every class learned so far."""
    width = class_count(params, cfg)
    if num_classes is not None and width != num_classes:
        raise ClassRangeError(f"classifier has {width} outputs, expected {num_classes}")
    if width == 0:
        raise ClassRangeError("classifier has no outputs yet")
    return nncore.softmax(logits(f_c, params, cfg))


def expand_classes(
    params: nncore.ParamSet, cfg: ClassifierConfig, count: int, rng: np.random.Generator
) -> nncore.ParamSet:
    """Append ``count`` freshly initialized outputs; existing outputs stay bit-identical."""
    if count < 0:
        raise ClassRangeError(f"cannot add {count} classes")
    if count == 0:
        return params
    out = cfg.output_layer
    fan_in = params[f"{out}.W"].shape[0]
    params.extend(f"{out}.W", nncore.glorot_uniform(rng, fan_in, count), axis=1)
    params.extend(f"{out}.b", np.zeros(count), axis=0)
    logger.info("Classifier expanded to %d classes", class_count(params, cfg))
    return params


# ---------------------------------------------------------------------------
# Score statistics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClassRecord:
    state: int
    psi: float


@dataclass
class StateStats:
    """Mean-score statistics kept across states.

    ``initial[t]`` is written once when class ``t`` is learned;
    ``current[s][t]`` holds ``psi_s(t)`` of each past class after state ``s``;
    ``new_mean[s]`` holds ``psi(s)``.
    """

    initial: dict[int, ClassRecord] = field(default_factory=dict)
    current: dict[int, dict[int, float]] = field(default_factory=dict)
    new_mean: dict[int, float] = field(default_factory=dict)

    def record_initial(self, cls: int, state: int, psi: float) -> None:
        if cls in self.initial:
            raise StatisticsError(f"initial statistics for class {cls} are already recorded")
        self.initial[cls] = ClassRecord(state, _check_psi(psi))

    def record_current(self, state: int, cls: int, psi: float) -> None:
        self.current.setdefault(state, {})[cls] = _check_psi(psi)

    def record_new_mean(self, state: int, psi: float) -> None:
        self.new_mean[state] = _check_psi(psi)

    def classes_of(self, state: int) -> list[int]:
        return sorted(c for c, rec in self.initial.items() if rec.state == state)

    def past_classes(self, state: int) -> list[int]:
        return sorted(c for c, rec in self.initial.items() if rec.state < state)

    def coefficient(self, cls: int, state: int) -> float:
        """Rescaling factor of past class ``cls`` in ``state``."""
        try:
            rec = self.initial[cls]
            psi_cur = self.current[state][cls]
            ratio_new = self.new_mean[state] / self.new_mean[rec.state]
        except KeyError as e:
            raise CompensationError(f"missing statistic {e} for class {cls} in state {state}") from e
        return (rec.psi / psi_cur) * ratio_new

    def to_dict(self) -> dict:
        return {
            "initial": [
                {"class": c, "state": rec.state, "psi": rec.psi} for c, rec in sorted(self.initial.items())
            ],
            "current": [
                {"state": s, "psi": {str(c): v for c, v in sorted(per.items())}}
                for s, per in sorted(self.current.items())
            ],
            "new_mean": [{"state": s, "psi": v} for s, v in sorted(self.new_mean.items())],
        }

    @classmethod
    def from_dict(cls, payload: Mapping) -> StateStats:
        stats = cls()
        for row in payload.get("initial", []):
            stats.record_initial(int(row["class"]), int(row["state"]), float(row["psi"]))
        for row in payload.get("current", []):
            for c, v in row["psi"].items():
                stats.record_current(int(row["state"]), int(c), float(v))
        for row in payload.get("new_mean", []):
            stats.record_new_mean(int(row["state"]), float(row["psi"]))
        return stats


def _check_psi(psi: float) -> float:
    """Validate a mean softmax score and clamp it into ``[PSI_FLOOR, 1]``.

    Negative, non-finite and above-one values are rejected. An exact ``0.0``
    (a mean that underflowed) is accepted and raised to ``PSI_FLOOR`` so the
    stored value stays inside ``(0, 1]``.
    """
    psi = float(psi)
    if not np.isfinite(psi) or psi > 1.0 + 1e-12 or psi < 0.0:
        raise StatisticsError(f"mean score {psi} outside (0, 1]")
    return max(min(psi, 1.0), PSI_FLOOR)


def _class_means(scores: Array, labels: Array, classes: list[int], what: str) -> dict[int, float]:
    means = {}
    for c in classes:
        mask = labels == c
        if not mask.any():
            raise StatisticsError(f"class {c} has no {what} to compute statistics from")
        means[c] = float(scores[mask, c].mean())
    return means


def record_statistics(
    stats: StateStats,
    state: int,
    new_scores: Array,
    new_labels: Array,
    exemplar_scores: Array,
    exemplar_labels: Array,
) -> StateStats:
    """Record the statistics of ``state`` from softmax score tables.

    ``new_scores`` are the scores of the state's training samples (all from
    new classes); ``exemplar_scores`` the scores of the stored exemplars of
    every past class.
    """
    new_scores = np.asarray(new_scores, dtype=np.float64)
    new_labels = np.asarray(new_labels, dtype=np.intp)
    new_classes = sorted(int(c) for c in np.unique(new_labels))
    if not new_classes:
        raise StatisticsError(f"state {state} has no training samples")
    fresh = _class_means(new_scores, new_labels, new_classes, "training samples")
    for c, psi in fresh.items():
        stats.record_initial(c, state, psi)
    stats.record_new_mean(state, float(np.mean(list(fresh.values()))))

    past = stats.past_classes(state)
    if past:
        exemplar_scores = np.asarray(exemplar_scores, dtype=np.float64)
        exemplar_labels = np.asarray(exemplar_labels, dtype=np.intp)
        for c, psi in _class_means(exemplar_scores, exemplar_labels, past, "exemplars").items():
            stats.record_current(state, c, psi)
    logger.info(
        "State %d statistics: psi_new=%.4f over %d new classes, %d past classes",
        state,
        stats.new_mean[state],
        len(new_classes),
        len(past),
    )
    return stats


def rectify_scores(scores: Array, stats: StateStats, state: int) -> Array:
    """Rescale past-class scores of every row whose raw argmax is a new class of ``state``."""
    scores = np.asarray(scores, dtype=np.float64)
    rows = np.atleast_2d(scores).copy()
    past = stats.past_classes(state)
    if state < 2 or not past:
        return rows.reshape(scores.shape)
    coefficient = np.ones(rows.shape[1])
    for c in past:
        if c >= rows.shape[1]:
            raise CompensationError(f"past class {c} outside {rows.shape[1]} scores")
        coefficient[c] = stats.coefficient(c, state)
    is_new = np.zeros(rows.shape[1], dtype=bool)
    is_new[[c for c in stats.classes_of(state) if c < rows.shape[1]]] = True
    hit = is_new[rows.argmax(axis=1)]
    rows[hit] *= coefficient
    return rows.reshape(scores.shape)


def predict(scores: Array, stats: StateStats | None, state: int, use_compensation: bool) -> Array:
    """Top-1 class per row, optionally after compensation."""
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    if use_compensation and stats is not None:
        scores = rectify_scores(scores, stats, state)
    return scores.argmax(axis=1)
