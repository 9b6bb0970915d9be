"""The incremental state loop: exemplar memory, per-state training, statistics, evaluation.

Each state ``s`` runs, in order:

1. refresh the exemplar memory with the classes of state ``s - 1``
   (herding on the model trained through ``s - 1``), rebalancing quotas;
2. grow the classifier by the state's new classes;
3. minimize cross-entropy over batches drawn from new data plus exemplars;
4. record the compensation statistics;
5. evaluate on the test samples of every class seen so far.
"""

from __future__ import annotations

import csv
import logging
import os
import time
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import head, nncore
from .data import DatasetSplit, StateData, augment, incremental_split
from .errors import ClassRangeError, EvaluationError, ExemplarMemoryError, ScheduleError
from .geometry import PointCloud
from .head import StateStats
from .model import ModelConfig, PointCloudNet
from .store import save_checkpoint

logger = logging.getLogger(__name__)

Array = np.ndarray

EPSILON = 1e-8
SELECTION_MODES = ("herding", "random")

# RNG streams derived from the run seed: default_rng([seed, stream, ...]).
_STREAM_EXPAND = 1
_STREAM_TRAIN = 2
_STREAM_MEMORY = 3


@dataclass(frozen=True)
class IncrementalSchedule:
    classes_per_state: tuple[int, ...]
    exemplars: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.classes_per_state or any(c < 1 for c in self.classes_per_state):
            raise ScheduleError(f"every state needs at least one class: {list(self.classes_per_state)}")
        if self.exemplars < 0:
            raise ScheduleError(f"exemplar budget must be >= 0, got {self.exemplars}")

    @property
    def states(self) -> int:
        return len(self.classes_per_state)

    @property
    def total_classes(self) -> int:
        return sum(self.classes_per_state)

    def past_classes(self, state: int) -> int:
        """``c_p`` when state ``state`` (1-based) begins."""
        return sum(self.classes_per_state[: state - 1])

    def check_budget(self, states: Sequence[StateData]) -> None:
        """The memory must hold one exemplar per past class yet stay small against new data."""
        if self.exemplars == 0:
            return
        for data in states[1:]:
            past = self.past_classes(data.state)
            if self.exemplars < past:
                raise ScheduleError(
                    f"budget {self.exemplars} cannot hold one exemplar for each of {past} past classes"
                )
            per_new = len(data.train) / len(data.labels)
            if self.exemplars / past >= per_new:
                raise ScheduleError(
                    f"state {data.state}: {self.exemplars / past:.1f} exemplars per past class is not "
                    f"below {per_new:.1f} training samples per new class"
                )


class ExemplarMemory:
    """Fixed-budget store of past-class samples, kept in selection order per class."""

    def __init__(self, budget: int) -> None:
        if budget < 0:
            raise ExemplarMemoryError(f"budget must be >= 0, got {budget}")
        self.budget = budget
        self._store: dict[int, list[PointCloud]] = {}

    def __len__(self) -> int:
        return sum(len(v) for v in self._store.values())

    @property
    def classes(self) -> list[int]:
        return sorted(self._store)

    def quota(self, num_classes: int) -> int:
        if num_classes < 1:
            return self.budget
        if self.budget < num_classes:
            raise ExemplarMemoryError(f"budget {self.budget} is below the {num_classes} classes to store")
        return self.budget // num_classes

    def counts(self) -> dict[int, int]:
        return {c: len(v) for c, v in sorted(self._store.items())}

    def exemplars(self, cls: int) -> list[PointCloud]:
        return list(self._store.get(cls, []))

    def clouds(self) -> list[PointCloud]:
        return [cloud for c in self.classes for cloud in self._store[c]]

    def truncate(self, quota: int) -> None:
        for c in self._store:
            del self._store[c][quota:]

    def add(self, cls: int, clouds: Sequence[PointCloud]) -> None:
        if cls in self._store:
            raise ExemplarMemoryError(f"class {cls} already has exemplars")
        self._store[cls] = list(clouds)
        if len(self) > self.budget:
            raise ExemplarMemoryError(f"memory holds {len(self)} exemplars, budget is {self.budget}")


def herding_selection(features: Array, count: int) -> list[int]:
    """Greedy iCaRL herding on L2-normalized features.

    Step ``k`` picks the unused sample that brings the mean of the ``k``
    chosen features closest to the class mean; ties go to the lowest index.
    """
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    if not 0 <= count <= n:
        raise ExemplarMemoryError(f"cannot select {count} of {n} samples")
    vectors = features / (np.linalg.norm(features, axis=1, keepdims=True) + EPSILON)
    class_mean = vectors.mean(axis=0)
    chosen: list[int] = []
    running = np.zeros(vectors.shape[1])
    available = np.ones(n, dtype=bool)
    for k in range(1, count + 1):
        candidates = (running + vectors) / k
        dist = np.sqrt(((class_mean - candidates) ** 2).sum(axis=1))
        dist[~available] = np.inf
        i = int(np.argmin(dist))
        chosen.append(i)
        available[i] = False
        running += vectors[i]
    return chosen


def update_exemplars(
    memory: ExemplarMemory,
    new_clouds: Sequence[PointCloud],
    model: PointCloudNet | None,
    selection: str = "herding",
    rng: np.random.Generator | None = None,
) -> ExemplarMemory:
    """Rebalance quotas to ``budget // classes`` and fill in the classes of ``new_clouds``."""
    if selection not in SELECTION_MODES:
        raise ExemplarMemoryError(f"unknown exemplar selection {selection!r}")
    if memory.budget == 0:
        return memory
    by_class: dict[int, list[PointCloud]] = {}
    for cloud in new_clouds:
        by_class.setdefault(cloud.label, []).append(cloud)
    overlap = set(by_class) & set(memory.classes)
    if overlap:
        raise ExemplarMemoryError(f"classes {sorted(overlap)} are already stored")

    quota = memory.quota(len(memory.classes) + len(by_class))
    memory.truncate(quota)
    rng = rng or np.random.default_rng(0)
    for cls, clouds in sorted(by_class.items()):
        take = min(quota, len(clouds))
        if selection == "herding":
            if model is None:
                raise ExemplarMemoryError("herding needs a trained model")
            _, features = model.predict_scores([c.points for c in clouds])
            picked = herding_selection(features, take)
        else:
            picked = [int(i) for i in rng.choice(len(clouds), size=take, replace=False)]
        memory.add(cls, [clouds[i] for i in picked])
    logger.info("Exemplar memory: %d stored, quota %d per class over %d classes", len(memory), quota, len(memory.classes))
    return memory


@dataclass(frozen=True)
class TrainHyper:
    epochs: int = 150
    batch_size: int = 32
    lr: float = nncore.DEFAULT_LR
    weight_decay: float = nncore.DEFAULT_WEIGHT_DECAY
    augment: bool = True

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ScheduleError("epochs and batch_size must be positive")


def train_state(
    model: PointCloudNet,
    new_clouds: Sequence[PointCloud],
    exemplars: Sequence[PointCloud],
    hyper: TrainHyper,
    rng: np.random.Generator,
    state: int = 1,
) -> list[float]:
    """Adam over uniformly shuffled batches of new data plus exemplars; returns the per-epoch mean loss."""
    if not new_clouds:
        raise ScheduleError(f"state {state} has no training data")
    pool = list(new_clouds) + list(exemplars)
    labels = np.array([c.label for c in pool])
    if labels.max() >= model.num_classes:
        raise ClassRangeError(f"label {labels.max()} but the classifier has {model.num_classes} outputs")

    trace: list[float] = []
    report_every = max(1, hyper.epochs // 10)
    for epoch in range(1, hyper.epochs + 1):
        order = rng.permutation(len(pool))
        total = 0.0
        for start in range(0, len(pool), hyper.batch_size):
            batch = order[start : start + hyper.batch_size]
            clouds = [augment(pool[i], rng) if hyper.augment else pool[i] for i in batch]
            model.params.zero_grad()
            result = model.forward([c.points for c in clouds])
            loss = nncore.cross_entropy(result.logits, labels[batch])
            loss.backward()
            nncore.adam_step(model.params, hyper.lr, hyper.weight_decay)
            total += loss.item() * len(batch)
        trace.append(total / len(pool))
        if epoch % report_every == 0 or epoch == hyper.epochs:
            logger.info(f"[{epoch}/{hyper.epochs}] State {state} loss {trace[-1]:.4f}")
    return trace


@dataclass(frozen=True)
class EvaluationReport:
    accuracy: float
    accuracy_without_compensation: float
    past_as_new: int
    past_as_new_without_compensation: int
    samples: int


def accuracy_from_scores(scores: Array, labels: Array) -> float:
    scores = np.atleast_2d(np.asarray(scores))
    labels = np.asarray(labels)
    if labels.size == 0:
        raise EvaluationError("no samples to evaluate")
    return float((scores.argmax(axis=1) == labels).mean())


def score_report(
    scores: Array,
    labels: Array,
    stats: StateStats | None,
    state: int,
    new_classes: Sequence[int],
    use_compensation: bool = True,
) -> EvaluationReport:
    """Accuracy and past-predicted-as-new counts with and without compensation."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise EvaluationError("no samples to evaluate")
    raw = head.predict(scores, stats, state, use_compensation=False)
    rectified = head.predict(scores, stats, state, use_compensation=use_compensation)
    is_new = np.isin(np.arange(np.atleast_2d(scores).shape[1]), list(new_classes))
    is_past = ~np.isin(labels, list(new_classes))
    return EvaluationReport(
        accuracy=float((rectified == labels).mean()),
        accuracy_without_compensation=float((raw == labels).mean()),
        past_as_new=int((is_past & is_new[rectified]).sum()),
        past_as_new_without_compensation=int((is_past & is_new[raw]).sum()),
        samples=int(labels.size),
    )


def evaluate(
    model: PointCloudNet,
    stats: StateStats | None,
    test: Sequence[PointCloud],
    state: int,
    use_compensation: bool = True,
    new_classes: Sequence[int] = (),
) -> EvaluationReport:
    labels = np.array([c.label for c in test])
    if labels.size and labels.max() >= model.num_classes:
        raise EvaluationError(f"test label {labels.max()} has not been learned ({model.num_classes} classes)")
    scores, _ = model.predict_scores([c.points for c in test])
    return score_report(scores, labels, stats, state, new_classes, use_compensation)


RUNLOG_COLUMNS = (
    "state",
    "classes_seen",
    "acc_with_comp",
    "acc_without_comp",
    "loss_final",
    "seconds",
    "past_as_new_comp",
    "past_as_new_raw",
)


@dataclass
class StateResult:
    state: int
    classes_seen: int
    acc_with_comp: float
    acc_without_comp: float
    loss_final: float
    losses: list[float] = field(default_factory=list)
    seconds: float | None = None
    past_as_new_comp: int = 0
    past_as_new_raw: int = 0

    def row(self) -> list[str]:
        return [
            str(self.state),
            str(self.classes_seen),
            f"{self.acc_with_comp:.6f}",
            f"{self.acc_without_comp:.6f}",
            f"{self.loss_final:.6f}",
            "" if self.seconds is None else f"{self.seconds:.3f}",
            str(self.past_as_new_comp),
            str(self.past_as_new_raw),
        ]


@dataclass
class RunLog:
    results: list[StateResult] = field(default_factory=list)
    class_order: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.results)

    def append(self, result: StateResult) -> None:
        for value in (result.acc_with_comp, result.acc_without_comp):
            if not 0.0 <= value <= 1.0:
                raise EvaluationError(f"accuracy {value} outside [0, 1]")
        self.results.append(result)

    def average_accuracy(self, with_compensation: bool = True) -> float:
        """Average incremental accuracy: the mean over states of the top-1 accuracy."""
        if not self.results:
            return 0.0
        key = "acc_with_comp" if with_compensation else "acc_without_comp"
        return float(np.mean([getattr(r, key) for r in self.results]))

    def rows(self) -> list[list[str]]:
        return [r.row() for r in self.results]

    def to_csv(self, path: str | os.PathLike) -> Path:
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(RUNLOG_COLUMNS)
            writer.writerows(self.rows())
        return Path(path)

    def losses_to_csv(self, path: str | os.PathLike) -> Path:
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["state", "epoch", "loss"])
            for r in self.results:
                for epoch, loss in enumerate(r.losses, start=1):
                    writer.writerow([r.state, epoch, f"{loss:.6f}"])
        return Path(path)


def run(
    dataset: DatasetSplit,
    schedule: IncrementalSchedule,
    model_config: ModelConfig | None = None,
    hyper: TrainHyper | None = None,
    sfc: bool = True,
    joint: bool = False,
    selection: str = "herding",
    checkpoint_dir: str | os.PathLike | None = None,
    timing: bool = False,
) -> RunLog:
    """Train and evaluate every state of ``schedule``.

    ``joint`` trains each state on the full training data of all seen
    classes (no memory, no compensation): the upper bound. Zero exemplars
    with ``sfc`` off is the naive fine-tuning lower bound.
    """
    model_config = model_config or ModelConfig()
    hyper = hyper or TrainHyper()
    if schedule.total_classes != dataset.num_classes:
        raise ScheduleError(
            f"schedule covers {schedule.total_classes} classes, dataset has {dataset.num_classes}"
        )
    states = incremental_split(dataset, schedule.classes_per_state, schedule.seed)
    if not joint:
        schedule.check_budget(states)

    seed = schedule.seed
    model = PointCloudNet(model_config, seed)
    memory = ExemplarMemory(0 if joint else schedule.exemplars)
    compensate = sfc and not joint and memory.budget > 0
    if sfc and not joint and memory.budget == 0:
        logger.warning("Score compensation disabled: the exemplar budget is 0")
    stats = StateStats()
    expand_rng = np.random.default_rng([seed, _STREAM_EXPAND])
    memory_rng = np.random.default_rng([seed, _STREAM_MEMORY])
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)

    log = RunLog(class_order=[c for data in states for c in data.class_ids])
    seen_test: list[PointCloud] = []
    total = len(states)
    for data in states:
        s = data.state
        logger.info(f"[{s}/{total}] State {s}: classes {data.class_ids} -> labels {data.labels}")
        started = time.perf_counter()

        if s > 1 and not joint:
            update_exemplars(memory, states[s - 2].train, model, selection, memory_rng)
        model.expand_classes(len(data.labels), expand_rng)

        if joint:
            new_clouds = [c for earlier in states[:s] for c in earlier.train]
            exemplars: list[PointCloud] = []
        else:
            new_clouds, exemplars = data.train, memory.clouds()
        losses = train_state(model, new_clouds, exemplars, hyper, np.random.default_rng([seed, _STREAM_TRAIN, s]), s)

        if compensate:
            new_scores, _ = model.predict_scores([c.points for c in data.train])
            stored = memory.clouds()
            stored_scores, _ = model.predict_scores([c.points for c in stored])
            head.record_statistics(
                stats,
                s,
                new_scores,
                [c.label for c in data.train],
                stored_scores,
                [c.label for c in stored],
            )

        seen_test += data.test
        report = evaluate(model, stats if compensate else None, seen_test, s, compensate, data.labels)
        result = StateResult(
            state=s,
            classes_seen=model.num_classes,
            acc_with_comp=report.accuracy,
            acc_without_comp=report.accuracy_without_compensation,
            loss_final=losses[-1],
            losses=losses,
            seconds=time.perf_counter() - started if timing else None,
            past_as_new_comp=report.past_as_new,
            past_as_new_raw=report.past_as_new_without_compensation,
        )
        log.append(result)
        logger.info(
            f"[{s}/{total}] State {s} done: accuracy {report.accuracy:.4f} "
            f"(raw {report.accuracy_without_compensation:.4f}) over {model.num_classes} classes"
        )
        if checkpoint_dir is not None:
            save_checkpoint(
                Path(checkpoint_dir) / f"state_{s:02d}.json",
                model,
                stats,
                s,
                log.class_order[: model.num_classes],
                extra={"exemplars": memory.counts()},
            )
    return log
