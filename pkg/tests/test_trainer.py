"""Tests for the exemplar memory, per-state training, evaluation and the full state loop."""

import numpy as np
import pytest

from pointcloud_cil.data import StateData
from pointcloud_cil.errors import ClassRangeError, EvaluationError, ExemplarMemoryError, ScheduleError
from pointcloud_cil.geometry import PointCloud
from pointcloud_cil.head import StateStats
from pointcloud_cil.model import PointCloudNet
from pointcloud_cil.store import load_checkpoint
from pointcloud_cil.trainer import (
    ExemplarMemory,
    IncrementalSchedule,
    RunLog,
    StateResult,
    TrainHyper,
    evaluate,
    herding_selection,
    run,
    score_report,
    train_state,
    update_exemplars,
)

from .helpers import random_cloud, tiny_model_config

FAST = TrainHyper(epochs=1, batch_size=4, augment=False)


def labelled(rng, label, count, points=32):
    return [PointCloud(random_cloud(rng, points), label) for _ in range(count)]


# ---------------------------------------------------------------------------
# Schedule and memory
# ---------------------------------------------------------------------------


def test_schedule_properties():
    schedule = IncrementalSchedule((4, 2, 2, 2), exemplars=20)
    assert schedule.states == 4
    assert schedule.total_classes == 10
    assert [schedule.past_classes(s) for s in (1, 2, 3, 4)] == [0, 4, 6, 8]
    with pytest.raises(ScheduleError):
        IncrementalSchedule((2, 0))
    with pytest.raises(ScheduleError):
        IncrementalSchedule((2, 2), exemplars=-1)


@pytest.mark.parametrize("budget, ok", [(1, False), (8, False), (6, True), (0, True)])
def test_budget_check(budget, ok):
    rng = np.random.default_rng(0)
    states = [
        StateData(1, [0, 1], [0, 1], labelled(rng, 0, 4) + labelled(rng, 1, 4)),
        StateData(2, [2, 3], [2, 3], labelled(rng, 2, 4) + labelled(rng, 3, 4)),
    ]
    schedule = IncrementalSchedule((2, 2), exemplars=budget)
    if ok:
        schedule.check_budget(states)
    else:
        with pytest.raises(ScheduleError):
            schedule.check_budget(states)


def test_quota_examples():
    memory = ExemplarMemory(10)
    assert memory.quota(2) == 5
    assert memory.quota(4) == 2
    with pytest.raises(ExemplarMemoryError):
        ExemplarMemory(3).quota(4)


def test_truncate_keeps_selection_order():
    rng = np.random.default_rng(1)
    memory = ExemplarMemory(10)
    clouds = labelled(rng, 0, 5)
    memory.add(0, clouds)
    memory.truncate(2)
    assert all(a is b for a, b in zip(memory.exemplars(0), clouds[:2], strict=True))
    assert len(memory) == 2


def brute_herding(features, count):
    vectors = features / (np.linalg.norm(features, axis=1, keepdims=True) + 1e-8)
    mu = vectors.mean(axis=0)
    chosen = []
    for k in range(1, count + 1):
        best, best_dist = None, np.inf
        for i in range(len(vectors)):
            if i in chosen:
                continue
            mean = (vectors[chosen].sum(axis=0) + vectors[i]) / k
            dist = np.linalg.norm(mu - mean)
            if dist < best_dist:
                best, best_dist = i, dist
        chosen.append(best)
    return chosen


def test_herding_matches_greedy_oracle():
    rng = np.random.default_rng(2)
    for _ in range(30):
        features = rng.standard_normal((int(rng.integers(3, 20)), 5))
        count = int(rng.integers(1, len(features) + 1))
        assert herding_selection(features, count) == brute_herding(features, count)


def test_herding_picks_each_sample_once():
    features = np.random.default_rng(3).standard_normal((8, 4))
    assert sorted(herding_selection(features, 8)) == list(range(8))
    assert herding_selection(features, 0) == []
    with pytest.raises(ExemplarMemoryError):
        herding_selection(features, 9)


def test_random_selection_fills_quotas():
    rng = np.random.default_rng(4)
    memory = ExemplarMemory(4)
    clouds = labelled(rng, 0, 5) + labelled(rng, 1, 5)
    update_exemplars(memory, clouds, None, selection="random", rng=np.random.default_rng(5))
    assert memory.counts() == {0: 2, 1: 2}
    assert all(any(e is c for c in clouds) for e in memory.clouds())


def test_rebalancing_shrinks_old_classes(tiny_model):
    rng = np.random.default_rng(6)
    memory = ExemplarMemory(6)
    update_exemplars(memory, labelled(rng, 0, 8), tiny_model)
    assert memory.counts() == {0: 6}
    update_exemplars(memory, labelled(rng, 1, 8) + labelled(rng, 2, 8), tiny_model)
    assert memory.counts() == {0: 2, 1: 2, 2: 2}
    assert len(memory) <= memory.budget


def test_memory_errors():
    rng = np.random.default_rng(7)
    with pytest.raises(ExemplarMemoryError):
        update_exemplars(ExemplarMemory(1), labelled(rng, 0, 3) + labelled(rng, 1, 3), None, "random")
    with pytest.raises(ExemplarMemoryError):
        update_exemplars(ExemplarMemory(4), labelled(rng, 0, 3), None, "mean")
    memory = ExemplarMemory(4)
    memory.add(0, labelled(rng, 0, 2))
    with pytest.raises(ExemplarMemoryError):
        memory.add(0, labelled(rng, 0, 1))


def test_zero_budget_memory_stays_empty():
    memory = update_exemplars(ExemplarMemory(0), labelled(np.random.default_rng(8), 0, 3), None)
    assert len(memory) == 0


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def two_class_model(seed=0):
    model = PointCloudNet(tiny_model_config(), seed=seed)
    model.expand_classes(2, np.random.default_rng([seed, 1]))
    return model


def test_train_state_reduces_loss(tiny_dataset):
    clouds = [c for c in tiny_dataset.train if c.label < 2]
    model = two_class_model()
    hyper = TrainHyper(epochs=8, batch_size=4, lr=0.005, augment=False)
    losses = train_state(model, clouds, [], hyper, np.random.default_rng(0))
    assert len(losses) == 8
    assert all(np.isfinite(losses))
    assert losses[-1] <= losses[0]


def test_train_state_is_deterministic(tiny_dataset):
    clouds = [c for c in tiny_dataset.train if c.label < 2]
    traces, weights = [], []
    for _ in range(2):
        model = two_class_model()
        traces.append(train_state(model, clouds, [], TrainHyper(epochs=2, batch_size=4), np.random.default_rng(1)))
        weights.append(model.params.state_dict())
    assert traces[0] == traces[1]
    assert all(np.array_equal(weights[0][k], weights[1][k]) for k in weights[0])


def test_train_state_errors(tiny_dataset):
    with pytest.raises(ScheduleError):
        train_state(two_class_model(), [], [], FAST, np.random.default_rng(0))
    with pytest.raises(ClassRangeError):
        train_state(two_class_model(), tiny_dataset.train, [], FAST, np.random.default_rng(0))


def test_single_class_state_fits_its_training_data(tiny_dataset):
    clouds = [c for c in tiny_dataset.train if c.label == 0]
    model = PointCloudNet(tiny_model_config(), seed=0)
    model.expand_classes(1, np.random.default_rng(0))
    losses = train_state(model, clouds, [], TrainHyper(epochs=3, batch_size=4), np.random.default_rng(2))
    assert all(np.isfinite(losses))
    report = evaluate(model, None, clouds, state=1, new_classes=[0])
    assert report.accuracy >= 0.95
    assert report.past_as_new == 0


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def compensation_stats():
    stats = StateStats()
    stats.record_initial(0, 1, 1.0)
    stats.record_new_mean(1, 1.0)
    stats.record_initial(1, 2, 1.0)
    stats.record_new_mean(2, 1.0)
    stats.record_current(2, 0, 0.2)
    return stats


def test_score_report_on_a_small_table():
    scores = np.array([[0.2, 0.8], [0.9, 0.1], [0.1, 0.9]])
    labels = np.array([0, 0, 1])
    report = score_report(scores, labels, compensation_stats(), 2, new_classes=[1])
    assert report.accuracy == 1.0
    assert report.accuracy_without_compensation == pytest.approx(2 / 3)
    assert report.past_as_new_without_compensation == 1
    assert report.past_as_new == 0
    assert report.samples == 3

    plain = score_report(scores, labels, compensation_stats(), 2, new_classes=[1], use_compensation=False)
    assert plain.accuracy == plain.accuracy_without_compensation


def test_compensation_never_adds_past_as_new_predictions():
    rng = np.random.default_rng(9)
    for _ in range(50):
        stats = StateStats()
        for cls, state in ((0, 1), (1, 1), (2, 2), (3, 3), (4, 3)):
            stats.record_initial(cls, state, rng.uniform(0.3, 1.0))
        for state in (1, 2, 3):
            stats.record_new_mean(state, rng.uniform(0.3, 1.0))
        for cls in (0, 1, 2):
            stats.record_current(3, cls, rng.uniform(0.05, 1.0))
        scores = rng.dirichlet(np.ones(5), size=40)
        labels = rng.integers(0, 5, size=40)
        report = score_report(scores, labels, stats, 3, new_classes=[3, 4])
        assert report.past_as_new <= report.past_as_new_without_compensation


def test_evaluate_rejects_unlearned_labels(tiny_model):
    test = [PointCloud(random_cloud(np.random.default_rng(10), 32), 5)]
    with pytest.raises(EvaluationError):
        evaluate(tiny_model, None, test, 1)
    with pytest.raises(EvaluationError):
        evaluate(tiny_model, None, [], 1)


def test_run_log_validation_and_csv(tmp_path):
    log = RunLog()
    log.append(StateResult(1, 2, 0.5, 0.25, 1.2345678, losses=[2.0, 1.2345678]))
    with pytest.raises(EvaluationError):
        log.append(StateResult(2, 4, 1.5, 0.5, 0.1))
    log.to_csv(tmp_path / "runlog.csv")
    log.losses_to_csv(tmp_path / "losses.csv")
    assert (tmp_path / "runlog.csv").read_text().splitlines() == [
        "state,classes_seen,acc_with_comp,acc_without_comp,loss_final,seconds,past_as_new_comp,past_as_new_raw",
        "1,2,0.500000,0.250000,1.234568,,0,0",
    ]
    assert (tmp_path / "losses.csv").read_text().splitlines()[1:] == ["1,1,2.000000", "1,2,1.234568"]
    assert log.average_accuracy() == 0.5
    assert log.average_accuracy(with_compensation=False) == 0.25


# ---------------------------------------------------------------------------
# Full state loop
# ---------------------------------------------------------------------------


def test_single_state_run(tiny_dataset):
    log = run(tiny_dataset, IncrementalSchedule((3,)), tiny_model_config(), FAST)
    assert len(log) == 1
    only = log.results[0]
    assert only.classes_seen == 3
    assert only.acc_with_comp == only.acc_without_comp
    assert sorted(log.class_order) == [0, 1, 2]


def test_three_state_run_with_checkpoints(tiny_dataset, tmp_path):
    schedule = IncrementalSchedule((1, 1, 1), exemplars=3, seed=0)
    log = run(tiny_dataset, schedule, tiny_model_config(), FAST, checkpoint_dir=tmp_path)
    assert [r.state for r in log.results] == [1, 2, 3]
    assert [r.classes_seen for r in log.results] == [1, 2, 3]
    assert all(0.0 <= r.acc_with_comp <= 1.0 for r in log.results)
    assert all(r.past_as_new_comp <= r.past_as_new_raw for r in log.results)
    for s in (1, 2, 3):
        model, stats, metadata = load_checkpoint(tmp_path / f"state_{s:02d}.json")
        assert model.num_classes == s
        assert sum(metadata["exemplars"].values()) <= schedule.exemplars
        assert metadata["class_order"] == log.class_order[:s]
    assert sorted(stats.initial) == [0, 1, 2]


def test_run_is_reproducible(tiny_dataset, tmp_path):
    schedule = IncrementalSchedule((2, 1), exemplars=2, seed=3)
    for name in ("a", "b"):
        run(tiny_dataset, schedule, tiny_model_config(), FAST).to_csv(tmp_path / f"{name}.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_run_variants(tiny_dataset):
    schedule = IncrementalSchedule((2, 1), exemplars=0)
    finetune = run(tiny_dataset, schedule, tiny_model_config(), FAST, sfc=False)
    joint = run(tiny_dataset, schedule, tiny_model_config(), FAST, joint=True)
    assert len(finetune) == len(joint) == 2
    assert all(r.acc_with_comp == r.acc_without_comp for r in finetune.results + joint.results)


def test_run_rejects_mismatched_schedule(tiny_dataset):
    with pytest.raises(ScheduleError):
        run(tiny_dataset, IncrementalSchedule((2, 2)), tiny_model_config(), FAST)
    with pytest.raises(ScheduleError):
        run(tiny_dataset, IncrementalSchedule((1, 1, 1), exemplars=1), tiny_model_config(), FAST)
