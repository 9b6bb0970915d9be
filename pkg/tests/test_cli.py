"""End-to-end tests of the command line through ``main(argv)``."""

import csv
import json

import pytest

from pointcloud_cil.__main__ import main
from pointcloud_cil.plotting import collect_series

from .helpers import TINY_SET

SMALL_RUN = ["--states", "3", "--exemplars", "3", *TINY_SET]


def status(capsys) -> dict:
    lines = capsys.readouterr().out.strip().splitlines()
    return json.loads(lines[-1])


@pytest.fixture()
def dataset_dir(tmp_path, capsys):
    target = tmp_path / "shapes"
    assert main(["generate", "--dataset", str(target), *TINY_SET]) == 0
    capsys.readouterr()
    return target


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_generate_reports_and_is_reproducible(tmp_path, capsys):
    first, second = tmp_path / "a", tmp_path / "b"
    assert main(["generate", "--dataset", str(first), *TINY_SET]) == 0
    result = status(capsys)
    assert result["success"] and result["classes"] == 3 and result["train"] == 18 and result["test"] == 9
    assert main(["generate", "--dataset", str(second), *TINY_SET]) == 0
    assert tree_bytes(first) == tree_bytes(second)


def test_generate_refuses_a_non_empty_directory(dataset_dir, capsys):
    assert main(["generate", "--dataset", str(dataset_dir), *TINY_SET]) == 2
    assert status(capsys)["success"] is False


def test_user_errors_exit_with_2(tmp_path, capsys):
    assert main(["generate", "--dataset", str(tmp_path / "x"), "--set", "num_classes=11"]) == 2
    assert "num_classes" in status(capsys)["error"]
    assert main(["train", "--dataset", str(tmp_path / "missing"), *SMALL_RUN]) == 2
    assert "generate" in status(capsys)["error"]
    assert main(["train", "--set", "colour=red"]) == 2
    assert main(["sweep", "exemplars", "--seeds", "a,b", "--dataset", str(tmp_path)]) == 2
    assert main(["train", "--dataset", str(tmp_path), *TINY_SET, "--set", "structures=100"]) == 2
    assert "structures" in status(capsys)["error"]
    assert main(["train", "--dataset", str(tmp_path), *TINY_SET, "--set", "neighbors=64"]) == 2
    assert "neighbors" in status(capsys)["error"]
    capsys.readouterr()


def test_train_writes_the_run_directory(dataset_dir, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--dataset", str(dataset_dir), "--out", str(out), *SMALL_RUN]) == 0
    result = status(capsys)
    assert result["states"] == 3
    assert 0.0 <= result["average_accuracy"] <= 1.0
    with open(out / "runlog.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert [r["state"] for r in rows] == ["1", "2", "3"]
    assert all(r["seconds"] == "" for r in rows)
    assert all(int(r["past_as_new_comp"]) <= int(r["past_as_new_raw"]) for r in rows)
    assert sorted(p.name for p in (out / "checkpoints").iterdir()) == [
        "state_01.json",
        "state_02.json",
        "state_03.json",
    ]
    assert (out / "config.cfg").read_text().count("states = 3") == 1
    assert (out / "losses.csv").exists() and (out / "run.json").exists()


def test_train_is_reproducible(dataset_dir, tmp_path, capsys):
    for name in ("a", "b"):
        assert main(["train", "--dataset", str(dataset_dir), "--out", str(tmp_path / name), *SMALL_RUN]) == 0
    assert (tmp_path / "a" / "runlog.csv").read_bytes() == (tmp_path / "b" / "runlog.csv").read_bytes()
    assert (tmp_path / "a" / "checkpoints" / "state_03.json").read_bytes() == (
        tmp_path / "b" / "checkpoints" / "state_03.json"
    ).read_bytes()
    capsys.readouterr()


def test_ablation_sweep_and_plot(dataset_dir, tmp_path, capsys):
    out = tmp_path / "sweep"
    argv = ["sweep", "ablation", "--dataset", str(dataset_dir), "--out", str(out), *SMALL_RUN]
    assert main(argv) == 0
    table = out / "sweep_ablation.csv"
    assert status(capsys)["csv"] == str(table.absolute())
    series = collect_series(table)
    assert list(series) == ["Ours", "w/oAG", "w/oGA", "w/oSF"]
    assert all([x for x, _ in points] == [1.0, 2.0, 3.0] for points in series.values())

    assert main(["plot", str(table), "--svg", str(tmp_path / "a.svg")]) == 0
    assert main(["plot", str(table), "--svg", str(tmp_path / "b.svg")]) == 0
    svg = (tmp_path / "a.svg").read_text()
    assert svg.startswith("<?xml")
    assert all(label in svg for label in series)
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()


def read_rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def test_exemplar_sweep_writes_one_row_per_budget_and_state(dataset_dir, tmp_path, capsys):
    out = tmp_path / "sweep"
    argv = ["sweep", "exemplars", "--values", "0,2,4", "--dataset", str(dataset_dir), "--out", str(out), *SMALL_RUN]
    assert main(argv) == 0
    rows = read_rows(status(capsys)["csv"])
    assert len(rows) == 3 * 3
    assert [r["variant"] for r in rows] == ["exemplars=0"] * 3 + ["exemplars=2"] * 3 + ["exemplars=4"] * 3
    for state in ("1", "2", "3"):
        assert sum(r["state"] == state for r in rows) == 3
    assert all(r["acc_with_comp"] == r["acc_without_comp"] for r in rows if r["variant"] == "exemplars=0")


def test_states_sweep_follows_the_schedule_shape(dataset_dir, tmp_path, capsys):
    out = tmp_path / "sweep"
    argv = ["sweep", "states", "--values", "1,3", "--dataset", str(dataset_dir), "--out", str(out), *SMALL_RUN]
    assert main(argv) == 0
    rows = read_rows(status(capsys)["csv"])
    assert [(r["variant"], r["state"]) for r in rows] == [
        ("states=1", "1"),
        ("states=3", "1"),
        ("states=3", "2"),
        ("states=3", "3"),
    ]
    assert [r["classes_seen"] for r in rows] == ["3", "1", "2", "3"]


def test_plot_averages_seeds_of_a_sweep(tmp_path, capsys):
    table = tmp_path / "sweep.csv"
    table.write_text(
        "variant,seed,state,acc_with_comp\n"
        "a,0,1,0.9\n"
        "a,0,2,0.5\n"
        "a,1,1,0.7\n"
        "a,1,2,0.3\n"
        "b,0,1,1.0\n"
        "b,1,1,0.8\n"
    )
    series = collect_series(table)
    assert list(series) == ["a", "b"]
    assert [x for x, _ in series["a"]] == [1.0, 2.0]
    assert [y for _, y in series["a"]] == pytest.approx([0.8, 0.4])
    assert series["b"] == [(1.0, pytest.approx(0.9))]
    assert main(["plot", str(table)]) == 0
    assert (tmp_path / "sweep.svg").exists()


def test_train_rejects_structures_larger_than_the_stored_clouds(dataset_dir, tmp_path, capsys):
    argv = ["train", "--dataset", str(dataset_dir), "--out", str(tmp_path / "run"), *SMALL_RUN]
    assert main([*argv, "--set", "points=256", "--set", "structures=100"]) == 2
    assert "64 points" in status(capsys)["error"]


def test_plot_single_row_and_malformed(tmp_path, capsys):
    good = tmp_path / "one.csv"
    good.write_text("state,acc_with_comp\n1,0.5\n")
    assert main(["plot", str(good)]) == 0
    assert (tmp_path / "one.svg").exists()

    bad = tmp_path / "bad.csv"
    bad.write_text("state,acc_with_comp\n1,0.5,extra\n")
    assert main(["plot", str(bad)]) == 2
    bad.write_text("state,acc_with_comp\n1,high\n")
    assert main(["plot", str(bad)]) == 2
    assert main(["plot", str(good), "--y", "nope"]) == 2
    assert status(capsys)["success"] is False


def test_attention_export(dataset_dir, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--dataset", str(dataset_dir), "--out", str(out), *SMALL_RUN]) == 0
    cloud = next((dataset_dir / "test").rglob("*.pcd"))
    target = tmp_path / "att.csv"
    assert main(["attention", str(out / "checkpoints" / "state_03.json"), str(cloud), "--csv", str(target)]) == 0
    assert status(capsys)["shape"] == [8, 8]
    with open(target, newline="") as f:
        rows = list(csv.reader(f))
    assert len(rows) == 9 and len(rows[0]) == 9
    assert all(0.0 < float(v) < 1.0 for row in rows[1:] for v in row[1:])
