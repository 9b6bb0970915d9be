"""Line charts of run logs, sweep tables and loss traces as SVG.

Output is byte-stable: the SVG hash salt is fixed, text stays text and no
creation date is embedded, so plotting the same CSV twice gives identical
files.
"""

from __future__ import annotations

import csv
import logging
import os
from pathlib import Path
from statistics import fmean

import matplotlib
from matplotlib.figure import Figure

from .errors import CsvFormatError

logger = logging.getLogger(__name__)

SVG_RC = {
    "svg.hashsalt": "pointcloud-cil",
    "svg.fonttype": "none",
    "path.simplify": False,
}


def read_table(path: str | os.PathLike) -> tuple[list[str], list[dict[str, str]]]:
    try:
        with open(path, encoding="utf-8", newline="") as f:
            rows = list(csv.reader(f))
    except FileNotFoundError:
        raise CsvFormatError(f"{path} not found") from None
    if not rows or not rows[0]:
        raise CsvFormatError(f"{path}: missing header row")
    header = rows[0]
    records = []
    for number, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise CsvFormatError(f"{path}:{number}: expected {len(header)} fields, got {len(row)}")
        records.append(dict(zip(header, row)))
    if not records:
        raise CsvFormatError(f"{path}: no data rows")
    return header, records


def _number(path: str | os.PathLike, record: dict[str, str], column: str) -> float:
    try:
        return float(record[column])
    except ValueError:
        raise CsvFormatError(f"{path}: column {column!r} has non-numeric value {record[column]!r}") from None


def collect_series(
    path: str | os.PathLike, x: str = "state", y: str = "acc_with_comp", series: str | None = "variant"
) -> dict[str, list[tuple[float, float]]]:
    """``{series label: [(x, mean y), ...]}`` in first-appearance order, points sorted by x.

    Rows sharing a label and an x value (one per seed in a sweep table) are
    averaged into a single point.
    """
    header, records = read_table(path)
    for column in (x, y):
        if column not in header:
            raise CsvFormatError(f"{path}: no column {column!r} (have {', '.join(header)})")
    grouped: dict[str, dict[float, list[float]]] = {}
    for record in records:
        label = record[series] if series and series in header else Path(path).stem
        ys = grouped.setdefault(label, {}).setdefault(_number(path, record, x), [])
        ys.append(_number(path, record, y))
    return {label: [(px, fmean(ys)) for px, ys in sorted(by_x.items())] for label, by_x in grouped.items()}


def plot_csv(
    csv_path: str | os.PathLike,
    svg_path: str | os.PathLike,
    x: str = "state",
    y: str = "acc_with_comp",
    series: str | None = "variant",
    title: str | None = None,
) -> Path:
    data = collect_series(csv_path, x, y, series)
    with matplotlib.rc_context(SVG_RC):
        fig = Figure(figsize=(6.4, 4.0))
        ax = fig.subplots()
        for label, points in data.items():
            xs, ys = zip(*points)
            ax.plot(xs, ys, marker="o", label=label)
        ax.set_xlabel(x)
        ax.set_ylabel(y)
        ax.set_title(title or f"{y} vs {x}")
        ax.grid(True, alpha=0.3)
        if len(data) > 1 or series:
            ax.legend()
        svg_path = Path(svg_path)
        svg_path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(svg_path, format="svg", metadata={"Date": None})
    logger.info("Wrote %s with %d series", svg_path, len(data))
    return svg_path
