"""CLI: generate data, run incremental training, sweep, plot, export attention maps.

Prints one JSON status line to stdout; logs go to stderr. Exit codes: 0 on
success, 2 for user/config errors, 1 for anything else.

Usage::

    python -m pointcloud_cil generate --config configs/benchmark.cfg
    python -m pointcloud_cil train --config configs/benchmark.cfg --no-sfc --out runs/wo_sf
    python -m pointcloud_cil sweep exemplars --values 0,30,60,120 --config configs/benchmark.cfg
    python -m pointcloud_cil plot runs/sweep_exemplars.csv --svg runs/exemplars.svg
    python -m pointcloud_cil attention runs/default/checkpoints/state_05.json cloud.pcd --csv att.csv
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import RunConfig, apply_assignments, load_config
from .errors import ConfigError, UserInputError
from .orchestrator import SWEEP_KEYS, Orchestrator
from .plotting import plot_csv

logger = logging.getLogger(__name__)


def _split(text: str | None) -> list[str]:
    return [v.strip() for v in (text or "").split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Key=value config file (default: built-in defaults).")
    common.add_argument("--seed", type=int, help="Override the run seed.")
    common.add_argument("--states", type=int, help="Number of incremental states.")
    common.add_argument("--exemplars", type=int, help="Total exemplar budget |M|.")
    common.add_argument("--out", help="Output directory.")
    common.add_argument("--dataset", help="Dataset directory.")
    common.add_argument("--no-agc", action="store_true", help="Disable adaptive centroid updates.")
    common.add_argument("--no-gaa", action="store_true", help="Disable geometric-aware attention.")
    common.add_argument("--no-sfc", action="store_true", help="Disable score fairness compensation.")
    common.add_argument("--joint", action="store_true", help="Joint-training upper bound.")
    common.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE", help="Override any config key (repeatable)."
    )
    common.add_argument("-v", "--verbose", action="store_true", help="Verbose logs to stderr.")

    parser = argparse.ArgumentParser(
        prog="pointcloud-cil",
        description="Class-incremental point-cloud classification (JSON status to stdout).",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="Write a synthetic shape dataset.")
    sub.add_parser("train", parents=[common], help="Run every incremental state and log accuracy.")

    sweep = sub.add_parser("sweep", parents=[common], help="One run per value of a config key.")
    sweep.add_argument("key", choices=SWEEP_KEYS)
    sweep.add_argument("--values", help="Comma-separated values (ablation default: Ours,w/oAG,w/oGA,w/oSF).")
    sweep.add_argument("--seeds", help="Comma-separated seeds (default: the config seed).")

    plot = sub.add_parser("plot", help="Render a CSV as an SVG line chart.")
    plot.add_argument("csv")
    plot.add_argument("--svg", help="Output path (default: CSV path with .svg suffix).")
    plot.add_argument("--x", default="state")
    plot.add_argument("--y", default="acc_with_comp")
    plot.add_argument("--series", default="variant", help="Column naming the series (absent: one series).")
    plot.add_argument("--title")
    plot.add_argument("-v", "--verbose", action="store_true", help="Verbose logs to stderr.")

    attention = sub.add_parser("attention", help="Export the attention map of one cloud as CSV.")
    attention.add_argument("checkpoint")
    attention.add_argument("cloud", help="A .pcd text file.")
    attention.add_argument("--csv", required=True, help="Output CSV path.")
    attention.add_argument("-v", "--verbose", action="store_true", help="Verbose logs to stderr.")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config)
    changes = {
        key: value
        for key, value in (
            ("seed", args.seed),
            ("states", args.states),
            ("exemplars", args.exemplars),
            ("out", args.out),
            ("dataset", args.dataset),
        )
        if value is not None
    }
    if args.no_agc:
        changes["agc"] = False
    if args.no_gaa:
        changes["gaa"] = False
    if args.no_sfc:
        changes["sfc"] = False
    if args.joint:
        changes["joint"] = True
    return apply_assignments(cfg.replace(**changes), args.set)


def dispatch(args: argparse.Namespace) -> dict:
    if args.command == "plot":
        svg = args.svg or str(args.csv).rsplit(".", 1)[0] + ".svg"
        path = plot_csv(args.csv, svg, x=args.x, y=args.y, series=args.series or None, title=args.title)
        return {"svg": str(path.absolute())}
    if args.command == "attention":
        return Orchestrator(RunConfig()).attention(args.checkpoint, args.cloud, args.csv)

    orchestrator = Orchestrator(resolve_config(args))
    if args.command == "generate":
        return orchestrator.generate()
    if args.command == "train":
        log, out = orchestrator.train()
        return {
            "out": str(out.absolute()),
            "states": len(log),
            "average_accuracy": log.average_accuracy(),
            "final_accuracy": log.results[-1].acc_with_comp,
        }
    try:
        seeds = [int(s) for s in _split(args.seeds)]
    except ValueError:
        raise ConfigError(f"--seeds expects comma-separated integers, got {args.seeds!r}") from None
    table = orchestrator.sweep(args.key, _split(args.values), seeds)
    return {"csv": str(table.absolute())}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    logging.basicConfig(
        stream=sys.stderr,
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s - %(levelname)s - %(message)s",
    )

    try:
        result = dispatch(args)
    except UserInputError as e:
        logger.error("%s", e)
        print(json.dumps({"success": False, "error": str(e)}))
        return 2
    except Exception as e:
        logger.exception("Command %s failed", args.command)
        print(json.dumps({"success": False, "error": str(e)}))
        return 1

    print(json.dumps({"success": True, "command": args.command, **result}))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
