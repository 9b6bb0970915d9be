"""Command workflows: generate a dataset, run incremental training, sweep, export attention."""

from __future__ import annotations

import csv
import logging
from collections.abc import Sequence
from pathlib import Path

from .attention import export_attention_csv
from .config import RunConfig, parse_value
from .data import generate, load_cloud, load_dataset, write_dataset
from .errors import ConfigError, DatasetNotFoundError, OutputExistsError
from .geometry import normalize
from .store import load_checkpoint, write_json_atomic
from .trainer import RUNLOG_COLUMNS, RunLog, run

logger = logging.getLogger(__name__)

SWEEP_KEYS = ("exemplars", "states", "ablation")

# Ablation variants and the config changes realizing them.
ABLATIONS: dict[str, dict[str, object]] = {
    "Ours": {},
    "w/oAG": {"agc": False},
    "w/oGA": {"gaa": False},
    "w/oSF": {"sfc": False},
    "finetune": {"exemplars": 0, "sfc": False},
    "joint": {"joint": True},
}
DEFAULT_ABLATIONS = ("Ours", "w/oAG", "w/oGA", "w/oSF")


def _slug(label: str) -> str:
    return label.replace("/", "_").replace("=", "_")


class Orchestrator:
    def __init__(self, config: RunConfig) -> None:
        self.config = config

    def generate(self) -> dict:
        cfg = self.config
        target = Path(cfg.dataset)
        if target.exists() and any(target.iterdir()):
            raise OutputExistsError(f"dataset directory {target} exists and is not empty")
        logger.info(f"Generating {cfg.num_classes} classes into {target}...")
        dataset = generate(cfg.num_classes, cfg.train_per_class, cfg.test_per_class, cfg.points, cfg.seed)
        manifest = write_dataset(dataset, target)
        return {
            "dataset": str(target.absolute()),
            "manifest": str(manifest.absolute()),
            "classes": dataset.num_classes,
            "train": len(dataset.train),
            "test": len(dataset.test),
        }

    def _load_dataset(self, cfg: RunConfig):
        if not Path(cfg.dataset).is_dir():
            raise DatasetNotFoundError(f"dataset directory {cfg.dataset} not found; run 'generate' first")
        dataset = load_dataset(cfg.dataset)
        smallest = min(len(c.points) for c in (*dataset.train, *dataset.test))
        if cfg.structures > smallest or cfg.neighbors >= smallest:
            raise ConfigError(
                f"structures={cfg.structures} and neighbors={cfg.neighbors} do not fit clouds of {smallest} points"
            )
        return dataset

    def train(self, config: RunConfig | None = None) -> tuple[RunLog, Path]:
        cfg = config or self.config
        dataset = self._load_dataset(cfg)
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        cfg.write(out / "config.cfg")

        logger.info(f"Starting run: {cfg.states} states, {cfg.exemplars} exemplars, seed {cfg.seed} -> {out}")
        log = run(
            dataset,
            cfg.schedule(dataset.num_classes),
            cfg.model_config(),
            cfg.hyper(),
            sfc=cfg.sfc,
            joint=cfg.joint,
            selection=cfg.exemplar_selection,
            checkpoint_dir=out / "checkpoints",
            timing=cfg.timing,
        )
        log.to_csv(out / "runlog.csv")
        log.losses_to_csv(out / "losses.csv")
        write_json_atomic(
            out / "run.json",
            {
                "metadata": {"classes": dataset.class_names, "class_order": log.class_order},
                "data": {
                    "average_accuracy": log.average_accuracy(True),
                    "average_accuracy_without_compensation": log.average_accuracy(False),
                    "final_accuracy": log.results[-1].acc_with_comp,
                },
            },
        )
        logger.info(f"Run complete: average accuracy {log.average_accuracy():.4f}")
        return log, out

    def sweep_variants(self, key: str, values: Sequence[str]) -> list[tuple[str, RunConfig]]:
        if key not in SWEEP_KEYS:
            raise ConfigError(f"sweep key must be one of {', '.join(SWEEP_KEYS)}, got {key!r}")
        if key == "ablation":
            values = list(values) or list(DEFAULT_ABLATIONS)
            unknown = [v for v in values if v not in ABLATIONS]
            if unknown:
                raise ConfigError(f"unknown ablation variants {unknown}; choose from {', '.join(ABLATIONS)}")
            return [(v, self.config.replace(**ABLATIONS[v])) for v in values]
        if not values:
            raise ConfigError(f"sweep over {key} needs at least one value")
        return [(f"{key}={v}", self.config.replace(**{key: parse_value(key, v)})) for v in values]

    def sweep(self, key: str, values: Sequence[str], seeds: Sequence[int] = ()) -> Path:
        """One run per (value, seed); rows of every run land in ``<out>/sweep_<key>.csv``."""
        variants = self.sweep_variants(key, values)
        seeds = list(seeds) or [self.config.seed]
        root = Path(self.config.out)
        root.mkdir(parents=True, exist_ok=True)
        table = root / f"sweep_{key}.csv"
        summary = []
        total = len(variants) * len(seeds)
        with open(table, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["variant", "seed", *RUNLOG_COLUMNS])
            index = 0
            for label, variant in variants:
                for seed in seeds:
                    index += 1
                    logger.info(f"[{index}/{total}] Sweep {key}: {label}, seed {seed}")
                    cfg = variant.replace(seed=seed, out=str(root / f"sweep_{key}" / _slug(label) / f"seed_{seed}"))
                    log, _ = self.train(cfg)
                    writer.writerows([label, seed, *row] for row in log.rows())
                    summary.append({"variant": label, "seed": seed, "average_accuracy": log.average_accuracy()})
        write_json_atomic(root / f"sweep_{key}.json", {"metadata": {"key": key, "seeds": seeds}, "data": summary})
        return table

    def attention(self, checkpoint: str, cloud_path: str, out_csv: str) -> dict:
        model, _, metadata = load_checkpoint(checkpoint)
        if not model.config.gaa:
            raise ConfigError(f"{checkpoint} was trained without attention")
        cloud = load_cloud(cloud_path)
        result = model.forward([normalize(cloud.points)], params=model.params.snapshot())
        gate = result.attention.data[0]
        export_attention_csv(gate, out_csv)
        return {"attention": str(Path(out_csv).absolute()), "shape": list(gate.shape), "state": metadata["state"]}
