"""JSON persistence: atomic writes, dataset manifests and per-state checkpoints.

Every file uses the same two-key layout::

    {
      "metadata": {"format": "...", "version": 1, ...},
      "data": {...}
    }

Checkpoint ``data`` holds ``params`` (a list of ``{"name", "shape", "values"}``
records in registration order) and ``statistics`` (the compensation store).
Floats are written with ``repr`` precision, so a reload is bit-exact and the
file is byte-stable for a fixed seed.
"""

from __future__ import annotations

import json
import logging
import os
from collections.abc import Mapping, Sequence
from pathlib import Path
from typing import Any

import numpy as np

from .errors import CheckpointError
from .head import StateStats
from .model import ModelConfig, PointCloudNet

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "pointcloud-cil-checkpoint"
CHECKPOINT_VERSION = 1


def write_json_atomic(path: str | os.PathLike, payload: Any, indent: int | None = 2) -> Path:
    """Write ``payload`` to a sibling ``.tmp`` file, then rename it over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=indent, ensure_ascii=False)
        f.write("\n")
    os.replace(tmp, path)
    return path


def read_json(path: str | os.PathLike, error: type[Exception] = CheckpointError) -> dict:
    """Load a ``{"metadata", "data"}`` file; anything else raises ``error``."""
    try:
        with open(path, encoding="utf-8") as f:
            content = json.load(f)
    except FileNotFoundError:
        raise error(f"{path} not found") from None
    except json.JSONDecodeError as e:
        raise error(f"failed to decode JSON from {path}: {e}") from e
    if not isinstance(content, dict) or "metadata" not in content or "data" not in content:
        raise error(f"invalid JSON structure in {path}: expected 'metadata' and 'data'")
    return content


def save_checkpoint(
    path: str | os.PathLike,
    model: PointCloudNet,
    stats: StateStats | None,
    state: int,
    class_order: Sequence[int] = (),
    extra: Mapping[str, Any] | None = None,
) -> Path:
    metadata = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "state": state,
        "num_classes": model.num_classes,
        "class_order": [int(c) for c in class_order],
        "architecture": model.config.to_dict(),
        **(extra or {}),
    }
    params = [
        {"name": name, "shape": list(tensor.shape), "values": tensor.data.reshape(-1).tolist()}
        for name, tensor in model.params.items()
    ]
    content = {
        "metadata": metadata,
        "data": {"params": params, "statistics": (stats or StateStats()).to_dict()},
    }
    write_json_atomic(path, content, indent=None)
    logger.info("Saved checkpoint %s (state %d, %d classes)", path, state, model.num_classes)
    return Path(path)


def load_checkpoint(path: str | os.PathLike) -> tuple[PointCloudNet, StateStats, dict]:
    """Rebuild the network and statistics saved by :func:`save_checkpoint`."""
    content = read_json(path)
    metadata, data = content["metadata"], content["data"]
    if metadata.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if metadata.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {metadata.get('version')}")
    try:
        config = ModelConfig.from_dict(metadata["architecture"])
        model = PointCloudNet(config)
        model.expand_classes(int(metadata["num_classes"]), np.random.default_rng(0))
        records = {row["name"]: row for row in data["params"]}
        stats = StateStats.from_dict(data["statistics"])
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: malformed checkpoint ({e})") from e

    if set(records) != set(model.params):
        missing = sorted(set(model.params) ^ set(records))
        raise CheckpointError(f"{path}: parameter names do not match the architecture: {missing}")
    for name, tensor in model.params.items():
        row = records[name]
        values = np.asarray(row["values"], dtype=np.float64)
        if tuple(row["shape"]) != tensor.shape or values.size != tensor.data.size:
            raise CheckpointError(f"{path}: {name} has shape {row['shape']}, expected {list(tensor.shape)}")
        tensor.data = values.reshape(tensor.shape)
    return model, stats, metadata
