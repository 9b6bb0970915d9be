"""Small builders shared by the test modules."""

from pathlib import Path

import numpy as np

from pointcloud_cil.centroid import CentroidConfig
from pointcloud_cil.encoder import EncoderConfig
from pointcloud_cil.geometry import normalize
from pointcloud_cil.model import ModelConfig

REPO_ROOT = Path(__file__).resolve().parents[1]

# CLI overrides giving a run that finishes in seconds.
TINY_SET = [
    "--set", "structures=8",
    "--set", "neighbors=4",
    "--set", "encoder_widths=3,8,8,8",
    "--set", "hidden=8,8,4",
    "--set", "reduction=2",
    "--set", "num_classes=3",
    "--set", "train_per_class=6",
    "--set", "test_per_class=3",
    "--set", "points=64",
    "--set", "epochs=2",
    "--set", "batch_size=4",
]


def tiny_model_config(**changes) -> ModelConfig:
    base = dict(
        encoder=EncoderConfig((3, 8, 8, 8), 3),
        centroid=CentroidConfig(structures=8, neighbors=4, refine_iters=1),
        reduction=2,
        hidden=(8, 8, 4),
    )
    base.update(changes)
    return ModelConfig(**base)


def random_cloud(rng: np.random.Generator, points: int = 32) -> np.ndarray:
    return normalize(rng.standard_normal((points, 3)))


def offset_biases(params, rng: np.random.Generator, scale: float = 0.05) -> None:
    """Move zero-initialized biases off the ReLU kinks before finite differencing."""
    for name in params:
        if name.endswith(".b"):
            tensor = params[name]
            tensor.data += scale * rng.standard_normal(tensor.shape)
