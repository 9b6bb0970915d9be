"""Shared fixtures: a tiny architecture that keeps finite-difference checks and
end-to-end runs to a few seconds, plus small synthetic clouds and datasets."""

import numpy as np
import pytest

from pointcloud_cil.data import generate
from pointcloud_cil.model import ModelConfig, PointCloudNet

from .helpers import random_cloud, tiny_model_config


@pytest.fixture()
def tiny_config() -> ModelConfig:
    return tiny_model_config()


@pytest.fixture()
def tiny_model(tiny_config) -> PointCloudNet:
    model = PointCloudNet(tiny_config, seed=0)
    model.expand_classes(3, np.random.default_rng(1))
    return model


@pytest.fixture()
def cloud32() -> np.ndarray:
    return random_cloud(np.random.default_rng(42), 32)


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate(num_classes=3, train_per_class=6, test_per_class=3, points=64, seed=0)
