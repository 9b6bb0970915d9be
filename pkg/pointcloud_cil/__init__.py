"""Class-incremental point-cloud classification on a numpy autodiff core.

A shared per-point encoder feeds ``L`` local geometric structures whose
centroids move along learned, semantically weighted edge vectors; a residual
channel gate reweights the structure features before max pooling; a growing
MLP classifier is trained state by state with a small exemplar memory, and
past-class scores are rescaled at inference from stored mean-score
statistics.

Quickstart::

    from pointcloud_cil import IncrementalSchedule, ModelConfig, TrainHyper, generate, run

    data = generate(num_classes=4, train_per_class=20, test_per_class=5, points=128)
    log = run(data, IncrementalSchedule((2, 2), exemplars=10), ModelConfig(), TrainHyper(epochs=5))
    log.average_accuracy()

The ``pointcloud-cil`` command (``python -m pointcloud_cil``) wraps dataset
generation, runs, sweeps, plots and attention export.
"""

from .data import DatasetSplit, generate, incremental_split, load_dataset
from .errors import PointCloudCILError, UserInputError
from .geometry import PointCloud
from .head import StateStats, rectify_scores
from .model import ModelConfig, PointCloudNet
from .trainer import ExemplarMemory, IncrementalSchedule, RunLog, TrainHyper, run

__all__ = [
    "DatasetSplit",
    "ExemplarMemory",
    "IncrementalSchedule",
    "ModelConfig",
    "PointCloud",
    "PointCloudCILError",
    "PointCloudNet",
    "RunLog",
    "StateStats",
    "TrainHyper",
    "UserInputError",
    "generate",
    "incremental_split",
    "load_dataset",
    "rectify_scores",
    "run",
]

__version__ = "0.1.0"
