"""Exception hierarchy shared by every module.

Errors caused by what the user asked for (bad config, unusable dataset,
malformed files) also derive from :class:`UserInputError`; the CLI maps those
to exit code 2 and everything else to exit code 1.
"""

from __future__ import annotations


class PointCloudCILError(Exception):
    """Base class for all errors raised by ``pointcloud_cil``."""


class UserInputError(PointCloudCILError):
    """Marker base for failures caused by user-supplied input."""


class DimensionError(PointCloudCILError):
    pass


class NumericError(PointCloudCILError):
    pass


class ClassRangeError(PointCloudCILError):
    pass


class OptimizerStateError(PointCloudCILError):
    pass


class SamplingError(PointCloudCILError):
    pass


class NeighborhoodError(PointCloudCILError):
    pass


class NormalizationError(PointCloudCILError):
    pass


class PreconditionError(PointCloudCILError):
    pass


class StatisticsError(PointCloudCILError):
    pass


class CompensationError(PointCloudCILError):
    pass


class ExemplarMemoryError(PointCloudCILError):
    pass


class EvaluationError(PointCloudCILError):
    pass


class CheckpointError(PointCloudCILError):
    pass


class ScheduleError(UserInputError):
    pass


class GenerationError(UserInputError):
    pass


class ConfigError(UserInputError):
    pass


class DatasetNotFoundError(UserInputError):
    pass


class OutputExistsError(UserInputError):
    pass


class CsvFormatError(UserInputError):
    pass


class CloudParseError(UserInputError):
    """Malformed ``pcd`` text file; ``line`` is 1-based."""

    def __init__(self, path: str, line: int, message: str) -> None:
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line
