"""
Error taxonomy for the Fus-MAE toolkit.

Every error raised on purpose by the package derives from FusMAEError so the
command-line layer can map it onto a stable exit code.
"""


class FusMAEError(Exception):
    """Base class for all package errors."""


class ShapeError(FusMAEError):
    """Tensor extents or widths do not agree."""


class NumericError(FusMAEError):
    """A non-finite value was produced or consumed."""

    def __init__(self, message: str, op: str = None):
        super().__init__(message)
        self.op = op


class ConfigError(FusMAEError):
    """Invalid configuration value or flag combination."""


class MaskError(FusMAEError):
    """Mask ratio leaves no masked or no visible token."""


class MetricError(FusMAEError):
    """A metric is undefined for the given inputs."""


class DatasetError(FusMAEError):
    """Dataset file cannot be used."""


class DatasetCorruptError(DatasetError):
    """Dataset file is truncated or has a bad header."""


class CheckpointError(FusMAEError):
    """Checkpoint file cannot be used."""


class CheckpointCorruptError(CheckpointError):
    """Checkpoint file is truncated, has trailing bytes or a bad magic."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint was written by an unsupported format version."""


class CheckpointShapeError(CheckpointError):
    """Checkpoint tensor table does not match the expected model."""
