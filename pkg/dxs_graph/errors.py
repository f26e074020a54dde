"""
Typed errors for the dxs pipeline.

Every failure the library raises is a DxsError subclass. The class carries
the CLI exit code so that commands can map failures without inspecting
messages: 1 usage, 2 data, 3 numeric.
"""

from typing import Iterable, Optional


EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class DxsError(Exception):
    """Base class for all dxs errors."""

    exit_code: int = EXIT_DATA


# =============================================================================
# Usage / Configuration Errors
# =============================================================================

class ConfigError(DxsError):
    """Invalid run configuration (unknown key, out-of-range value)."""

    exit_code = EXIT_USAGE


class EchoSubsetError(DxsError):
    """Echo subset is not a legal all/odd/even prefix."""

    exit_code = EXIT_USAGE

    def __init__(self, indices: Iterable[int], reason: str):
        self.indices = tuple(indices)
        super().__init__(f"Illegal echo subset {list(self.indices)}: {reason}")


# =============================================================================
# Shape / Tensor Errors
# =============================================================================

class ShapeError(DxsError):
    """Tensor extents disagree with what an operation requires."""

    exit_code = EXIT_NUMERIC

    def __init__(self, op: str, dimension: str, message: str):
        self.op = op
        self.dimension = dimension
        super().__init__(f"{op}: {dimension}: {message}")


class PaddingError(ShapeError):
    """Reflective padding wider than the tensor allows."""


class EmptyMaskError(DxsError):
    """An operation needs at least one foreground voxel."""

    exit_code = EXIT_NUMERIC


class NonFiniteError(DxsError):
    """NaN or infinity where finite values are required."""

    exit_code = EXIT_NUMERIC

    def __init__(self, what: str, message: Optional[str] = None):
        self.what = what
        super().__init__(message or f"Non-finite values in {what}")


class NonFiniteGradientError(NonFiniteError):
    """Adam received a NaN/inf gradient for a named parameter."""

    def __init__(self, parameter: str):
        self.parameter = parameter
        super().__init__(parameter, f"Non-finite gradient for parameter '{parameter}'")


# =============================================================================
# Physics / Separation Errors
# =============================================================================

class RankDeficientBasisError(DxsError):
    """Water and fat basis columns are linearly dependent for the echo subset."""

    exit_code = EXIT_NUMERIC


class EmptyHistogramError(DxsError):
    """Otsu threshold requested on a histogram without mass."""

    exit_code = EXIT_NUMERIC


# =============================================================================
# Training Errors
# =============================================================================

class FoldError(DxsError):
    """Cross-validation split cannot be built."""

    exit_code = EXIT_USAGE


class TrainingDivergedError(DxsError):
    """Loss became non-finite during training."""

    exit_code = EXIT_NUMERIC

    def __init__(self, epoch: int, slice_ref: str, loss: float):
        self.epoch = epoch
        self.slice_ref = slice_ref
        self.loss = loss
        super().__init__(f"Training diverged at epoch {epoch}, slice {slice_ref} (loss={loss})")


# =============================================================================
# Data / I/O Errors
# =============================================================================

class DatasetError(DxsError):
    """Dataset layout is missing files or is inconsistent."""

    exit_code = EXIT_DATA


class TensorFileError(DxsError):
    """A DXT tensor file could not be read or written."""

    exit_code = EXIT_DATA

    def __init__(self, path, message: str):
        self.path = str(path)
        super().__init__(f"{self.path}: {message}")


class SubjectMismatchError(DxsError):
    """Predictions and references do not cover the same subjects."""

    exit_code = EXIT_DATA

    def __init__(self, missing_predictions: Iterable[str], missing_references: Iterable[str]):
        self.missing_predictions = sorted(missing_predictions)
        self.missing_references = sorted(missing_references)
        super().__init__(
            "Subject sets differ: "
            f"no prediction for {self.missing_predictions}, "
            f"no reference for {self.missing_references}"
        )


# =============================================================================
# Compute Dispatch Errors
# =============================================================================

class ComputeTaskError(DxsError):
    """A dispatched compute task failed, timed out or was revoked."""

    exit_code = EXIT_DATA

    def __init__(self, task_name: str, status: str, message: str):
        self.task_name = task_name
        self.status = status
        super().__init__(f"{task_name} {status}: {message}")
