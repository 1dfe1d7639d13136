"""Exception hierarchy shared by every FlowFusion module.

Library code raises these; only the CLI layer turns them into exit codes.
Per-pixel failures are never exceptions, they are validity masks.
"""

from __future__ import annotations

from typing import Optional


class FlowFusionError(Exception):
    """Base class for all FlowFusion errors."""


# ---------------------------------------------------------------------------
# Configuration / parameters
# ---------------------------------------------------------------------------

class ConfigError(FlowFusionError):
    """Bad configuration file or flag value."""

    def __init__(self, message: str, line: Optional[int] = None, source: Optional[str] = None):
        self.line = line
        self.source = source
        where = ""
        if source is not None:
            where += f"{source}:"
        if line is not None:
            where += f"line {line}: "
        elif where:
            where += " "
        super().__init__(f"{where}{message}")


class ParameterError(FlowFusionError, ValueError):
    """A function parameter violates its precondition."""


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------

class GeometryError(FlowFusionError):
    pass


class NonProjectableError(GeometryError):
    """Point at or behind the image plane."""


class InvalidDepthError(GeometryError):
    """Depth is zero, negative or non-finite."""


class WarpBehindCameraError(GeometryError):
    """Transformed point lands at or behind frame B's image plane."""


# ---------------------------------------------------------------------------
# Data input / output
# ---------------------------------------------------------------------------

class DatasetError(FlowFusionError):
    """Missing or unreadable dataset files."""


class FlowFormatError(DatasetError):
    """Not a valid .flo file."""


class DimensionMismatchError(DatasetError):
    """Array or file dimensions do not match what the caller expects."""


class TrajectoryParseError(DatasetError):
    """Malformed trajectory line."""

    def __init__(self, message: str, line: int, path: Optional[str] = None):
        self.line = line
        self.path = path
        prefix = f"{path}: " if path else ""
        super().__init__(f"{prefix}line {line}: {message}")


class SyntheticSceneError(FlowFusionError):
    """Scene spec violates an invariant; ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


# ---------------------------------------------------------------------------
# Processing stages
# ---------------------------------------------------------------------------

class EmptyCloudError(FlowFusionError):
    """Frame has no valid depth pixel."""


class FlowProviderError(FlowFusionError):
    """Optical flow source cannot deliver a field."""


class DegenerateInputError(FlowFusionError):
    """Too few samples for a robust statistic."""


class UnderConstrainedError(FlowFusionError):
    """Not enough valid pixels to solve for the camera motion."""


class NumericalError(FlowFusionError):
    """Non-finite values in the normal equations."""


class DegenerateSegmentationError(FlowFusionError):
    """Fewer than two clusters carry a valid residual."""


class SolverError(FlowFusionError):
    """Linear solve failed to reach the required residual."""


class InsufficientDataError(FlowFusionError):
    """Too few associated poses for a trajectory metric."""
