"""Immutable image containers: RGB-D frames and dense 2D flow fields."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError, ParameterError
from .geometry import PinholeIntrinsics


def _frozen(array: np.ndarray, dtype=float) -> np.ndarray:
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class RgbdFrame:
    """One timestamped intensity + depth pair.

    ``intensity`` lies in [0, 1]; ``depth`` is metric with 0 meaning
    "no measurement".
    """

    timestamp: float
    intensity: np.ndarray
    depth: np.ndarray
    intrinsics: PinholeIntrinsics

    def __post_init__(self) -> None:
        intensity = _frozen(self.intensity)
        depth = _frozen(self.depth)
        shape = self.intrinsics.shape
        if intensity.shape != shape or depth.shape != shape:
            raise DimensionMismatchError(
                f"frame images {intensity.shape}/{depth.shape} do not match intrinsics {shape}"
            )
        if not np.all(np.isfinite(intensity)) or intensity.min(initial=0.0) < 0.0 or intensity.max(initial=0.0) > 1.0:
            raise ParameterError("intensity must be finite and within [0, 1]")
        if not np.all(np.isfinite(depth)) or depth.min(initial=0.0) < 0.0:
            raise ParameterError("depth must be finite and non-negative")
        object.__setattr__(self, "timestamp", float(self.timestamp))
        object.__setattr__(self, "intensity", intensity)
        object.__setattr__(self, "depth", depth)

    @property
    def shape(self):
        return self.intrinsics.shape

    @property
    def valid_depth(self) -> np.ndarray:
        return self.depth > 0

    def with_intensity(self, intensity: np.ndarray) -> "RgbdFrame":
        return RgbdFrame(self.timestamp, intensity, self.depth, self.intrinsics)


@dataclass(frozen=True, eq=False)
class FlowField:
    """Per-pixel 2D displacement (pixels) with a validity mask.

    Invalid pixels always carry ``(0, 0)``.
    """

    u: np.ndarray
    v: np.ndarray
    valid: np.ndarray

    def __post_init__(self) -> None:
        valid = np.array(self.valid, dtype=bool)
        u = np.asarray(self.u, dtype=float)
        v = np.asarray(self.v, dtype=float)
        if u.shape != valid.shape or v.shape != valid.shape:
            raise DimensionMismatchError(
                f"flow components {u.shape}/{v.shape} do not match mask {valid.shape}"
            )
        valid &= np.isfinite(u) & np.isfinite(v)
        object.__setattr__(self, "u", _frozen(np.where(valid, u, 0.0)))
        object.__setattr__(self, "v", _frozen(np.where(valid, v, 0.0)))
        valid.setflags(write=False)
        object.__setattr__(self, "valid", valid)

    @classmethod
    def zeros(cls, shape) -> "FlowField":
        return cls(np.zeros(shape), np.zeros(shape), np.ones(shape, dtype=bool))

    @property
    def shape(self):
        return self.valid.shape

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.u, self.v)
