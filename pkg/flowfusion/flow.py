"""Optical flow, camera ego flow and the projected scene-flow residual.

For a frame-A pixel ``x`` under camera motion ``xi``:

* ego flow:      ``W(x, xi) - x``
* scene flow:    ``optical_flow - ego_flow``
* flow residual: ``r_F = ||scene_flow||``, zero for static points.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional, Union

import numpy as np

from .errors import DimensionMismatchError
from .frames import FlowField, RgbdFrame
from .geometry import PinholeIntrinsics, RigidTransform, Twist, pixel_grid, se3_exp, warp_coordinates

if TYPE_CHECKING:
    from providers.base import FlowProvider


@dataclass(frozen=True, eq=False)
class FlowResidualField:
    """Per-pixel flow residual magnitude (pixels) with a validity mask."""

    r_f: np.ndarray
    valid: np.ndarray

    def __post_init__(self) -> None:
        valid = np.array(self.valid, dtype=bool)
        r_f = np.where(valid, np.asarray(self.r_f, dtype=float), 0.0)
        r_f.setflags(write=False)
        valid.setflags(write=False)
        object.__setattr__(self, "r_f", r_f)
        object.__setattr__(self, "valid", valid)

    @property
    def shape(self):
        return self.valid.shape


def compute_optical_flow(
    provider: "FlowProvider",
    frame_a: RgbdFrame,
    frame_b: RgbdFrame,
    index_a: Optional[int] = None,
    index_b: Optional[int] = None,
) -> FlowField:
    if frame_a.shape != frame_b.shape:
        raise DimensionMismatchError(f"frames differ in size: {frame_a.shape} vs {frame_b.shape}")
    field = provider.compute(frame_a, frame_b, index_a=index_a, index_b=index_b)
    if field.shape != frame_a.shape:
        raise DimensionMismatchError(
            f"{provider.describe()} returned flow of shape {field.shape}, expected {frame_a.shape}"
        )
    return field


def compute_ego_flow(
    frame_a: RgbdFrame,
    xi: Union[Twist, RigidTransform],
    K: Optional[PinholeIntrinsics] = None,
) -> FlowField:
    """Flow induced purely by the camera motion on frame A's geometry."""
    K = K or frame_a.intrinsics
    transform = xi if isinstance(xi, RigidTransform) else se3_exp(xi)
    warp = warp_coordinates(frame_a.depth, transform, K)
    if transform.is_identity():
        return FlowField(np.zeros(K.shape), np.zeros(K.shape), warp.valid)
    u, v = pixel_grid(K)
    return FlowField(warp.u - u, warp.v - v, warp.valid)


def compute_flow_residual(optical: FlowField, ego: FlowField) -> FlowResidualField:
    if optical.shape != ego.shape:
        raise DimensionMismatchError(f"flow fields differ in size: {optical.shape} vs {ego.shape}")
    valid = optical.valid & ego.valid
    r_f = np.hypot(optical.u - ego.u, optical.v - ego.v)
    return FlowResidualField(r_f, valid)
