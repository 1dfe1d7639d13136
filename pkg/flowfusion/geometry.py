"""Pinhole camera model, SE(3)/se(3) conversions, point and pixel warping.

Conventions used everywhere in the package:

* ``T(xi)`` maps frame-A camera coordinates into frame-B camera coordinates,
  so warping a frame-A pixel is ``project(T(xi) @ backproject(x, D_A(x)))``.
* Pixel coordinates are continuous with ``(0, 0)`` at the centre of the
  top-left pixel; ``u`` runs along columns, ``v`` along rows.
* A twist is ordered ``(v, omega)``: translation part first.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Tuple, Union

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import (
    InvalidDepthError,
    NonProjectableError,
    ParameterError,
    WarpBehindCameraError,
)

SMALL_ANGLE = 1e-8
ORTHONORMAL_TOL = 1e-9


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PinholeIntrinsics:
    """Pinhole camera: focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise ParameterError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise ParameterError(f"image size must be positive, got {self.width}x{self.height}")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ParameterError(
                f"principal point ({self.cx}, {self.cy}) outside image {self.width}x{self.height}"
            )

    @property
    def shape(self) -> Tuple[int, int]:
        """Image shape as ``(height, width)``."""
        return (self.height, self.width)

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def downsampled(self) -> "PinholeIntrinsics":
        """Intrinsics of a 2x average-pooled image.

        Pixel ``j`` of the coarse image covers fine pixels ``2j`` and ``2j+1``,
        whose centres average to ``2j + 0.5``.
        """
        return PinholeIntrinsics(
            fx=self.fx / 2.0,
            fy=self.fy / 2.0,
            cx=(self.cx - 0.5) / 2.0,
            cy=(self.cy - 0.5) / 2.0,
            width=self.width // 2,
            height=self.height // 2,
        )


@dataclass(frozen=True)
class Twist:
    """Element of se(3): translation part ``v`` (m) and rotation part ``omega`` (rad)."""

    v: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    omega: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        v = tuple(float(x) for x in self.v)
        w = tuple(float(x) for x in self.omega)
        if len(v) != 3 or len(w) != 3:
            raise ParameterError("twist components must have 3 entries each")
        if not all(math.isfinite(x) for x in v + w):
            raise ParameterError(f"twist entries must be finite, got v={v} omega={w}")
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "omega", w)

    @classmethod
    def zero(cls) -> "Twist":
        return cls()

    @classmethod
    def from_vector(cls, vec: Sequence[float]) -> "Twist":
        vec = np.asarray(vec, dtype=float).reshape(6)
        return cls(v=tuple(vec[:3]), omega=tuple(vec[3:]))

    @property
    def vector(self) -> np.ndarray:
        return np.array(self.v + self.omega)

    def norm(self) -> float:
        return float(np.linalg.norm(self.vector))

    def __neg__(self) -> "Twist":
        return Twist.from_vector(-self.vector)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Element of SE(3) acting as ``p -> R @ p + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ParameterError("rigid transform entries must be finite")
        if np.max(np.abs(R.T @ R - np.eye(3))) > ORTHONORMAL_TOL:
            raise ParameterError("rotation matrix is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > ORTHONORMAL_TOL:
            raise ParameterError("rotation matrix determinant is not +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    # ------------------------------------------------------------------
    # Constructors
    # ------------------------------------------------------------------

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "RigidTransform":
        matrix = np.asarray(matrix, dtype=float)
        return cls(matrix[:3, :3], matrix[:3, 3])

    @classmethod
    def from_quaternion(cls, translation: Sequence[float], quat_xyzw: Sequence[float]) -> "RigidTransform":
        """Build from a translation and a unit quaternion stored ``(qx, qy, qz, qw)``."""
        return cls(Rotation.from_quat(np.asarray(quat_xyzw, dtype=float)).as_matrix(), translation)

    # ------------------------------------------------------------------
    # Group operations
    # ------------------------------------------------------------------

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def quaternion(self) -> np.ndarray:
        """Rotation as ``(qx, qy, qz, qw)``."""
        return Rotation.from_matrix(self.rotation).as_quat()

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return self.compose(other)

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform points of shape ``(..., 3)``."""
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def is_identity(self) -> bool:
        """Exact identity test (no tolerance)."""
        return bool(
            np.array_equal(self.rotation, np.eye(3)) and not np.any(self.translation)
        )

    def rotation_angle(self) -> float:
        cos = (np.trace(self.rotation) - 1.0) / 2.0
        return float(np.arccos(np.clip(cos, -1.0, 1.0)))

    def __repr__(self) -> str:
        t = np.array2string(self.translation, precision=6)
        return f"RigidTransform(t={t}, angle={self.rotation_angle():.6f})"


@dataclass(frozen=True)
class Pixel:
    u: float
    v: float


@dataclass(frozen=True)
class WarpResult:
    """Outcome of warping one pixel; ``depth`` is the transformed point's z."""

    pixel: Pixel
    depth: float
    in_image: bool


@dataclass(frozen=True, eq=False)
class WarpedCoordinates:
    """Dense warp of a depth image: target coordinates and depths per source pixel."""

    u: np.ndarray
    v: np.ndarray
    depth: np.ndarray
    valid: np.ndarray


# ---------------------------------------------------------------------------
# Lie group maps
# ---------------------------------------------------------------------------

def skew(w: np.ndarray) -> np.ndarray:
    return np.array(
        [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]]
    )


def _exp_coefficients(theta: float) -> Tuple[float, float, float]:
    """``sin(t)/t``, ``(1-cos t)/t^2``, ``(t-sin t)/t^3`` with a series branch near zero."""
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        return 1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0
    t2 = theta * theta
    return (
        math.sin(theta) / theta,
        (1.0 - math.cos(theta)) / t2,
        (theta - math.sin(theta)) / (t2 * theta),
    )


def se3_exp(xi: Twist) -> RigidTransform:
    """Exponential map se(3) -> SE(3) via the Rodrigues formula."""
    v = np.array(xi.v)
    w = np.array(xi.omega)
    theta = float(np.linalg.norm(w))
    a, b, c = _exp_coefficients(theta)
    W = skew(w)
    W2 = W @ W
    R = np.eye(3) + a * W + b * W2
    V = np.eye(3) + b * W + c * W2
    return RigidTransform(R, V @ v)


def se3_log(transform: RigidTransform) -> Twist:
    """Logarithm map SE(3) -> se(3), rotation angle in ``[0, pi)``."""
    w = Rotation.from_matrix(transform.rotation).as_rotvec()
    theta = float(np.linalg.norm(w))
    W = skew(w)
    if theta < SMALL_ANGLE:
        coef = 1.0 / 12.0 + theta * theta / 720.0
    else:
        a, b, _ = _exp_coefficients(theta)
        coef = (1.0 - a / (2.0 * b)) / (theta * theta)
    V_inv = np.eye(3) - 0.5 * W + coef * (W @ W)
    return Twist(v=tuple(V_inv @ transform.translation), omega=tuple(w))


def twist_between(a: RigidTransform, b: RigidTransform) -> Twist:
    """Twist of the relative motion ``b ∘ a^-1``."""
    return se3_log(b @ a.inverse())


# ---------------------------------------------------------------------------
# Camera model
# ---------------------------------------------------------------------------

def project(point: Sequence[float], K: PinholeIntrinsics) -> Pixel:
    x, y, z = (float(c) for c in point)
    if not z > 0:
        raise NonProjectableError(f"point z={z} is not in front of the camera")
    return Pixel(K.fx * x / z + K.cx, K.fy * y / z + K.cy)


def backproject(p: Pixel, depth: float, K: PinholeIntrinsics) -> np.ndarray:
    if not (math.isfinite(depth) and depth > 0):
        raise InvalidDepthError(f"depth {depth} is not a positive finite value")
    return np.array(
        [(p.u - K.cx) * depth / K.fx, (p.v - K.cy) * depth / K.fy, depth]
    )


def warp_pixel(x: Pixel, depth_a: float, xi: Union[Twist, RigidTransform], K: PinholeIntrinsics) -> WarpResult:
    """Warp a frame-A pixel into frame B under ``T(xi)``.

    Raises ``WarpBehindCameraError`` when the transformed point has z <= 0.
    """
    transform = xi if isinstance(xi, RigidTransform) else se3_exp(xi)
    point = backproject(x, depth_a, K)
    if transform.is_identity():
        return WarpResult(x, float(depth_a), _in_image(x.u, x.v, K))
    moved = transform.apply(point)
    if not moved[2] > 0:
        raise WarpBehindCameraError(f"warped point z={moved[2]:.6g} is behind frame B")
    target = project(moved, K)
    return WarpResult(target, float(moved[2]), _in_image(target.u, target.v, K))


def _in_image(u: float, v: float, K: PinholeIntrinsics) -> bool:
    return 0.0 <= u <= K.width - 1 and 0.0 <= v <= K.height - 1


# ---------------------------------------------------------------------------
# Dense (vectorized) forms
# ---------------------------------------------------------------------------

def pixel_grid(K: PinholeIntrinsics) -> Tuple[np.ndarray, np.ndarray]:
    """Column and row coordinate images, each ``(height, width)``."""
    return np.meshgrid(
        np.arange(K.width, dtype=float), np.arange(K.height, dtype=float)
    )


def backproject_depth(depth: np.ndarray, K: PinholeIntrinsics) -> Tuple[np.ndarray, np.ndarray]:
    """Back-project a depth image; returns ``(points HxWx3, valid HxW)``.

    Invalid pixels (depth 0 or non-finite) hold zeros.
    """
    depth = np.asarray(depth, dtype=float)
    valid = np.isfinite(depth) & (depth > 0)
    z = np.where(valid, depth, 0.0)
    u, v = pixel_grid(K)
    points = np.stack(((u - K.cx) * z / K.fx, (v - K.cy) * z / K.fy, z), axis=-1)
    return points, valid


def project_points(points: np.ndarray, K: PinholeIntrinsics) -> Tuple[np.ndarray, np.ndarray]:
    """Project points ``(..., 3)``; entries with z <= 0 come back as NaN."""
    points = np.asarray(points, dtype=float)
    z = points[..., 2]
    front = z > 0
    safe_z = np.where(front, z, 1.0)
    u = np.where(front, K.fx * points[..., 0] / safe_z + K.cx, np.nan)
    v = np.where(front, K.fy * points[..., 1] / safe_z + K.cy, np.nan)
    return u, v


def warp_coordinates(depth: np.ndarray, transform: RigidTransform, K: PinholeIntrinsics) -> WarpedCoordinates:
    """Dense ``W(x, xi)`` for every pixel of a depth image.

    ``valid`` is false where the source depth is invalid or the warped point
    is behind frame B. In-bounds checks are left to the sampler.
    """
    points, valid = backproject_depth(depth, K)
    if transform.is_identity():
        u, v = pixel_grid(K)
        return WarpedCoordinates(u, v, np.where(valid, points[..., 2], 0.0), valid)
    moved = transform.apply(points)
    valid = valid & (moved[..., 2] > 0)
    u, v = project_points(moved, K)
    return WarpedCoordinates(
        np.where(valid, u, np.nan),
        np.where(valid, v, np.nan),
        np.where(valid, moved[..., 2], 0.0),
        valid,
    )
