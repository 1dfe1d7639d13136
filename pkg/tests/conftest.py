"""Shared fixtures: rendered synthetic scenes and hand-built frames."""

from __future__ import annotations

from typing import Optional

import numpy as np
import pytest

from flowfusion.frames import RgbdFrame
from flowfusion.geometry import PinholeIntrinsics, RigidTransform, Twist, se3_log
from flowfusion.synthetic import generate_synthetic_sequence, moving_box_scene_spec, static_scene_spec


# ── Helpers ──────────────────────────────────────────────────────────────

def small_intrinsics(width: int = 32, height: int = 24, focal: float = 40.0) -> PinholeIntrinsics:
    return PinholeIntrinsics(focal, focal, (width - 1) / 2.0, (height - 1) / 2.0, width, height)


def make_frame(
    depth,
    intensity=None,
    K: Optional[PinholeIntrinsics] = None,
    timestamp: float = 0.0,
) -> RgbdFrame:
    """Frame from a depth image (or a constant) and an optional intensity image."""
    K = K or small_intrinsics()
    if np.isscalar(depth):
        depth = np.full(K.shape, float(depth))
    if intensity is None:
        intensity = np.full(K.shape, 0.5)
    elif np.isscalar(intensity):
        intensity = np.full(K.shape, float(intensity))
    return RgbdFrame(timestamp, intensity, depth, K)


def twist_error(estimate: Twist, truth: RigidTransform):
    """(translation error in m, rotation error in degrees) of an estimated relative motion."""
    from flowfusion.geometry import se3_exp

    error = se3_exp(estimate) @ truth.inverse()
    return float(np.linalg.norm(error.translation)), float(np.degrees(error.rotation_angle()))


# ── Rendered scenes ──────────────────────────────────────────────────────

@pytest.fixture(scope="session")
def static_pair():
    frames, truth = generate_synthetic_sequence(static_scene_spec(frame_count=2))
    return frames, truth


@pytest.fixture(scope="session")
def box_pair():
    frames, truth = generate_synthetic_sequence(moving_box_scene_spec(frame_count=2))
    return frames, truth


@pytest.fixture(scope="session")
def static_sequence():
    return generate_synthetic_sequence(static_scene_spec(frame_count=10))


@pytest.fixture(scope="session")
def box_sequence():
    return generate_synthetic_sequence(moving_box_scene_spec(frame_count=10))


@pytest.fixture(scope="session")
def static_truth_twist(static_pair) -> Twist:
    _, truth = static_pair
    return se3_log(truth.relative[0])
