"""Static-background point map: back-project static pixels into the world and voxel-thin them."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .errors import DimensionMismatchError, ParameterError
from .frames import RgbdFrame
from .geometry import backproject_depth
from .trajectory import Trajectory

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class PointCloud:
    """World-frame points ``(N, 3)`` with one mean intensity each."""

    points: np.ndarray
    intensities: np.ndarray

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros(0))

    @property
    def is_empty(self) -> bool:
        return len(self.points) == 0

    def __len__(self) -> int:
        return len(self.points)


def accumulate_static_map(
    frames: Sequence[RgbdFrame],
    trajectory: Trajectory,
    masks: Sequence[np.ndarray],
    voxel_size: float,
) -> PointCloud:
    """``masks`` are dynamic masks (True = moving); their complement is mapped.

    Trajectory poses are camera-to-world. Points sharing a voxel are merged
    into their mean position and mean intensity.
    """
    if not voxel_size > 0:
        raise ParameterError(f"voxel_size must be positive, got {voxel_size}")
    if not (len(frames) == len(trajectory) == len(masks)):
        raise DimensionMismatchError(
            f"{len(frames)} frame(s), {len(trajectory)} pose(s) and {len(masks)} mask(s) must align"
        )

    points, intensities = [], []
    for frame, (_, pose), mask in zip(frames, trajectory, masks):
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != frame.shape:
            raise DimensionMismatchError(f"mask {mask.shape} does not match frame {frame.shape}")
        cam, valid = backproject_depth(frame.depth, frame.intrinsics)
        keep = valid & ~mask
        points.append(pose.apply(cam[keep]))
        intensities.append(np.asarray(frame.intensity)[keep])

    if not points or sum(len(p) for p in points) == 0:
        logger.warning("Static map is empty: no static pixel with valid depth")
        return PointCloud.empty()

    xyz = np.concatenate(points)
    gray = np.concatenate(intensities)
    keys = np.floor(xyz / voxel_size).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    merged = np.stack([np.bincount(inverse, weights=xyz[:, k]) for k in range(3)], axis=-1) / counts[:, None]
    gray = np.bincount(inverse, weights=gray) / counts
    logger.info("Static map: %d point(s) in %d voxel(s)", len(xyz), len(counts))
    return PointCloud(merged, gray)


def write_point_cloud(cloud: PointCloud, path: Union[str, Path]) -> None:
    """ASCII ``x y z intensity``, one point per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.column_stack([cloud.points, cloud.intensities]) if len(cloud) else np.zeros((0, 4))
    np.savetxt(path, data, fmt="%.6f")
