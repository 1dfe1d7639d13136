"""Timestamped camera trajectories and the TUM pose file format.

Poses are camera-to-world, so a pose's translation is the camera position
in the world frame (the TUM ground-truth convention).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Sequence, Tuple, Union

import numpy as np

from .errors import ParameterError, TrajectoryParseError
from .geometry import RigidTransform

PathLike = Union[str, Path]


@dataclass(frozen=True, eq=False)
class Trajectory:
    timestamps: Tuple[float, ...]
    poses: Tuple[RigidTransform, ...]

    def __post_init__(self) -> None:
        stamps = tuple(float(t) for t in self.timestamps)
        poses = tuple(self.poses)
        if len(stamps) != len(poses):
            raise ParameterError(f"{len(stamps)} timestamps for {len(poses)} poses")
        if any(b <= a for a, b in zip(stamps, stamps[1:])):
            raise ParameterError("trajectory timestamps must be strictly increasing")
        object.__setattr__(self, "timestamps", stamps)
        object.__setattr__(self, "poses", poses)

    @classmethod
    def from_world_to_camera(cls, timestamps: Sequence[float], poses: Sequence[RigidTransform]) -> "Trajectory":
        """Build from world-to-camera poses (the pipeline's internal convention)."""
        return cls(tuple(timestamps), tuple(p.inverse() for p in poses))

    def positions(self) -> np.ndarray:
        if not self.poses:
            return np.zeros((0, 3))
        return np.array([p.translation for p in self.poses])

    def transformed(self, offset: RigidTransform) -> "Trajectory":
        """Left-compose every pose with a global rigid transform."""
        return Trajectory(self.timestamps, tuple(offset @ p for p in self.poses))

    def __len__(self) -> int:
        return len(self.poses)

    def __iter__(self) -> Iterator[Tuple[float, RigidTransform]]:
        return iter(zip(self.timestamps, self.poses))


# ---------------------------------------------------------------------------
# TUM pose files: "timestamp tx ty tz qx qy qz qw"
# ---------------------------------------------------------------------------

def parse_pose_line(text: str, line: int, path: str = "") -> Tuple[float, RigidTransform]:
    fields = text.replace(",", " ").split()
    if len(fields) != 8:
        raise TrajectoryParseError(f"expected 8 fields, got {len(fields)}", line, path or None)
    try:
        values = [float(f) for f in fields]
    except ValueError as exc:
        raise TrajectoryParseError(f"non-numeric field ({exc})", line, path or None) from None
    if not np.all(np.isfinite(values)):
        raise TrajectoryParseError("non-finite value", line, path or None)
    quat = np.array(values[4:8])
    if np.linalg.norm(quat) < 1e-12:
        raise TrajectoryParseError("zero-norm quaternion", line, path or None)
    return values[0], RigidTransform.from_quaternion(values[1:4], quat / np.linalg.norm(quat))


def read_trajectory_file(path: PathLike) -> Trajectory:
    path = Path(path)
    stamps: List[float] = []
    poses: List[RigidTransform] = []
    with open(path, "r", encoding="utf-8") as f:
        for number, raw in enumerate(f, start=1):
            text = raw.strip()
            if not text or text.startswith("#"):
                continue
            stamp, pose = parse_pose_line(text, number, str(path))
            if stamps and stamp <= stamps[-1]:
                raise TrajectoryParseError(
                    f"timestamp {stamp} is not after {stamps[-1]}", number, str(path)
                )
            stamps.append(stamp)
            poses.append(pose)
    return Trajectory(tuple(stamps), tuple(poses))


def format_pose_line(stamp: float, pose: RigidTransform) -> str:
    t = pose.translation
    q = pose.quaternion()
    return (
        f"{stamp:.6f} {t[0]:.9f} {t[1]:.9f} {t[2]:.9f} "
        f"{q[0]:.9f} {q[1]:.9f} {q[2]:.9f} {q[3]:.9f}"
    )


def write_trajectory_file(trajectory: Trajectory, path: PathLike, header: str = "") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        if header:
            f.write(f"# {header}\n")
        for stamp, pose in trajectory:
            f.write(format_pose_line(stamp, pose) + "\n")
