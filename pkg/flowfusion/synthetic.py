"""Deterministic synthetic dynamic RGB-D scenes with full ground truth.

A scene is a set of static planes plus an optional textured box that moves
rigidly in its own body frame. Frames are rendered by nearest-hit ray
casting; intensity comes from a seeded 3-octave value noise attached to the
surfaces, so photometric constancy holds exactly between frames.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, SyntheticSceneError
from .frames import FlowField, RgbdFrame
from .geometry import (
    PinholeIntrinsics,
    RigidTransform,
    Twist,
    backproject_depth,
    pixel_grid,
    project_points,
    se3_exp,
)
from .runtime import worker_count
from .trajectory import Trajectory

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

MIN_DEPTH = 0.3
MAX_DEPTH = 8.0
NOISE_OCTAVES = 3
NOISE_CONTRAST = 1.6
BOX_TEXTURE_OFFSET = np.array([101.3, 57.9, 23.1])


# ---------------------------------------------------------------------------
# Scene description
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Plane:
    """Static plane ``normal · X = offset`` in world coordinates."""

    normal: Tuple[float, float, float]
    offset: float

    def __post_init__(self) -> None:
        n = np.asarray(self.normal, dtype=float)
        norm = float(np.linalg.norm(n))
        if not norm > 0:
            raise SyntheticSceneError("plane", "normal must be non-zero")
        object.__setattr__(self, "normal", tuple(n / norm))
        object.__setattr__(self, "offset", float(self.offset) / norm)


@dataclass(frozen=True)
class BoxSpec:
    """Axis-aligned box (in its body frame) centred at ``center`` in frame 0."""

    center: Tuple[float, float, float]
    size: Tuple[float, float, float]
    twist: Twist = field(default_factory=Twist)

    def __post_init__(self) -> None:
        if any(s <= 0 for s in self.size):
            raise SyntheticSceneError("box.size", f"all extents must be positive, got {self.size}")


@dataclass(frozen=True)
class SyntheticSceneSpec:
    intrinsics: PinholeIntrinsics
    planes: Tuple[Plane, ...]
    box: Optional[BoxSpec] = None
    camera_twist: Twist = field(default_factory=Twist)
    texture_seed: int = 0
    frame_count: int = 10
    frame_rate: float = 30.0
    texture_scale: float = 0.16

    def validate(self) -> None:
        if self.frame_count < 1:
            raise SyntheticSceneError("frame_count", "must be at least 1")
        if not self.frame_rate > 0:
            raise SyntheticSceneError("frame_rate", "must be positive")
        if not self.texture_scale > 0:
            raise SyntheticSceneError("texture_scale", "must be positive")
        if not self.planes:
            raise SyntheticSceneError("plane", "at least one plane is required")

    def with_seed(self, seed: int) -> "SyntheticSceneSpec":
        return replace(self, texture_seed=int(seed))

    def timestamps(self) -> List[float]:
        return [k / self.frame_rate for k in range(self.frame_count)]


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """Per-frame world-to-camera poses, per-pair flows and per-frame dynamic masks."""

    poses: Tuple[RigidTransform, ...]
    flows: Tuple[FlowField, ...]
    masks: Tuple[np.ndarray, ...]
    relative: Tuple[RigidTransform, ...]

    def __post_init__(self) -> None:
        if len(self.flows) != max(len(self.poses) - 1, 0) or len(self.masks) != len(self.poses):
            raise SyntheticSceneError("frame_count", "ground-truth lengths are inconsistent")

    def trajectory(self, timestamps: Sequence[float]) -> Trajectory:
        """Camera-to-world trajectory for evaluation."""
        return Trajectory.from_world_to_camera(timestamps, self.poses)


# ---------------------------------------------------------------------------
# Procedural texture
# ---------------------------------------------------------------------------

def value_noise(points: np.ndarray, seed: int, scale: float, octaves: int = NOISE_OCTAVES) -> np.ndarray:
    """Seeded solid value noise over 3D points, quantized to 1/255 steps in [0, 1]."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(256)
    perm = np.concatenate([perm, perm])
    table = rng.random(256)

    total = np.zeros(points.shape[:-1])
    amplitude, norm = 1.0, 0.0
    for octave in range(octaves):
        p = points / (scale / 2 ** octave) + 17.31 * octave
        base = np.floor(p).astype(np.int64)
        frac = p - base
        smooth = frac * frac * (3.0 - 2.0 * frac)
        acc = np.zeros(points.shape[:-1])
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    h = perm[perm[perm[(base[..., 0] + dx) & 255] + ((base[..., 1] + dy) & 255)]
                             + ((base[..., 2] + dz) & 255)]
                    weight = (
                        (smooth[..., 0] if dx else 1.0 - smooth[..., 0])
                        * (smooth[..., 1] if dy else 1.0 - smooth[..., 1])
                        * (smooth[..., 2] if dz else 1.0 - smooth[..., 2])
                    )
                    acc += weight * table[h]
        total += amplitude * acc
        norm += amplitude
        amplitude *= 0.5
    value = np.clip(0.5 + NOISE_CONTRAST * (total / norm - 0.5), 0.0, 1.0)
    return np.round(value * 255.0) / 255.0


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class _Render:
    intensity: np.ndarray
    depth: np.ndarray
    box_mask: np.ndarray


def _camera_poses(spec: SyntheticSceneSpec) -> List[RigidTransform]:
    step = se3_exp(spec.camera_twist)
    poses = [RigidTransform.identity()]
    for _ in range(1, spec.frame_count):
        poses.append(step @ poses[-1])
    return poses


def _box_poses(spec: SyntheticSceneSpec) -> List[RigidTransform]:
    if spec.box is None:
        return []
    step = se3_exp(spec.box.twist)
    poses = [RigidTransform(np.eye(3), spec.box.center)]
    for _ in range(1, spec.frame_count):
        poses.append(poses[-1] @ step)
    return poses


def _render_frame(spec: SyntheticSceneSpec, pose: RigidTransform, box_pose: Optional[RigidTransform], index: int) -> _Render:
    K = spec.intrinsics
    u, v = pixel_grid(K)
    rays = np.stack(((u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)), axis=-1)
    to_world = pose.inverse()
    origin = to_world.translation
    dirs = rays @ to_world.rotation.T

    best = np.full(K.shape, np.inf)
    hit_box = np.zeros(K.shape, dtype=bool)
    with np.errstate(divide="ignore", invalid="ignore"):
        for plane in spec.planes:
            n = np.asarray(plane.normal)
            denom = dirs @ n
            s = (plane.offset - n @ origin) / denom
            closer = np.isfinite(s) & (s > 0) & (s < best)
            best = np.where(closer, s, best)

        if box_pose is not None:
            half = np.asarray(spec.box.size) / 2.0
            to_box = box_pose.inverse()
            local_origin = to_box.apply(origin)
            if np.all(np.abs(local_origin) < half):
                raise SyntheticSceneError("box", f"camera is inside the object at frame {index}")
            local_dirs = dirs @ to_box.rotation.T
            t1 = (-half - local_origin) / local_dirs
            t2 = (half - local_origin) / local_dirs
            t_near = np.nanmax(np.minimum(t1, t2), axis=-1)
            t_far = np.nanmin(np.maximum(t1, t2), axis=-1)
            box_hit = (t_far >= t_near) & (t_near > 0) & (t_near < best)
            best = np.where(box_hit, t_near, best)
            hit_box = box_hit

    hit = np.isfinite(best)
    depth = np.where(hit, best, 0.0)
    if np.any(hit & ((depth <= MIN_DEPTH) | (depth >= MAX_DEPTH))):
        raise SyntheticSceneError(
            "plane", f"frame {index} has depths outside ({MIN_DEPTH}, {MAX_DEPTH}) m"
        )

    world = origin + dirs * depth[..., None]
    intensity = value_noise(world, spec.texture_seed, spec.texture_scale)
    if box_pose is not None and np.any(hit_box):
        local = box_pose.inverse().apply(world[hit_box]) + BOX_TEXTURE_OFFSET
        intensity[hit_box] = value_noise(local, spec.texture_seed, spec.texture_scale)
    intensity = np.where(hit, intensity, 0.0)
    return _Render(intensity, depth, hit_box)


def _pair_flow(
    spec: SyntheticSceneSpec,
    render: _Render,
    relative: RigidTransform,
    object_motion: Optional[RigidTransform],
) -> FlowField:
    """Analytic flow: project each surface point's true motion into the next frame.

    ``relative`` maps frame-k camera coordinates to frame-(k+1) ones for static
    points; ``object_motion`` is the box's motion expressed in frame-k camera
    coordinates.
    """
    K = spec.intrinsics
    points, valid = backproject_depth(render.depth, K)
    u0, v0 = pixel_grid(K)
    du = np.zeros(K.shape)
    dv = np.zeros(K.shape)
    ok = valid.copy()

    groups = [(valid & ~render.box_mask, relative)]
    if object_motion is not None:
        groups.append((valid & render.box_mask, relative @ object_motion))
    for mask, motion in groups:
        if not np.any(mask) or motion.is_identity():
            continue
        moved = motion.apply(points[mask])
        u1, v1 = project_points(moved, K)
        front = np.isfinite(u1)
        du[mask] = np.where(front, u1 - u0[mask], 0.0)
        dv[mask] = np.where(front, v1 - v0[mask], 0.0)
        sub = ok[mask]
        sub &= front
        ok[mask] = sub
    return FlowField(du, dv, ok)


def generate_synthetic_sequence(spec: SyntheticSceneSpec) -> Tuple[List[RgbdFrame], GroundTruth]:
    """Render every frame and derive ground-truth poses, flows and masks."""
    spec.validate()
    poses = _camera_poses(spec)
    box_poses = _box_poses(spec)

    def render(k: int) -> _Render:
        return _render_frame(spec, poses[k], box_poses[k] if box_poses else None, k)

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        renders = list(pool.map(render, range(spec.frame_count)))

    if spec.box is not None and not np.any(renders[0].box_mask):
        raise SyntheticSceneError("box.center", "object is not visible in frame 0")

    stamps = spec.timestamps()
    frames = [
        RgbdFrame(stamps[k], r.intensity, r.depth, spec.intrinsics) for k, r in enumerate(renders)
    ]

    step = se3_exp(spec.camera_twist)
    object_step = se3_exp(spec.box.twist) if spec.box is not None else None
    flows: List[FlowField] = []
    relative: List[RigidTransform] = []
    for k in range(spec.frame_count - 1):
        object_motion = None
        if object_step is not None and not object_step.is_identity():
            # box motion O_{k+1} O_k^-1 seen from camera k
            world_motion = box_poses[k] @ object_step @ box_poses[k].inverse()
            object_motion = poses[k] @ world_motion @ poses[k].inverse()
        flows.append(_pair_flow(spec, renders[k], step, object_motion))
        relative.append(step)

    truth = GroundTruth(
        poses=tuple(poses),
        flows=tuple(flows),
        masks=tuple(r.box_mask for r in renders),
        relative=tuple(relative),
    )
    logger.info("Rendered %d synthetic frame(s) at %dx%d", len(frames),
                spec.intrinsics.width, spec.intrinsics.height)
    return frames, truth


# ---------------------------------------------------------------------------
# Bundled scenes
# ---------------------------------------------------------------------------

def default_intrinsics(width: int = 320, height: int = 240) -> PinholeIntrinsics:
    focal = 250.0 * width / 320.0
    return PinholeIntrinsics(focal, focal, (width - 1) / 2.0, (height - 1) / 2.0, width, height)


def room_planes(wall_depth: float = 3.0, floor_height: float = 0.8) -> Tuple[Plane, ...]:
    """Back wall facing the camera plus a floor (y points down)."""
    return (Plane((0.0, 0.0, 1.0), wall_depth), Plane((0.0, 1.0, 0.0), floor_height))


def static_scene_spec(
    frame_count: int = 10,
    camera_twist: Optional[Twist] = None,
    intrinsics: Optional[PinholeIntrinsics] = None,
    seed: int = 7,
) -> SyntheticSceneSpec:
    """Textured room seen by a camera moving on a gentle arc."""
    if camera_twist is None:
        camera_twist = Twist(v=(0.025, 0.005, 0.01), omega=(0.004, -0.008, 0.002))
    return SyntheticSceneSpec(
        intrinsics=intrinsics or default_intrinsics(),
        planes=room_planes(),
        camera_twist=camera_twist,
        texture_seed=seed,
        frame_count=frame_count,
    )


def moving_box_scene_spec(
    frame_count: int = 10,
    camera_twist: Optional[Twist] = None,
    box_twist: Optional[Twist] = None,
    intrinsics: Optional[PinholeIntrinsics] = None,
    seed: int = 7,
) -> SyntheticSceneSpec:
    """Room plus a box covering roughly a quarter of the image, sliding sideways."""
    if camera_twist is None:
        camera_twist = Twist(v=(0.01, 0.0, 0.005), omega=(0.0, 0.003, 0.0))
    if box_twist is None:
        box_twist = Twist(v=(0.05, 0.0, 0.0))
    return SyntheticSceneSpec(
        intrinsics=intrinsics or default_intrinsics(),
        planes=room_planes(),
        box=BoxSpec(center=(0.0, 0.0, 1.5), size=(0.8, 0.6, 0.4), twist=box_twist),
        camera_twist=camera_twist,
        texture_seed=seed,
        frame_count=frame_count,
    )


# ---------------------------------------------------------------------------
# key=value scene files
# ---------------------------------------------------------------------------

def _floats(text: str, count: int, key: str, line: int, source: str) -> List[float]:
    try:
        values = [float(x) for x in text.split()]
    except ValueError:
        raise ConfigError(f"{key}: expected {count} numbers, got {text!r}", line, source) from None
    if len(values) != count:
        raise ConfigError(f"{key}: expected {count} numbers, got {len(values)}", line, source)
    return values


def parse_scene_spec(text: str, source: str = "<spec>") -> SyntheticSceneSpec:
    values: Dict[str, Tuple[str, int]] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected key=value, got {line!r}", number, source)
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = (value, number)

    def take(key: str, count: int) -> Optional[List[float]]:
        if key not in values:
            return None
        value, line = values.pop(key)
        return _floats(value, count, key, line, source)

    intr = take("intrinsics", 6)
    if intr is None:
        raise SyntheticSceneError("intrinsics", "missing")
    try:
        intrinsics = PinholeIntrinsics(intr[0], intr[1], intr[2], intr[3], int(intr[4]), int(intr[5]))
    except ValueError as exc:
        raise SyntheticSceneError("intrinsics", str(exc)) from None

    plane_keys = sorted((k for k in values if k.startswith("plane.")), key=lambda k: k.split(".", 1)[1])
    planes = []
    for key in plane_keys:
        n = take(key, 4)
        planes.append(Plane((n[0], n[1], n[2]), n[3]))

    box = None
    center = take("box.center", 3)
    size = take("box.size", 3)
    box_twist = take("box.twist", 6)
    if center is not None or size is not None:
        if center is None or size is None:
            raise SyntheticSceneError("box", "box.center and box.size must be given together")
        box = BoxSpec(tuple(center), tuple(size), Twist.from_vector(box_twist or [0.0] * 6))

    camera = take("camera.twist", 6)
    scalars = {}
    for key, cast in (("frame_count", int), ("seed", int), ("frame_rate", float), ("texture_scale", float)):
        if key in values:
            value, line = values.pop(key)
            try:
                scalars[key] = cast(value)
            except ValueError:
                raise ConfigError(f"{key}: bad value {value!r}", line, source) from None
    if values:
        key, (_, line) = next(iter(values.items()))
        raise ConfigError(f"unknown key {key!r}", line, source)

    spec = SyntheticSceneSpec(
        intrinsics=intrinsics,
        planes=tuple(planes),
        box=box,
        camera_twist=Twist.from_vector(camera or [0.0] * 6),
        texture_seed=scalars.get("seed", 0),
        frame_count=scalars.get("frame_count", 10),
        frame_rate=scalars.get("frame_rate", 30.0),
        texture_scale=scalars.get("texture_scale", 0.16),
    )
    spec.validate()
    return spec


def load_scene_spec(path: PathLike) -> SyntheticSceneSpec:
    path = Path(path)
    return parse_scene_spec(path.read_text(encoding="utf-8"), source=str(path))


def dump_scene_spec(spec: SyntheticSceneSpec) -> str:
    def fmt(values) -> str:
        return " ".join(repr(float(x)) for x in values)

    K = spec.intrinsics
    lines = [
        f"frame_count={spec.frame_count}",
        f"frame_rate={spec.frame_rate!r}",
        f"seed={spec.texture_seed}",
        f"texture_scale={spec.texture_scale!r}",
        f"intrinsics={fmt([K.fx, K.fy, K.cx, K.cy])} {K.width} {K.height}",
        f"camera.twist={fmt(spec.camera_twist.vector)}",
    ]
    for i, plane in enumerate(spec.planes):
        lines.append(f"plane.{i}={fmt(list(plane.normal) + [plane.offset])}")
    if spec.box is not None:
        lines.append(f"box.center={fmt(spec.box.center)}")
        lines.append(f"box.size={fmt(spec.box.size)}")
        lines.append(f"box.twist={fmt(spec.box.twist.vector)}")
    return "\n".join(lines) + "\n"
