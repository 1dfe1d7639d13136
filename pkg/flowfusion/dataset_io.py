"""TUM RGB-D sequence loading and writing, .flo flow files, PNG exports."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import cv2
import numpy as np

from .errors import DatasetError, DimensionMismatchError, FlowFormatError
from .frames import FlowField, RgbdFrame
from .geometry import PinholeIntrinsics, RigidTransform
from .trajectory import Trajectory, read_trajectory_file, write_trajectory_file

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

TUM_DEPTH_SCALE = 5000.0
DEFAULT_MAX_TIME_DIFF = 0.02
LUMA_WEIGHTS = (0.299, 0.587, 0.114)  # R, G, B

FLO_MAGIC = 202021.25
FLO_UNKNOWN = 1e10
FLO_UNKNOWN_THRESH = 1e9

# Published freiburg calibrations; the ROS default is used otherwise.
TUM_CALIBRATIONS: Dict[str, Tuple[float, float, float, float]] = {
    "freiburg1": (517.3, 516.5, 318.6, 255.3),
    "freiburg2": (520.9, 521.0, 325.1, 249.7),
    "freiburg3": (535.4, 539.2, 320.1, 247.6),
}
DEFAULT_CALIBRATION = (525.0, 525.0, 319.5, 239.5)


@dataclass
class TumSequence:
    """Loaded frames with their (optional) ground-truth camera-to-world poses."""

    frames: List[RgbdFrame] = field(default_factory=list)
    poses: List[Optional[RigidTransform]] = field(default_factory=list)
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.frames)

    def __iter__(self) -> Iterator[Tuple[RgbdFrame, Optional[RigidTransform]]]:
        return iter(zip(self.frames, self.poses))

    def ground_truth(self) -> Optional[Trajectory]:
        """Trajectory of the frames that have a ground-truth pose, if any."""
        pairs = [(f.timestamp, p) for f, p in self if p is not None]
        if not pairs:
            return None
        return Trajectory(tuple(t for t, _ in pairs), tuple(p for _, p in pairs))


# ---------------------------------------------------------------------------
# Association
# ---------------------------------------------------------------------------

def associate_timestamps(
    first: Sequence[float], second: Sequence[float], max_time_diff: float = DEFAULT_MAX_TIME_DIFF
) -> List[Tuple[int, int]]:
    """Greedy nearest-timestamp association.

    Candidate pairs within ``max_time_diff`` are taken in order of increasing
    time difference; each index is used at most once. The result is sorted by
    the first sequence's index. Ties go to the smaller index sum, then to
    the smaller first-sequence index.
    """
    a = np.asarray(first, dtype=float)
    b = np.asarray(second, dtype=float)
    if a.size == 0 or b.size == 0:
        return []
    diff = np.abs(a[:, None] - b[None, :])
    ia, ib = np.nonzero(diff <= max_time_diff)
    order = np.lexsort((ia, ia + ib, diff[ia, ib]))
    used_a, used_b = set(), set()
    pairs: List[Tuple[int, int]] = []
    for k in order:
        i, j = int(ia[k]), int(ib[k])
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        pairs.append((i, j))
    return sorted(pairs)


# ---------------------------------------------------------------------------
# TUM sequences
# ---------------------------------------------------------------------------

def read_index_file(path: PathLike) -> List[Tuple[float, str]]:
    """Parse a TUM "timestamp filename" index, skipping comments."""
    entries: List[Tuple[float, str]] = []
    with open(path, "r", encoding="utf-8") as f:
        for number, raw in enumerate(f, start=1):
            text = raw.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split()
            if len(parts) < 2:
                raise DatasetError(f"{path}: line {number}: expected 'timestamp filename'")
            try:
                entries.append((float(parts[0]), parts[1]))
            except ValueError:
                raise DatasetError(f"{path}: line {number}: bad timestamp {parts[0]!r}") from None
    return entries


def read_intrinsics_file(path: PathLike) -> PinholeIntrinsics:
    with open(path, "r", encoding="utf-8") as f:
        values = [v for line in f if not line.strip().startswith("#") for v in line.split()]
    if len(values) != 6:
        raise DatasetError(f"{path}: expected 'fx fy cx cy width height'")
    fx, fy, cx, cy = (float(v) for v in values[:4])
    return PinholeIntrinsics(fx, fy, cx, cy, int(values[4]), int(values[5]))


def guess_intrinsics(directory: PathLike, width: int, height: int) -> PinholeIntrinsics:
    """``intrinsics.txt`` if present, else a freiburg calibration by name."""
    directory = Path(directory)
    explicit = directory / "intrinsics.txt"
    if explicit.exists():
        return read_intrinsics_file(explicit)
    name = directory.name.lower()
    calib = next((c for key, c in TUM_CALIBRATIONS.items() if key in name), DEFAULT_CALIBRATION)
    return PinholeIntrinsics(*calib, width=width, height=height)


def read_intensity_png(path: PathLike) -> np.ndarray:
    """8-bit colour (or grey) image -> luma intensity in [0, 1]."""
    image = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if image is None:
        raise DatasetError(f"cannot read image {path}")
    if image.ndim == 2:
        return image.astype(float) / 255.0
    b, g, r = (image[..., k].astype(float) for k in range(3))
    wr, wg, wb = LUMA_WEIGHTS
    return np.clip((wr * r + wg * g + wb * b) / 255.0, 0.0, 1.0)


def read_depth_png(path: PathLike) -> np.ndarray:
    """16-bit TUM depth image -> metres (0 stays "invalid")."""
    image = cv2.imread(str(path), cv2.IMREAD_ANYDEPTH)
    if image is None:
        raise DatasetError(f"cannot read depth image {path}")
    if image.dtype != np.uint16:
        raise DatasetError(f"depth image {path} is {image.dtype}, expected 16-bit")
    return image.astype(float) / TUM_DEPTH_SCALE


def load_tum_sequence(
    directory: PathLike,
    max_time_diff: float = DEFAULT_MAX_TIME_DIFF,
    intrinsics: Optional[PinholeIntrinsics] = None,
) -> TumSequence:
    """Load a TUM-layout RGB-D sequence.

    rgb and depth entries are associated greedily by nearest timestamp;
    unmatched entries are dropped. Unreadable images are skipped and counted
    in ``TumSequence.skipped``. Ground-truth poses (camera-to-world) are
    attached when ``groundtruth.txt`` has an entry within ``max_time_diff``.
    """
    directory = Path(directory)
    rgb_index = directory / "rgb.txt"
    depth_index = directory / "depth.txt"
    for index in (rgb_index, depth_index):
        if not index.exists():
            raise DatasetError(f"missing index file {index}")

    rgb = read_index_file(rgb_index)
    depth = read_index_file(depth_index)
    pairs = associate_timestamps([t for t, _ in rgb], [t for t, _ in depth], max_time_diff)

    gt: Optional[Trajectory] = None
    gt_path = directory / "groundtruth.txt"
    if gt_path.exists():
        gt = read_trajectory_file(gt_path)

    sequence = TumSequence()
    for i, j in sorted(pairs, key=lambda p: rgb[p[0]][0]):
        stamp, rgb_name = rgb[i]
        try:
            image = read_intensity_png(directory / rgb_name)
            depth_m = read_depth_png(directory / depth[j][1])
            if image.shape != depth_m.shape:
                raise DatasetError(f"{rgb_name} and {depth[j][1]} differ in size")
            K = intrinsics or guess_intrinsics(directory, image.shape[1], image.shape[0])
            frame = RgbdFrame(stamp, image, depth_m, K)
        except DatasetError as exc:
            logger.warning("Skipping entry at t=%.6f: %s", stamp, exc)
            sequence.skipped += 1
            continue
        intrinsics = K
        sequence.frames.append(frame)

    if gt is not None and sequence.frames:
        matches = dict(
            associate_timestamps([f.timestamp for f in sequence.frames], gt.timestamps, max_time_diff)
        )
        sequence.poses = [gt.poses[matches[k]] if k in matches else None for k in range(len(sequence.frames))]
    else:
        sequence.poses = [None] * len(sequence.frames)

    if sequence.skipped:
        logger.warning("Skipped %d unreadable entr%s in %s", sequence.skipped,
                       "y" if sequence.skipped == 1 else "ies", directory)
    logger.info("Loaded %d frame(s) from %s", len(sequence.frames), directory)
    return sequence


def write_tum_sequence(
    directory: PathLike,
    frames: Sequence[RgbdFrame],
    poses: Optional[Sequence[RigidTransform]] = None,
) -> None:
    """Write frames in TUM layout so ``load_tum_sequence`` reads them back.

    Intensity is stored as grey 8-bit RGB, depth as 16-bit millimetre/5.
    ``poses`` are camera-to-world and go to ``groundtruth.txt``.
    """
    directory = Path(directory)
    (directory / "rgb").mkdir(parents=True, exist_ok=True)
    (directory / "depth").mkdir(parents=True, exist_ok=True)
    rgb_lines = ["# color images", "# timestamp filename"]
    depth_lines = ["# depth maps", "# timestamp filename"]
    for frame in frames:
        name = f"{frame.timestamp:.6f}.png"
        grey = np.round(frame.intensity * 255.0).astype(np.uint8)
        _imwrite(directory / "rgb" / name, cv2.merge([grey, grey, grey]))
        raw = np.round(frame.depth * TUM_DEPTH_SCALE)
        _imwrite(directory / "depth" / name, np.clip(raw, 0, 65535).astype(np.uint16))
        rgb_lines.append(f"{frame.timestamp:.6f} rgb/{name}")
        depth_lines.append(f"{frame.timestamp:.6f} depth/{name}")
    (directory / "rgb.txt").write_text("\n".join(rgb_lines) + "\n", encoding="utf-8")
    (directory / "depth.txt").write_text("\n".join(depth_lines) + "\n", encoding="utf-8")
    if frames:
        K = frames[0].intrinsics
        (directory / "intrinsics.txt").write_text(
            f"{K.fx!r} {K.fy!r} {K.cx!r} {K.cy!r} {K.width} {K.height}\n", encoding="utf-8"
        )
    if poses is not None:
        trajectory = Trajectory(tuple(f.timestamp for f in frames), tuple(poses))
        write_trajectory_file(trajectory, directory / "groundtruth.txt", header="timestamp tx ty tz qx qy qz qw")


# ---------------------------------------------------------------------------
# Middlebury .flo
# ---------------------------------------------------------------------------

def write_flow_file(field: FlowField, path: PathLike) -> None:
    """Little-endian .flo: float32 magic, int32 width, int32 height, (u, v) float32 pairs.

    Readers treat any component with magnitude >= 1e9 as unknown, so such
    values (after float32 rounding) are written as invalid with the 1e10
    sentinel. Every file this writes reads back and rewrites bit-exactly.
    """
    h, w = field.shape
    with np.errstate(over="ignore"):
        u = field.u.astype("<f4")
        v = field.v.astype("<f4")
    known = field.valid & (np.abs(u) < FLO_UNKNOWN_THRESH) & (np.abs(v) < FLO_UNKNOWN_THRESH)
    data = np.empty((h, w, 2), dtype="<f4")
    data[..., 0] = np.where(known, u, FLO_UNKNOWN)
    data[..., 1] = np.where(known, v, FLO_UNKNOWN)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(np.array([FLO_MAGIC], dtype="<f4").tobytes())
        f.write(np.array([w, h], dtype="<i4").tobytes())
        f.write(data.tobytes())


def read_flow_file(path: PathLike, expected_shape: Optional[Tuple[int, int]] = None) -> FlowField:
    """Components with magnitude >= 1e9, or non-finite, mark a pixel invalid."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12:
        raise FlowFormatError(f"{path}: file too short for a .flo header")
    magic = np.frombuffer(raw[:4], dtype="<f4")[0]
    if magic != np.float32(FLO_MAGIC):
        raise FlowFormatError(f"{path}: bad magic number {magic!r}")
    w, h = (int(x) for x in np.frombuffer(raw[4:12], dtype="<i4"))
    if w <= 0 or h <= 0:
        raise FlowFormatError(f"{path}: invalid size {w}x{h}")
    if expected_shape is not None and (h, w) != tuple(expected_shape):
        raise DimensionMismatchError(f"{path}: flow is {h}x{w}, expected {expected_shape[0]}x{expected_shape[1]}")
    payload = raw[12:]
    if len(payload) != h * w * 8:
        raise FlowFormatError(f"{path}: payload is {len(payload)} bytes, expected {h * w * 8}")
    data = np.frombuffer(payload, dtype="<f4").reshape(h, w, 2).astype(float)
    u, v = data[..., 0], data[..., 1]
    valid = (np.abs(u) < FLO_UNKNOWN_THRESH) & (np.abs(v) < FLO_UNKNOWN_THRESH)
    return FlowField(u, v, valid)


def flow_file_name(index_a: int, index_b: int) -> str:
    return f"flow_{index_a}_{index_b}.flo"


# ---------------------------------------------------------------------------
# PNG exports
# ---------------------------------------------------------------------------

def write_mask_png(mask: np.ndarray, path: PathLike) -> None:
    """Binary mask as 8-bit PNG: 0 static / 255 dynamic."""
    _imwrite(path, np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8))


def read_mask_png(path: PathLike) -> np.ndarray:
    image = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if image is None:
        raise DatasetError(f"cannot read mask {path}")
    return image > 127


def write_label_png(labels: np.ndarray, path: PathLike) -> None:
    """Cluster labels as 16-bit PNG, label + 1 (0 = unlabelled)."""
    labels = np.asarray(labels)
    _imwrite(path, np.clip(labels + 1, 0, 65535).astype(np.uint16))


def _imwrite(path: PathLike, image: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), image):
        raise DatasetError(f"cannot write image {path}")
