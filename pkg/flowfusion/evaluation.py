"""Trajectory accuracy: rigid alignment, absolute trajectory error and relative pose error.

Both metrics are translational. ATE compares positions after a least-squares
rigid alignment (no scale, RGB-D is metric); RPE compares relative motions
over a fixed interval and reports metres per second.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np

from .dataset_io import DEFAULT_MAX_TIME_DIFF, associate_timestamps
from .errors import InsufficientDataError, ParameterError
from .geometry import RigidTransform
from .trajectory import Trajectory

logger = logging.getLogger(__name__)

MIN_ALIGNMENT_PAIRS = 3
COLLINEAR_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class MetricReport:
    """Statistics of a translational error series (m for ATE, m/s for RPE)."""

    timestamps: np.ndarray
    errors: np.ndarray
    alignment: RigidTransform = field(default_factory=RigidTransform.identity)
    degenerate: bool = False

    @property
    def count(self) -> int:
        return int(self.errors.size)

    @property
    def rmse(self) -> float:
        return float(np.sqrt(np.mean(self.errors ** 2)))

    @property
    def mean(self) -> float:
        return float(np.mean(self.errors))

    @property
    def median(self) -> float:
        return float(np.median(self.errors))

    @property
    def max(self) -> float:
        return float(np.max(self.errors))


# ---------------------------------------------------------------------------
# Association and alignment
# ---------------------------------------------------------------------------

def associate_trajectories(
    est: Trajectory, gt: Trajectory, max_time_diff: float = DEFAULT_MAX_TIME_DIFF
) -> List[Tuple[int, int]]:
    """``(est_index, gt_index)`` pairs matched by nearest timestamp."""
    return associate_timestamps(est.timestamps, gt.timestamps, max_time_diff)


def align_trajectories(est: Trajectory, gt: Trajectory, max_time_diff: float = DEFAULT_MAX_TIME_DIFF) -> RigidTransform:
    """Rigid transform ``T`` minimising ``sum ||T p_est - p_gt||^2`` over associated positions."""
    transform, _ = _align(est, gt, associate_trajectories(est, gt, max_time_diff))
    return transform


def _align(est: Trajectory, gt: Trajectory, pairs: List[Tuple[int, int]]) -> Tuple[RigidTransform, bool]:
    if len(pairs) < MIN_ALIGNMENT_PAIRS:
        raise InsufficientDataError(f"alignment needs at least {MIN_ALIGNMENT_PAIRS} associated poses, got {len(pairs)}")
    idx_e = [i for i, _ in pairs]
    idx_g = [j for _, j in pairs]
    p = est.positions()[idx_e]
    q = gt.positions()[idx_g]
    mu_p = p.mean(axis=0)
    mu_q = q.mean(axis=0)
    cov = (q - mu_q).T @ (p - mu_p)
    U, s, Vt = np.linalg.svd(cov)
    fix = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        fix[2, 2] = -1.0
    R = U @ fix @ Vt
    t = mu_q - R @ mu_p

    degenerate = s[1] <= COLLINEAR_TOL * max(s[0], 1.0)
    if degenerate:
        logger.warning("Trajectory positions are (nearly) collinear; alignment is not unique")
    return RigidTransform(R, t), bool(degenerate)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def compute_ate(
    est: Trajectory,
    gt: Trajectory,
    align: bool = True,
    max_time_diff: float = DEFAULT_MAX_TIME_DIFF,
) -> MetricReport:
    """Absolute trajectory error per associated timestamp.

    ``align=False`` skips the alignment and compares raw positions.
    """
    pairs = associate_trajectories(est, gt, max_time_diff)
    if align:
        transform, degenerate = _align(est, gt, pairs)
    else:
        if not pairs:
            raise InsufficientDataError("no associated poses between the trajectories")
        transform, degenerate = RigidTransform.identity(), False
    idx_e = [i for i, _ in pairs]
    idx_g = [j for _, j in pairs]
    moved = transform.apply(est.positions()[idx_e])
    errors = np.linalg.norm(moved - gt.positions()[idx_g], axis=1)
    stamps = np.array([est.timestamps[i] for i in idx_e])
    return MetricReport(stamps, errors, transform, degenerate)


def compute_rpe(
    est: Trajectory,
    gt: Trajectory,
    delta: float = 1.0,
    max_time_diff: float = DEFAULT_MAX_TIME_DIFF,
) -> MetricReport:
    """Relative pose error over ``delta`` seconds, divided by ``delta``.

    For each associated timestamp ``t`` whose partner ``t + delta`` is
    associated as well, ``E = (Q_t^-1 Q_t+d)^-1 (P_t^-1 P_t+d)`` with ``Q``
    ground truth and ``P`` the estimate.
    """
    if not delta > 0:
        raise ParameterError(f"RPE interval must be positive, got {delta}")
    pairs = associate_trajectories(est, gt, max_time_diff)
    stamps = np.array([est.timestamps[i] for i, _ in pairs])

    times, errors = [], []
    for k, (i, j) in enumerate(pairs):
        if stamps.size == 0:
            break
        target = stamps[k] + delta
        m = int(np.argmin(np.abs(stamps - target)))
        if abs(stamps[m] - target) > max_time_diff or m == k:
            continue
        i2, j2 = pairs[m]
        est_rel = est.poses[i].inverse() @ est.poses[i2]
        gt_rel = gt.poses[j].inverse() @ gt.poses[j2]
        error = gt_rel.inverse() @ est_rel
        times.append(stamps[k])
        errors.append(float(np.linalg.norm(error.translation)) / delta)

    if not errors:
        raise InsufficientDataError(f"no pose pairs {delta} s apart in both trajectories")
    return MetricReport(np.array(times), np.array(errors))


# ---------------------------------------------------------------------------
# Reporting
# ---------------------------------------------------------------------------

def write_error_csv(report: MetricReport, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["timestamp", "error"])
        for stamp, error in zip(report.timestamps, report.errors):
            writer.writerow([f"{stamp:.6f}", f"{error:.9f}"])


def summary_line(ate: MetricReport, rpe: MetricReport) -> str:
    return f"ate_rmse={ate.rmse:.6f} rpe_rmse={rpe.rmse:.6f}"
