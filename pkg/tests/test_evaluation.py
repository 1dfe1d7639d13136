"""Trajectory alignment, ATE and RPE."""

from __future__ import annotations

import csv

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from flowfusion.errors import InsufficientDataError, ParameterError
from flowfusion.evaluation import (
    align_trajectories,
    compute_ate,
    compute_rpe,
    summary_line,
    write_error_csv,
)
from flowfusion.geometry import RigidTransform
from flowfusion.trajectory import Trajectory


def _spiral(count: int = 100, rate: float = 10.0) -> Trajectory:
    """Non-degenerate camera-to-world trajectory sampled at ``rate`` Hz."""
    stamps = np.arange(count) / rate
    poses = []
    for t in stamps:
        rotation = Rotation.from_rotvec([0.1 * np.sin(t), 0.3 * t, 0.05 * t]).as_matrix()
        poses.append(RigidTransform(rotation, np.array([np.cos(t), np.sin(t), 0.2 * t])))
    return Trajectory(tuple(stamps), tuple(poses))


def _with_positions(trajectory: Trajectory, positions: np.ndarray) -> Trajectory:
    poses = tuple(RigidTransform(p.rotation, q) for p, q in zip(trajectory.poses, positions))
    return Trajectory(trajectory.timestamps, poses)


OFFSET = RigidTransform(Rotation.from_euler("xyz", [0.3, -0.5, 1.1]).as_matrix(), np.array([1.0, -2.0, 0.5]))


class TestAlignment:
    def test_identity_for_equal_trajectories(self):
        gt = _spiral()
        transform = align_trajectories(gt, gt)
        np.testing.assert_allclose(transform.matrix, np.eye(4), atol=1e-9)

    def test_recovers_inverse_offset(self):
        gt = _spiral()
        est = gt.transformed(OFFSET)
        transform = align_trajectories(est, gt)
        np.testing.assert_allclose(transform.matrix, OFFSET.inverse().matrix, atol=1e-9)

    def test_noisy_positions(self):
        gt = _spiral()
        noise = np.random.default_rng(0).normal(scale=0.01, size=(len(gt), 3))
        est = _with_positions(gt, gt.positions() + noise).transformed(OFFSET)
        assert compute_ate(est, gt).rmse <= 0.02

    def test_needs_three_pairs(self):
        gt = _spiral(count=2)
        with pytest.raises(InsufficientDataError):
            align_trajectories(gt, gt)

    def test_collinear_positions_are_flagged(self):
        stamps = tuple(float(k) for k in range(5))
        poses = tuple(RigidTransform(np.eye(3), np.array([float(k), 0.0, 0.0])) for k in range(5))
        line = Trajectory(stamps, poses)
        report = compute_ate(line, line)
        assert report.degenerate
        assert report.rmse == pytest.approx(0.0, abs=1e-9)


class TestAte:
    def test_identical(self):
        gt = _spiral()
        assert compute_ate(gt, gt).rmse == pytest.approx(0.0, abs=1e-12)

    def test_constant_shift_is_absorbed(self):
        gt = _spiral()
        est = _with_positions(gt, gt.positions() + [0.05, 0.0, 0.0])
        assert compute_ate(est, gt).rmse == pytest.approx(0.0, abs=1e-9)

    def test_invariant_under_global_transform(self):
        gt = _spiral()
        noise = np.random.default_rng(1).normal(scale=0.02, size=(len(gt), 3))
        est = _with_positions(gt, gt.positions() + noise)
        assert compute_ate(est.transformed(OFFSET), gt).rmse == pytest.approx(compute_ate(est, gt).rmse, abs=1e-9)

    def test_single_outlier_without_alignment(self):
        gt = _spiral()
        positions = gt.positions()
        positions[40] += [0.05, 0.0, 0.0]
        report = compute_ate(_with_positions(gt, positions), gt, align=False)
        assert report.rmse == pytest.approx(0.005, abs=1e-12)
        assert report.max == pytest.approx(0.05)
        assert report.median == 0.0

    def test_single_outlier_is_mostly_kept_by_alignment(self):
        gt = _spiral()
        positions = gt.positions()
        positions[40] += [0.05, 0.0, 0.0]
        report = compute_ate(_with_positions(gt, positions), gt)
        assert report.rmse == pytest.approx(0.005, rel=0.02)

    def test_only_associated_stamps_count(self):
        gt = _spiral()
        est = Trajectory(gt.timestamps[::2], gt.poses[::2])
        assert compute_ate(est, gt).count == 50


class TestRpe:
    def test_identical(self):
        gt = _spiral()
        assert compute_rpe(gt, gt).rmse == pytest.approx(0.0, abs=1e-12)

    def test_global_offset_is_invisible(self):
        gt = _spiral()
        assert compute_rpe(gt.transformed(OFFSET), gt).rmse == pytest.approx(0.0, abs=1e-9)

    def test_constant_drift(self):
        stamps = tuple(float(k) for k in range(11))
        gt = Trajectory(stamps, tuple(RigidTransform(np.eye(3), np.array([0.1 * k, 0.0, 0.0])) for k in range(11)))
        drift = Trajectory(stamps, tuple(RigidTransform(np.eye(3), np.array([0.11 * k, 0.0, 0.0])) for k in range(11)))
        report = compute_rpe(drift, gt, delta=1.0)
        assert report.count == 10
        assert report.rmse == pytest.approx(0.01, abs=1e-12)

    def test_swapping_keeps_the_magnitude(self):
        gt = _spiral()
        noise = np.random.default_rng(2).normal(scale=0.01, size=(len(gt), 3))
        est = _with_positions(gt, gt.positions() + noise)
        np.testing.assert_allclose(compute_rpe(est, gt).errors, compute_rpe(gt, est).errors, atol=1e-12)

    def test_interval_longer_than_trajectory(self):
        gt = _spiral(count=5)
        with pytest.raises(InsufficientDataError):
            compute_rpe(gt, gt, delta=10.0)

    def test_interval_must_be_positive(self):
        gt = _spiral()
        with pytest.raises(ParameterError):
            compute_rpe(gt, gt, delta=0.0)


class TestReporting:
    def test_summary_line(self):
        gt = _spiral()
        assert summary_line(compute_ate(gt, gt), compute_rpe(gt, gt)) == "ate_rmse=0.000000 rpe_rmse=0.000000"

    def test_error_csv(self, tmp_path):
        gt = _spiral()
        report = compute_rpe(gt, gt)
        write_error_csv(report, tmp_path / "rpe.csv")
        with open(tmp_path / "rpe.csv", newline="") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["timestamp", "error"]
        assert len(rows) == report.count + 1
