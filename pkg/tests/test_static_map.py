"""Static background map accumulation."""

from __future__ import annotations

import numpy as np
import pytest

from flowfusion.errors import DimensionMismatchError, ParameterError
from flowfusion.geometry import RigidTransform, backproject_depth
from flowfusion.static_map import PointCloud, accumulate_static_map, write_point_cloud
from flowfusion.trajectory import Trajectory

from conftest import make_frame


def _at_origin(count: int) -> Trajectory:
    return Trajectory(tuple(float(k) for k in range(count)), tuple(RigidTransform.identity() for _ in range(count)))


class TestAccumulate:
    def test_single_static_frame(self, static_pair):
        frames, _ = static_pair
        frame = frames[0]
        cloud = accumulate_static_map([frame], _at_origin(1), [np.zeros(frame.shape, dtype=bool)], 0.05)
        points, valid = backproject_depth(frame.depth, frame.intrinsics)
        voxels = np.unique(np.floor(points[valid] / 0.05).astype(np.int64), axis=0)
        assert len(cloud) == len(voxels)
        assert np.all(cloud.intensities >= 0.0) and np.all(cloud.intensities <= 1.0)

    def test_duplicate_frames_add_nothing(self, static_pair):
        frames, _ = static_pair
        frame = frames[0]
        static = np.zeros(frame.shape, dtype=bool)
        once = accumulate_static_map([frame], _at_origin(1), [static], 0.05)
        twice = accumulate_static_map([frame, frame], _at_origin(2), [static, static], 0.05)
        assert len(once) == len(twice)
        np.testing.assert_allclose(np.sort(once.points, axis=0), np.sort(twice.points, axis=0), atol=1e-12)

    def test_masked_pixels_are_left_out(self):
        frame = make_frame(2.0)
        mask = np.zeros(frame.shape, dtype=bool)
        mask[:, : frame.shape[1] // 2] = True
        cloud = accumulate_static_map([frame], _at_origin(1), [mask], 0.01)
        assert len(cloud) > 0
        assert np.all(cloud.points[:, 0] > 0.0)

    def test_points_go_through_the_pose(self):
        frame = make_frame(2.0)
        shift = RigidTransform(np.eye(3), np.array([10.0, 0.0, 0.0]))
        trajectory = Trajectory((0.0,), (shift,))
        cloud = accumulate_static_map([frame], trajectory, [np.zeros(frame.shape, dtype=bool)], 0.01)
        assert np.all(cloud.points[:, 0] > 9.0)
        np.testing.assert_allclose(cloud.points[:, 2], 2.0, atol=0.01)

    def test_everything_dynamic_gives_empty_cloud(self):
        frame = make_frame(2.0)
        cloud = accumulate_static_map([frame], _at_origin(1), [np.ones(frame.shape, dtype=bool)], 0.05)
        assert cloud.is_empty

    def test_moving_box_leaves_no_trace(self, box_sequence):
        frames, truth = box_sequence
        trajectory = truth.trajectory([f.timestamp for f in frames])
        cloud = accumulate_static_map(frames, trajectory, truth.masks, 0.02)
        # volume the box sweeps in the first camera's frame
        lo = np.array([-0.4, -0.3, 1.3])
        hi = np.array([0.4 + 0.05 * (len(frames) - 1), 0.3, 1.7])
        inside = np.all((cloud.points > lo) & (cloud.points < hi), axis=1)
        assert inside.mean() <= 0.02

    def test_lengths_must_align(self):
        frame = make_frame(2.0)
        with pytest.raises(DimensionMismatchError):
            accumulate_static_map([frame, frame], _at_origin(1), [np.zeros(frame.shape, dtype=bool)], 0.05)

    def test_mask_shape_must_match(self):
        frame = make_frame(2.0)
        with pytest.raises(DimensionMismatchError):
            accumulate_static_map([frame], _at_origin(1), [np.zeros((2, 2), dtype=bool)], 0.05)

    def test_voxel_size_must_be_positive(self):
        frame = make_frame(2.0)
        with pytest.raises(ParameterError):
            accumulate_static_map([frame], _at_origin(1), [np.zeros(frame.shape, dtype=bool)], 0.0)


class TestWritePointCloud:
    def test_ascii_layout(self, tmp_path):
        cloud = PointCloud(np.array([[0.0, 1.0, 2.0], [3.0, 4.0, 5.0]]), np.array([0.25, 0.5]))
        write_point_cloud(cloud, tmp_path / "map.txt")
        rows = np.loadtxt(tmp_path / "map.txt")
        np.testing.assert_allclose(rows, [[0.0, 1.0, 2.0, 0.25], [3.0, 4.0, 5.0, 0.5]])

    def test_empty_cloud_writes_empty_file(self, tmp_path):
        write_point_cloud(PointCloud.empty(), tmp_path / "map.txt")
        assert (tmp_path / "map.txt").read_text().strip() == ""
