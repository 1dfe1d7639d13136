"""End-to-end pair and sequence processing on rendered scenes."""

from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest

import flowfusion.core as core_module
from flowfusion.config import PipelineConfig
from flowfusion.core import FlowFusion
from flowfusion.dataset_io import flow_file_name, write_flow_file
from flowfusion.errors import ParameterError
from flowfusion.evaluation import compute_ate
from flowfusion.frames import FlowField, RgbdFrame
from flowfusion.geometry import Twist, se3_exp
from flowfusion.segmentation import ScoreVector
from flowfusion.vo_solver import solve_vo
from providers import ExactFlowProvider, FileFlowProvider

from conftest import make_frame, twist_error


def _fusion(truth, **overrides) -> FlowFusion:
    return FlowFusion(ExactFlowProvider(truth.flows), replace(PipelineConfig(), **overrides))


def _iou(mask: np.ndarray, truth: np.ndarray) -> float:
    return float(np.sum(mask & truth) / max(np.sum(mask | truth), 1))


class TestProcessPair:
    def test_identical_frames(self, static_pair):
        frames, _ = static_pair
        frame = frames[0]
        fusion = FlowFusion(ExactFlowProvider([FlowField.zeros(frame.shape)]))
        result = fusion.process_pair(frame, frame, index_a=0, index_b=1)
        assert result.twist.norm() < 1e-8
        assert not np.any(result.scores.b)
        assert result.outer_iterations == 1
        assert result.converged and not result.degraded

    def test_static_pair(self, static_pair):
        frames, truth = static_pair
        result = _fusion(truth).process_pair(frames[0], frames[1], index_a=0, index_b=1)
        assert result.outer_iterations <= 3
        assert np.all(result.scores.b < 0.1)
        assert not result.mask.any()
        assert twist_error(result.twist, truth.relative[0])[0] < 0.002

    def test_segmentation_is_inert_on_static_scenes(self, static_pair):
        frames, truth = static_pair
        with_seg = _fusion(truth).process_pair(frames[0], frames[1], index_a=0, index_b=1)
        without = _fusion(truth, segmentation_enabled=False).process_pair(frames[0], frames[1], index_a=0, index_b=1)
        t_diff, r_diff = twist_error(with_seg.twist, without.transform)
        assert t_diff < 0.001
        assert r_diff < 0.05

    def test_moving_box_is_found_and_ignored(self, box_pair):
        frames, truth = box_pair
        result = _fusion(truth).process_pair(frames[0], frames[1], index_a=0, index_b=1)
        assert result.outer_iterations <= 8
        assert _iou(result.mask, truth.masks[0]) >= 0.8
        final = twist_error(result.twist, truth.relative[0])[0]
        initial = twist_error(result.initial_twist, truth.relative[0])[0]
        assert final < initial

    def test_disabled_segmentation_is_plain_vo(self, box_pair):
        frames, truth = box_pair
        result = _fusion(truth, segmentation_enabled=False).process_pair(frames[0], frames[1], index_a=0, index_b=1)
        plain = solve_vo(frames[0], frames[1])
        np.testing.assert_array_equal(result.twist.vector, plain.twist.vector)
        assert not np.any(result.scores.b)
        assert result.outer_iterations == 0

    def test_outer_iterations_respect_cap(self, box_pair):
        frames, truth = box_pair
        result = _fusion(truth, max_outer_iterations=1).process_pair(frames[0], frames[1], index_a=0, index_b=1)
        assert result.outer_iterations == 1

    def test_deterministic(self, box_pair):
        frames, truth = box_pair
        first = _fusion(truth).process_pair(frames[0], frames[1], index_a=0, index_b=1)
        second = _fusion(truth).process_pair(frames[0], frames[1], index_a=0, index_b=1)
        np.testing.assert_array_equal(first.twist.vector, second.twist.vector)
        np.testing.assert_array_equal(first.scores.b, second.scores.b)
        np.testing.assert_array_equal(first.mask, second.mask)

    def test_missing_depth_returns_prior(self):
        prior = Twist(v=(0.01, 0.0, 0.0))
        result = FlowFusion(ExactFlowProvider([])).process_pair(make_frame(0.0), make_frame(2.0), prior, index_a=0, index_b=1)
        assert result.degraded and not result.converged
        assert result.twist == prior
        assert not result.mask.any()

    def test_stage_timings_are_recorded(self, static_pair):
        frames, truth = static_pair
        fusion = _fusion(truth)
        fusion.process_pair(frames[0], frames[1], index_a=0, index_b=1)
        assert {"clustering", "vo", "flow", "segmentation"} <= set(fusion.timings)

    def test_missing_flow_file_returns_prior(self, static_pair, tmp_path):
        frames, _ = static_pair
        prior = Twist(v=(0.01, 0.0, 0.0))
        result = FlowFusion(FileFlowProvider(tmp_path)).process_pair(frames[0], frames[1], prior, index_a=0, index_b=1)
        assert result.degraded and not result.converged
        assert result.twist == prior
        assert "flow_0_1.flo" in result.message


class TestOuterConvergence:
    """The loop stops only once the scores and the pose have both settled."""

    def test_settled_pose_with_moving_scores_runs_to_cap(self, static_pair, monkeypatch):
        frames, _ = static_pair
        frame = frames[0]
        real_segment = core_module.segment_clusters
        calls = {"n": 0}

        def flickering_scores(clusters, *args, **kwargs):
            seg = real_segment(clusters, *args, **kwargs)
            calls["n"] += 1
            level = 0.5 if calls["n"] % 2 else 0.0
            return replace(seg, scores=ScoreVector(np.full(clusters.count, level)))

        monkeypatch.setattr(core_module, "segment_clusters", flickering_scores)
        fusion = FlowFusion(ExactFlowProvider([FlowField.zeros(frame.shape)]), PipelineConfig(max_outer_iterations=4))
        result = fusion.process_pair(frame, frame, index_a=0, index_b=1)
        assert all(it.step_norm < 1e-6 for it in result.iterations)
        assert all(it.max_score_change >= 1e-3 for it in result.iterations)
        assert result.outer_iterations == 4
        assert not result.converged

    def test_settled_scores_with_moving_pose_runs_to_cap(self, static_pair, monkeypatch):
        frames, _ = static_pair
        frame = frames[0]
        real_segment = core_module.segment_clusters
        real_solve = core_module.solve_vo
        calls = {"n": 0}

        def static_scores(clusters, *args, **kwargs):
            seg = real_segment(clusters, *args, **kwargs)
            return replace(seg, scores=ScoreVector.zeros(clusters.count))

        def creeping_solve(*args, **kwargs):
            result = real_solve(*args, **kwargs)
            calls["n"] += 1
            twist = Twist.from_vector(result.twist.vector + [calls["n"] * 1e-4, 0, 0, 0, 0, 0])
            return replace(result, twist=twist, transform=se3_exp(twist))

        monkeypatch.setattr(core_module, "segment_clusters", static_scores)
        monkeypatch.setattr(core_module, "solve_vo", creeping_solve)
        fusion = FlowFusion(ExactFlowProvider([FlowField.zeros(frame.shape)]), PipelineConfig(max_outer_iterations=4))
        result = fusion.process_pair(frame, frame, index_a=0, index_b=1)
        assert all(it.max_score_change < 1e-3 for it in result.iterations)
        assert all(it.step_norm >= 1e-6 for it in result.iterations)
        assert result.outer_iterations == 4
        assert not result.converged

    def test_both_settled_stops_at_once(self, static_pair):
        frames, _ = static_pair
        frame = frames[0]
        fusion = FlowFusion(ExactFlowProvider([FlowField.zeros(frame.shape)]), PipelineConfig(max_outer_iterations=4))
        result = fusion.process_pair(frame, frame, index_a=0, index_b=1)
        assert result.converged
        assert result.outer_iterations == 1


class TestProcessSequence:
    def test_identical_frames_stay_at_origin(self, static_pair):
        frames, _ = static_pair
        f = frames[0]
        pair = [f, RgbdFrame(1.0, f.intensity, f.depth, f.intrinsics)]
        result = FlowFusion(ExactFlowProvider([FlowField.zeros(f.shape)])).process_sequence(pair)
        assert len(result.trajectory) == 2
        for _, pose in result.trajectory:
            assert pose.is_identity()

    def test_static_orbit(self, static_sequence):
        frames, truth = static_sequence
        result = _fusion(truth).process_sequence(frames)
        assert not result.degraded_pairs
        assert all(np.all(p.scores.b < 0.1) for p in result.pairs)
        gt = truth.trajectory([f.timestamp for f in frames])
        assert compute_ate(result.trajectory, gt).rmse < 0.01

    def test_segmentation_halves_dynamic_error(self, box_sequence):
        frames, truth = box_sequence
        gt = truth.trajectory([f.timestamp for f in frames])
        with_seg = compute_ate(_fusion(truth).process_sequence(frames).trajectory, gt).rmse
        without = compute_ate(_fusion(truth, segmentation_enabled=False).process_sequence(frames).trajectory, gt).rmse
        assert with_seg <= 0.5 * without

    def test_needs_two_frames(self, static_pair):
        frames, truth = static_pair
        with pytest.raises(ParameterError):
            _fusion(truth).process_sequence(frames[:1])

    def test_degraded_pair_uses_constant_velocity(self, static_sequence):
        frames, truth = static_sequence
        f = frames[3]
        broken = list(frames[:4])
        broken[3] = RgbdFrame(f.timestamp, f.intensity, np.zeros(f.shape), f.intrinsics)
        result = _fusion(truth).process_sequence(broken)
        assert [p.degraded for p in result.pairs] == [False, False, True]
        assert result.pairs[2].twist == result.pairs[1].twist

    def test_missing_flow_file_degrades_one_pair(self, static_sequence, tmp_path):
        frames, truth = static_sequence
        for k in (0, 2):
            write_flow_file(truth.flows[k], tmp_path / flow_file_name(k, k + 1))
        result = FlowFusion(FileFlowProvider(tmp_path)).process_sequence(list(frames[:4]))
        assert [p.degraded for p in result.pairs] == [False, True, False]
        assert result.pairs[1].twist == result.pairs[0].twist
        assert len(result.trajectory) == 4
