"""Cluster residuals, assignment/weighting functions and the score solve."""

from __future__ import annotations

import itertools
import math

import numpy as np
import pytest
from scipy.sparse.csgraph import connected_components

from flowfusion.clustering import AdjacencyGraph, ClusterSet, build_adjacency, cluster_frame
from flowfusion.config import SegmentationConfig
from flowfusion.errors import DegenerateSegmentationError, DimensionMismatchError, ParameterError
from flowfusion.flow import FlowResidualField, compute_ego_flow, compute_flow_residual
from flowfusion.segmentation import (
    ClusterResidual,
    ScoreVector,
    aggregate_cluster_residuals,
    assignment_g,
    dynamic_mask,
    pick_thresholds,
    score_energy,
    segment_clusters,
    solve_scores,
    weight_w,
)
from flowfusion.vo_solver import ResidualImages, compute_residuals

from conftest import make_frame

THETA_B, THETA_T = 0.05, 0.15


def _split_clusters() -> ClusterSet:
    """Pixel (0, 0) alone in cluster 0, everything else in cluster 1, at 2 m."""
    frame = make_frame(2.0)
    labels = np.ones(frame.shape, dtype=int)
    labels[0, 0] = 0
    return ClusterSet.from_labels(labels, frame, seed_resolution=1.0)


def _path_graph(n: int) -> AdjacencyGraph:
    return AdjacencyGraph(n, np.array([[i, i + 1] for i in range(n - 1)]))


def _random_graph(n: int, edges: int, seed: int) -> AdjacencyGraph:
    rng = np.random.default_rng(seed)
    pairs = rng.integers(0, n, size=(edges, 2))
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    return AdjacencyGraph(n, pairs)


def _grid_minimum(delta: np.ndarray, graph: AdjacencyGraph) -> np.ndarray:
    """Coarse-to-fine exhaustive grid search of the score energy over [0, 1]^n."""
    n = delta.size
    centre = np.full(n, 0.5)
    half, step = 0.5, 0.05
    while step >= 1e-4:
        axes = [np.clip(np.arange(c - half, c + half + step / 2, step), 0.0, 1.0) for c in centre]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n)
        g = assignment_g(delta, THETA_B, THETA_T)
        w = weight_w(delta, THETA_B, THETA_T)
        energy = np.sum(w * (grid - g) ** 2, axis=1)
        for i, j in graph.edges:
            energy += (grid[:, i] - grid[:, j]) ** 2
        centre = grid[np.argmin(energy)]
        half, step = 2 * step, step / 5
    return centre


# ── Residual aggregation ─────────────────────────────────────────────────

class TestAggregate:
    def test_mixed_residual_of_a_single_pixel(self):
        clusters = _split_clusters()
        shape = clusters.labels.shape
        r_i = np.zeros(shape)
        r_d = np.zeros(shape)
        r_f = np.zeros(shape)
        r_i[0, 0], r_d[0, 0], r_f[0, 0] = 0.1, 0.02, 5.0
        ones = np.ones(shape, dtype=bool)
        residual = aggregate_cluster_residuals(
            clusters,
            ResidualImages(r_i, r_d, ones),
            FlowResidualField(r_f, ones),
            SegmentationConfig(alpha_i=0.9, alpha_f=0.022),
        )
        assert residual.delta[0] == pytest.approx(0.21)
        assert residual.delta[1] == 0.0

    def test_signed_residuals_do_not_cancel(self):
        clusters = _split_clusters()
        shape = clusters.labels.shape
        r_i = np.where(np.indices(shape)[1] % 2 == 0, 0.1, -0.1)
        ones = np.ones(shape, dtype=bool)
        residual = aggregate_cluster_residuals(
            clusters, ResidualImages(r_i, np.zeros(shape), ones), FlowResidualField(np.zeros(shape), ones)
        )
        assert residual.delta[1] == pytest.approx(0.9 * 0.1)

    def test_zero_residuals(self):
        clusters = _split_clusters()
        shape = clusters.labels.shape
        ones = np.ones(shape, dtype=bool)
        residual = aggregate_cluster_residuals(
            clusters, ResidualImages(np.zeros(shape), np.zeros(shape), ones), FlowResidualField(np.zeros(shape), ones)
        )
        assert not np.any(residual.delta)
        assert not residual.flagged.any()

    def test_cluster_without_valid_pixels_is_flagged(self):
        clusters = _split_clusters()
        shape = clusters.labels.shape
        valid = np.ones(shape, dtype=bool)
        valid[0, 0] = False
        residual = aggregate_cluster_residuals(
            clusters,
            ResidualImages(np.full(shape, 0.3), np.zeros(shape), np.ones(shape, dtype=bool)),
            FlowResidualField(np.zeros(shape), valid),
        )
        assert residual.flagged.tolist() == [True, False]
        assert residual.delta[0] == 0.0
        assert residual.valid_counts[1] == valid.sum()

    def test_shapes_must_agree(self):
        clusters = _split_clusters()
        small = np.ones((2, 2), dtype=bool)
        with pytest.raises(DimensionMismatchError):
            aggregate_cluster_residuals(
                clusters, ResidualImages(np.zeros((2, 2)), np.zeros((2, 2)), small), FlowResidualField(np.zeros((2, 2)), small)
            )

    def test_box_clusters_stand_out(self, box_pair):
        frames, truth = box_pair
        clusters = cluster_frame(frames[0])
        residuals = compute_residuals(frames[0], frames[1], truth.relative[0])
        flow_residual = compute_flow_residual(truth.flows[0], compute_ego_flow(frames[0], truth.relative[0]))
        residual = aggregate_cluster_residuals(clusters, residuals, flow_residual)

        inside = np.bincount(clusters.labels[truth.masks[0] & (clusters.labels >= 0)], minlength=clusters.count)
        on_box = (inside > 0.5 * clusters.sizes) & ~residual.flagged
        background = (inside == 0) & ~residual.flagged
        assert on_box.any() and background.any()
        assert residual.delta[on_box].mean() > residual.delta[background].mean()


# ── g and w ──────────────────────────────────────────────────────────────

class TestAssignmentAndWeight:
    def test_g_at_thresholds(self):
        assert assignment_g(THETA_B, THETA_B, THETA_T) == 0.0
        assert assignment_g(THETA_T, THETA_B, THETA_T) == pytest.approx(1.0)
        assert assignment_g((THETA_B + THETA_T) / 2, THETA_B, THETA_T) == pytest.approx(0.5)

    def test_g_saturates(self):
        assert assignment_g(-1.0, THETA_B, THETA_T) == 0.0
        assert assignment_g(5.0, THETA_B, THETA_T) == 1.0

    def test_g_is_monotone(self):
        values = assignment_g(np.linspace(-0.1, 0.4, 100), THETA_B, THETA_T)
        assert np.all(np.diff(values) >= 0)

    def test_w_values(self):
        assert weight_w(THETA_B, THETA_B, THETA_T) == pytest.approx(1.0)
        assert weight_w(THETA_T, THETA_B, THETA_T) == pytest.approx(math.sqrt(2.0))
        assert weight_w(2 * THETA_T - THETA_B, THETA_B, THETA_T) == pytest.approx(math.sqrt(5.0))

    def test_w_is_at_least_one(self):
        assert np.all(weight_w(np.linspace(-1, 1, 50), THETA_B, THETA_T) >= 1.0)

    @pytest.mark.parametrize("fn", [assignment_g, weight_w])
    def test_thresholds_must_be_ordered(self, fn):
        with pytest.raises(ParameterError):
            fn(0.1, 0.2, 0.2)
        with pytest.raises(ParameterError):
            fn(0.1, 0.3, 0.2)


class TestPickThresholds:
    def test_adaptive_percentiles(self):
        residual = ClusterResidual(np.arange(1.0, 101.0), np.ones(100))
        low, high = pick_thresholds(residual, "adaptive")
        assert low == pytest.approx(50.5)
        assert high == pytest.approx(90.1)

    def test_adaptive_floor_when_all_equal(self):
        residual = ClusterResidual(np.full(5, 0.2), np.ones(5))
        low, high = pick_thresholds(residual, "adaptive")
        assert low == pytest.approx(0.2)
        assert high == pytest.approx(0.2 + 1e-6)

    @pytest.mark.parametrize("level", [1e6, 1e12, 1e300])
    def test_adaptive_gap_survives_huge_residuals(self, level):
        residual = ClusterResidual(np.full(6, level), np.ones(6))
        low, high = pick_thresholds(residual, "adaptive")
        assert high > low
        scores = solve_scores(residual, _path_graph(6), low, high)
        assert len(scores) == 6

    def test_fixed_passthrough(self):
        residual = ClusterResidual(np.array([0.0, 1.0]), np.ones(2))
        assert pick_thresholds(residual, "fixed", 0.1, 0.3) == (0.1, 0.3)

    def test_flagged_clusters_are_ignored(self):
        residual = ClusterResidual(np.array([0.0, 1.0, 0.0]), np.array([0, 4, 0]))
        with pytest.raises(DegenerateSegmentationError):
            pick_thresholds(residual, "adaptive")

    def test_unknown_mode(self):
        residual = ClusterResidual(np.array([0.0, 1.0]), np.ones(2))
        with pytest.raises(ParameterError):
            pick_thresholds(residual, "otsu")


# ── Score solve ──────────────────────────────────────────────────────────

class TestSolveScores:
    def test_single_cluster_takes_its_target(self):
        scores = solve_scores(np.array([0.12]), AdjacencyGraph.empty(1), THETA_B, THETA_T)
        assert scores.b[0] == pytest.approx(assignment_g(0.12, THETA_B, THETA_T))

    def test_no_edges_means_b_equals_g(self):
        delta = np.random.default_rng(3).uniform(0.0, 0.3, size=20)
        scores = solve_scores(delta, AdjacencyGraph.empty(20), THETA_B, THETA_T)
        np.testing.assert_allclose(scores.b, assignment_g(delta, THETA_B, THETA_T), atol=1e-12)

    def test_equal_neighbours_agree(self):
        scores = solve_scores(np.array([0.09, 0.09]), _path_graph(2), THETA_B, THETA_T)
        np.testing.assert_allclose(scores.b, assignment_g(0.09, THETA_B, THETA_T))

    def test_path_graph_matches_grid_search(self):
        delta = np.array([0.0, 0.02, 0.2, 0.3])
        np.testing.assert_allclose(assignment_g(delta, THETA_B, THETA_T), [0, 0, 1, 1])
        graph = _path_graph(4)
        scores = solve_scores(delta, graph, THETA_B, THETA_T)
        np.testing.assert_allclose(scores.b, _grid_minimum(delta, graph), atol=2e-3)

    @pytest.mark.parametrize("n", [1, 2, 3, 4])
    def test_every_small_connected_graph_matches_grid_search(self, n):
        delta = np.random.default_rng(40 + n).uniform(-0.05, 0.35, size=n)
        candidates = list(itertools.combinations(range(n), 2))
        checked = 0
        for k in range(len(candidates) + 1):
            for subset in itertools.combinations(candidates, k):
                graph = AdjacencyGraph(n, np.array(subset, dtype=np.int64).reshape(-1, 2))
                if connected_components(graph.matrix(), directed=False)[0] != 1:
                    continue
                scores = solve_scores(delta, graph, THETA_B, THETA_T)
                grid = _grid_minimum(delta, graph)
                assert score_energy(scores, delta, graph, THETA_B, THETA_T) <= (
                    score_energy(grid, delta, graph, THETA_B, THETA_T) + 1e-12
                )
                np.testing.assert_allclose(scores.b, grid, atol=2e-3)
                checked += 1
        assert checked == {1: 1, 2: 1, 3: 4, 4: 38}[n]

    def test_edge_pulls_scores_together(self):
        delta = np.array([0.0, 0.3])
        apart = solve_scores(delta, AdjacencyGraph.empty(2), THETA_B, THETA_T)
        joined = solve_scores(delta, _path_graph(2), THETA_B, THETA_T)
        assert joined.b[0] > apart.b[0]
        assert joined.b[1] < apart.b[1]

    def test_maximum_principle_needs_no_clamping(self):
        rng = np.random.default_rng(4)
        for seed in range(1000):
            n = int(rng.integers(2, 40))
            delta = rng.uniform(-0.1, 0.5, size=n)
            graph = _random_graph(n, int(rng.integers(0, 3 * n)), seed=seed)
            smoothness = float(rng.uniform(0.0, 5.0))
            scores = solve_scores(delta, graph, THETA_B, THETA_T, smoothness=smoothness)
            assert scores.clamped == 0, f"instance {seed}"
            g = assignment_g(delta, THETA_B, THETA_T)
            assert g.min() - 1e-9 <= scores.b.min() and scores.b.max() <= g.max() + 1e-9, f"instance {seed}"

    def test_no_perturbation_does_better(self):
        rng = np.random.default_rng(5)
        delta = rng.uniform(0.0, 0.3, size=30)
        graph = _random_graph(30, 60, seed=5)
        scores = solve_scores(delta, graph, THETA_B, THETA_T)
        best = score_energy(scores, delta, graph, THETA_B, THETA_T)
        for _ in range(1000):
            trial = np.clip(scores.b + rng.uniform(-1e-3, 1e-3, size=30), 0.0, 1.0)
            assert score_energy(trial, delta, graph, THETA_B, THETA_T) >= best - 1e-12

    def test_conjugate_gradient_agrees_with_direct_solve(self):
        delta = np.random.default_rng(6).uniform(0.0, 0.3, size=80)
        graph = _random_graph(80, 200, seed=6)
        direct = solve_scores(delta, graph, THETA_B, THETA_T)
        iterative = solve_scores(delta, graph, THETA_B, THETA_T, direct_solve_limit=1)
        np.testing.assert_allclose(iterative.b, direct.b, atol=1e-7)

    def test_zero_smoothness_ignores_edges(self):
        delta = np.array([0.0, 0.3])
        scores = solve_scores(delta, _path_graph(2), THETA_B, THETA_T, smoothness=0.0)
        np.testing.assert_allclose(scores.b, [0.0, 1.0])

    def test_graph_size_must_match(self):
        with pytest.raises(DimensionMismatchError):
            solve_scores(np.zeros(3), AdjacencyGraph.empty(2), THETA_B, THETA_T)

    def test_scores_outside_unit_interval_are_rejected(self):
        with pytest.raises(ParameterError):
            ScoreVector(np.array([0.5, 1.5]))


class TestMaskAndSegmentation:
    def test_dynamic_mask_thresholds_cluster_scores(self):
        clusters = _split_clusters()
        mask = dynamic_mask(clusters, ScoreVector(np.array([0.7, 0.2])))
        assert mask[0, 0]
        assert mask.sum() == 1
        assert not dynamic_mask(clusters, ScoreVector(np.array([0.7, 0.2])), cutoff=0.8).any()

    def test_dynamic_mask_size_check(self):
        with pytest.raises(DimensionMismatchError):
            dynamic_mask(_split_clusters(), ScoreVector.zeros(3))

    def test_degenerate_input_gives_static_scores(self):
        clusters = _split_clusters()
        shape = clusters.labels.shape
        valid = np.zeros(shape, dtype=bool)
        valid[5, 5] = True
        result = segment_clusters(
            clusters,
            AdjacencyGraph.empty(clusters.count),
            ResidualImages(np.full(shape, 0.5), np.zeros(shape), valid),
            FlowResidualField(np.zeros(shape), np.ones(shape, dtype=bool)),
        )
        assert result.degenerate
        assert not np.any(result.scores.b)

    def test_moving_box_is_segmented(self, box_pair):
        frames, truth = box_pair
        clusters = cluster_frame(frames[0])
        residuals = compute_residuals(frames[0], frames[1], truth.relative[0])
        flow_residual = compute_flow_residual(truth.flows[0], compute_ego_flow(frames[0], truth.relative[0]))
        result = segment_clusters(clusters, build_adjacency(clusters), residuals, flow_residual)
        assert not result.degenerate
        inside = np.bincount(clusters.labels[truth.masks[0] & (clusters.labels >= 0)], minlength=clusters.count)
        on_box = inside > 0.5 * clusters.sizes
        assert result.scores.b[on_box].mean() > 0.8
        assert result.scores.b[inside == 0].mean() < 0.2

