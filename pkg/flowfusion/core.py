"""FlowFusion orchestrator.

Per frame pair (A, B):
  1. Optical flow A->B from the flow provider (once).
  2. Cluster frame A and build the cluster adjacency graph (once).
  3. Initial pose with every pixel trusted, seeded from the prior twist.
  4. Outer loop: ego flow at the current pose -> flow residual -> photometric
     and depth residuals -> cluster scores -> pose re-solved with dynamic
     clusters down-weighted. Stops once the scores and the pose both settle.
  5. Emit the pose, the scores and the dynamic mask.

A sequence chains the relative poses from the identity; each pair is seeded
with the previous pair's motion.
"""

from __future__ import annotations

import logging
import time
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .clustering import AdjacencyGraph, ClusterSet, build_adjacency, cluster_frame
from .config import PipelineConfig
from .errors import EmptyCloudError, FlowProviderError, ParameterError, UnderConstrainedError
from .flow import compute_ego_flow, compute_flow_residual, compute_optical_flow
from .frames import FlowField, RgbdFrame
from .geometry import RigidTransform, Twist, se3_exp
from .segmentation import ScoreVector, dynamic_mask, score_energy, segment_clusters
from .trajectory import Trajectory
from .vo_solver import VoResult, compute_residuals, solve_vo

if TYPE_CHECKING:
    from providers.base import FlowProvider

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class OuterIteration:
    """Diagnostics of one pass of the outer loop."""

    iteration: int
    vo_energy: float
    score_energy: float
    changed_scores: int
    max_score_change: float
    step_norm: float
    dynamic_pixels: int
    thresholds: Tuple[float, float]


@dataclass(frozen=True, eq=False)
class FramePairResult:
    index_a: Optional[int]
    index_b: Optional[int]
    twist: Twist
    initial_twist: Twist
    scores: ScoreVector
    mask: np.ndarray
    clusters: Optional[ClusterSet] = None
    iterations: Tuple[OuterIteration, ...] = ()
    vo: Optional[VoResult] = None
    converged: bool = True
    degraded: bool = False
    segmentation_degenerate: bool = False
    message: str = ""

    @property
    def transform(self) -> RigidTransform:
        return se3_exp(self.twist)

    @property
    def outer_iterations(self) -> int:
        return len(self.iterations)


@dataclass
class SequenceResult:
    trajectory: Trajectory
    pairs: List[FramePairResult] = field(default_factory=list)

    @property
    def degraded_pairs(self) -> List[FramePairResult]:
        return [p for p in self.pairs if p.degraded]

    @property
    def masks(self) -> List[np.ndarray]:
        return [p.mask for p in self.pairs]


class FlowFusion:
    """Dynamic-aware RGB-D odometry driven by a pluggable flow provider."""

    def __init__(self, provider: "FlowProvider", config: Optional[PipelineConfig] = None):
        self._provider = provider
        self._config = config or PipelineConfig()
        self._config.validate()
        self._timings: Dict[str, float] = defaultdict(float)

    # ------------------------------------------------------------------
    # Pair processing
    # ------------------------------------------------------------------

    def process_pair(
        self,
        frame_a: RgbdFrame,
        frame_b: RgbdFrame,
        xi_prior: Optional[Twist] = None,
        *,
        index_a: Optional[int] = None,
        index_b: Optional[int] = None,
    ) -> FramePairResult:
        cfg = self._config
        if frame_a.intrinsics != frame_b.intrinsics:
            raise ParameterError("frames must share intrinsics")
        xi_prior = xi_prior or Twist.zero()
        empty_mask = np.zeros(frame_a.shape, dtype=bool)

        def degraded(message: str, clusters: Optional[ClusterSet] = None) -> FramePairResult:
            logger.warning("pair %s->%s degraded: %s", index_a, index_b, message)
            count = clusters.count if clusters is not None else 0
            return FramePairResult(
                index_a, index_b, xi_prior, xi_prior, ScoreVector.zeros(count), empty_mask,
                clusters=clusters, converged=False, degraded=True, message=message,
            )

        try:
            with self._stage("clustering"):
                clusters = cluster_frame(frame_a, params=cfg.clustering)
                graph = build_adjacency(clusters)
        except EmptyCloudError as exc:
            return degraded(str(exc))

        try:
            with self._stage("vo"):
                vo = solve_vo(frame_a, frame_b, cfg.solver, None, xi_prior)
        except UnderConstrainedError as exc:
            return degraded(str(exc), clusters)
        if vo.failed:
            return degraded(vo.message, clusters)
        initial = vo.twist

        if not cfg.segmentation_enabled:
            return FramePairResult(
                index_a, index_b, initial, initial, ScoreVector.zeros(clusters.count), empty_mask,
                clusters=clusters, vo=vo,
            )

        try:
            with self._stage("flow"):
                optical = compute_optical_flow(self._provider, frame_a, frame_b, index_a, index_b)
        except FlowProviderError as exc:
            return degraded(str(exc), clusters)

        return self._outer_loop(frame_a, frame_b, optical, clusters, graph, vo, initial, index_a, index_b, degraded)

    def _outer_loop(self, frame_a, frame_b, optical: FlowField, clusters: ClusterSet, graph: AdjacencyGraph,
                    vo: VoResult, initial: Twist, index_a, index_b, degraded) -> FramePairResult:
        cfg = self._config
        seg_cfg = cfg.segmentation
        xi = initial
        scores = ScoreVector.zeros(clusters.count)
        iterations: List[OuterIteration] = []
        converged = False
        seg_degenerate = False

        refine_solver = replace(cfg.solver, pyramid_levels=min(cfg.refine_levels, cfg.solver.pyramid_levels))

        for iteration in range(1, cfg.max_outer_iterations + 1):
            with self._stage("segmentation"):
                ego = compute_ego_flow(frame_a, xi)
                r_f = compute_flow_residual(optical, ego)
                residuals = compute_residuals(frame_a, frame_b, xi)
                seg = segment_clusters(clusters, graph, residuals, r_f, seg_cfg)
            seg_degenerate = seg.degenerate
            change = np.abs(seg.scores.b - scores.b)
            max_change = float(change.max(initial=0.0))
            changed = int(np.count_nonzero(change >= cfg.score_tolerance))
            scores = seg.scores
            energy = score_energy(scores, seg.residual, graph, *seg.thresholds, smoothness=seg_cfg.smoothness)
            dynamic = int(np.count_nonzero(dynamic_mask(clusters, scores, seg_cfg.static_cutoff)))

            # the pose is always re-solved against the newest scores
            try:
                with self._stage("vo"):
                    vo = solve_vo(frame_a, frame_b, refine_solver, (clusters, scores), xi)
            except UnderConstrainedError as exc:
                return degraded(str(exc), clusters)
            if vo.failed:
                return degraded(vo.message, clusters)

            step = float(np.linalg.norm(vo.twist.vector - xi.vector))
            xi = vo.twist
            iterations.append(
                OuterIteration(iteration, _final_energy(vo), energy, changed, max_change, step, dynamic, seg.thresholds)
            )
            logger.debug("pair %s: outer %d, |dxi|=%.3g, max|db|=%.3g, dynamic px=%d",
                         index_a, iteration, step, max_change, dynamic)
            if max_change < cfg.score_tolerance and step < cfg.twist_tolerance:
                converged = True
                break

        mask = dynamic_mask(clusters, scores, seg_cfg.static_cutoff)
        if not converged:
            logger.info("pair %s->%s: outer loop hit the %d-iteration cap", index_a, index_b, cfg.max_outer_iterations)
        return FramePairResult(
            index_a, index_b, xi, initial, scores, mask,
            clusters=clusters, iterations=tuple(iterations), vo=vo, converged=converged,
            segmentation_degenerate=seg_degenerate,
        )

    # ------------------------------------------------------------------
    # Sequences
    # ------------------------------------------------------------------

    def process_sequence(self, frames: Sequence[RgbdFrame]) -> SequenceResult:
        if len(frames) < 2:
            raise ParameterError(f"a sequence needs at least 2 frames, got {len(frames)}")
        pose = RigidTransform.identity()  # world -> camera
        poses = [pose]
        pairs: List[FramePairResult] = []
        prior = Twist.zero()
        for k in range(len(frames) - 1):
            result = self.process_pair(frames[k], frames[k + 1], prior, index_a=k, index_b=k + 1)
            pairs.append(result)
            pose = result.transform @ pose
            poses.append(pose)
            prior = result.twist
            _log_pair(k, k + 1, f"done in {result.outer_iterations} outer iteration(s), "
                                f"{int(result.mask.sum())} dynamic px")
        trajectory = Trajectory.from_world_to_camera([f.timestamp for f in frames], poses)
        degraded = sum(p.degraded for p in pairs)
        logger.info("Processed %d pair(s), %d degraded", len(pairs), degraded)
        return SequenceResult(trajectory, pairs)

    # ------------------------------------------------------------------
    # Observability
    # ------------------------------------------------------------------

    @property
    def config(self) -> PipelineConfig:
        return self._config

    @property
    def timings(self) -> Dict[str, float]:
        """Accumulated wall-clock seconds per stage."""
        return dict(self._timings)

    def _stage(self, name: str) -> "_StageTimer":
        return _StageTimer(self._timings, name)


class _StageTimer:
    def __init__(self, sink: Dict[str, float], name: str):
        self._sink = sink
        self._name = name
        self._start = 0.0

    def __enter__(self) -> "_StageTimer":
        self._start = time.perf_counter()
        return self

    def __exit__(self, *exc) -> None:
        self._sink[self._name] += time.perf_counter() - self._start


def _final_energy(vo: VoResult) -> float:
    return vo.iterations[-1].energy if vo.iterations else 0.0


def _log_pair(index_a: Optional[int], index_b: Optional[int], msg: str) -> None:
    if index_a is None:
        logger.info("pair: %s", msg)
    else:
        logger.info("pair %d->%d: %s", index_a, index_b, msg)
