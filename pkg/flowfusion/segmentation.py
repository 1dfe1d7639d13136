"""Dynamic scores per cluster.

Each cluster gets an average residual ``delta`` mixing photometric, depth
and scene-flow evidence. ``delta`` maps to a target score ``g`` and a
confidence ``w``; the scores ``b`` minimise::

    E(b) = sum_i w_i (b_i - g_i)^2 + smoothness * sum_{i<j} G_ij (b_i - b_j)^2

which is the SPD system ``(diag(w) + smoothness * L) b = w * g``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
from scipy import linalg
from scipy.sparse import diags
from scipy.sparse.linalg import cg

from .clustering import AdjacencyGraph, ClusterSet
from .config import SegmentationConfig
from .errors import DegenerateSegmentationError, DimensionMismatchError, ParameterError, SolverError
from .flow import FlowResidualField
from .vo_solver import ResidualImages

logger = logging.getLogger(__name__)

SOLVE_RESIDUAL_TOL = 1e-8
CLAMP_TOL = 1e-9
ADAPTIVE_MIN_GAP = 1e-6
ADAPTIVE_REL_GAP = 1e-9


@dataclass(frozen=True, eq=False)
class ClusterResidual:
    """Average residual per cluster; ``flagged`` marks clusters without valid pixels."""

    delta: np.ndarray
    valid_counts: np.ndarray

    def __post_init__(self) -> None:
        delta = np.array(self.delta, dtype=float)
        counts = np.array(self.valid_counts, dtype=np.int64)
        if delta.shape != counts.shape:
            raise DimensionMismatchError("delta and valid_counts must have the same length")
        if not np.all(np.isfinite(delta)):
            raise ParameterError("cluster residuals must be finite")
        delta.setflags(write=False)
        counts.setflags(write=False)
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "valid_counts", counts)

    @property
    def flagged(self) -> np.ndarray:
        return self.valid_counts == 0

    def __len__(self) -> int:
        return int(self.delta.size)


@dataclass(frozen=True, eq=False)
class ScoreVector:
    """Dynamic level ``b_i`` in [0, 1] per cluster.

    ``clamped`` counts entries that fell outside [0, 1] by more than 1e-9
    before being clipped.
    """

    b: np.ndarray
    clamped: int = 0

    def __post_init__(self) -> None:
        b = np.array(self.b, dtype=float)
        if not np.all(np.isfinite(b)) or b.min(initial=0.0) < 0.0 or b.max(initial=0.0) > 1.0:
            raise ParameterError("scores must be finite and within [0, 1]")
        b.setflags(write=False)
        object.__setattr__(self, "b", b)

    @classmethod
    def zeros(cls, count: int) -> "ScoreVector":
        return cls(np.zeros(count))

    def __len__(self) -> int:
        return int(self.b.size)


# ---------------------------------------------------------------------------
# Residual aggregation
# ---------------------------------------------------------------------------

def aggregate_cluster_residuals(
    clusters: ClusterSet,
    residuals: ResidualImages,
    flow_residual: FlowResidualField,
    config: Optional[SegmentationConfig] = None,
) -> ClusterResidual:
    """``delta_i = mean over valid pixels of alpha_I|r_I| + |r_D|/D_i + alpha_F r_F``.

    ``D_i`` is the cluster's mean depth. A pixel counts when it is clustered
    and both the residual and the flow residual are valid there.
    """
    config = config or SegmentationConfig()
    labels = clusters.labels
    if residuals.shape != labels.shape or flow_residual.shape != labels.shape:
        raise DimensionMismatchError(
            f"labels {labels.shape}, residuals {residuals.shape} and flow residual {flow_residual.shape} differ"
        )
    if np.any(clusters.mean_depths <= 0):
        raise ParameterError("every cluster needs a positive mean depth")

    use = (labels >= 0) & residuals.valid & flow_residual.valid
    ids = labels[use]
    n = clusters.count
    depth = clusters.mean_depths[ids]
    per_pixel = (
        config.alpha_i * np.abs(residuals.r_i[use])
        + np.abs(residuals.r_d[use]) / depth
        + config.alpha_f * flow_residual.r_f[use]
    )
    counts = np.bincount(ids, minlength=n)
    sums = np.bincount(ids, weights=per_pixel, minlength=n)
    delta = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
    if np.any(counts == 0):
        logger.debug("%d cluster(s) without valid residual pixels", int(np.sum(counts == 0)))
    return ClusterResidual(delta, counts)


# ---------------------------------------------------------------------------
# Assignment and weighting
# ---------------------------------------------------------------------------

def assignment_g(delta, theta_b: float, theta_t: float):
    """0 below ``theta_b``, 1 above ``theta_t``, linear in between."""
    _check_thresholds(theta_b, theta_t)
    value = np.clip((np.asarray(delta, dtype=float) - theta_b) / (theta_t - theta_b), 0.0, 1.0)
    return float(value) if np.ndim(value) == 0 else value


def weight_w(delta, theta_b: float, theta_t: float):
    """``sqrt(((delta - theta_b) / (theta_t - theta_b))^2 + 1)``."""
    _check_thresholds(theta_b, theta_t)
    offset = (np.asarray(delta, dtype=float) - theta_b) / (theta_t - theta_b)
    value = np.sqrt(offset * offset + 1.0)
    return float(value) if np.ndim(value) == 0 else value


def pick_thresholds(
    residual: ClusterResidual,
    mode: str = "fixed",
    theta_b: float = 0.05,
    theta_t: float = 0.15,
) -> Tuple[float, float]:
    """Fixed mode passes ``(theta_b, theta_t)`` through; adaptive mode uses
    the 50th and 90th percentiles of the valid cluster residuals.
    """
    valid = residual.delta[~residual.flagged]
    if valid.size < 2:
        raise DegenerateSegmentationError(f"need at least 2 clusters with valid residuals, got {valid.size}")
    if mode == "fixed":
        _check_thresholds(theta_b, theta_t)
        return float(theta_b), float(theta_t)
    if mode == "adaptive":
        low = float(np.percentile(valid, 50))
        # gap scales with low so it survives float spacing at large residuals
        gap = max(ADAPTIVE_MIN_GAP, ADAPTIVE_REL_GAP * abs(low))
        high = max(float(np.percentile(valid, 90)), low + gap)
        if not high > low:
            high = float(np.nextafter(low, np.inf))
        return low, high
    raise ParameterError(f"unknown threshold mode {mode!r}")


def _check_thresholds(theta_b: float, theta_t: float) -> None:
    if not theta_b < theta_t:
        raise ParameterError(f"theta_b ({theta_b}) must be below theta_t ({theta_t})")


# ---------------------------------------------------------------------------
# Score solve
# ---------------------------------------------------------------------------

def solve_scores(
    residual: Union[ClusterResidual, np.ndarray],
    graph: AdjacencyGraph,
    theta_b: float,
    theta_t: float,
    smoothness: float = 1.0,
    direct_solve_limit: int = 2000,
    cg_tolerance: float = 1e-10,
) -> ScoreVector:
    """Exact minimiser of the score energy."""
    delta = _delta_array(residual)
    n = delta.size
    if graph.node_count != n:
        raise DimensionMismatchError(f"graph has {graph.node_count} node(s), residual has {n}")
    if smoothness < 0:
        raise ParameterError(f"smoothness must be >= 0, got {smoothness}")
    if n == 0:
        return ScoreVector(np.zeros(0))

    g = assignment_g(delta, theta_b, theta_t)
    w = weight_w(delta, theta_b, theta_t)
    g = np.atleast_1d(g)
    w = np.atleast_1d(w)
    system = (diags(w) + smoothness * graph.laplacian()).tocsr()
    rhs = w * g

    if n < direct_solve_limit:
        try:
            b = linalg.solve(system.toarray(), rhs, assume_a="pos")
        except linalg.LinAlgError as exc:
            raise SolverError(f"score system is singular: {exc}") from None
    else:
        b, info = cg(system, rhs, x0=g.copy(), rtol=cg_tolerance, atol=0.0, maxiter=10 * n)
        if info != 0:
            raise SolverError(f"conjugate gradients did not converge (info={info})")

    residual_norm = float(np.linalg.norm(system @ b - rhs))
    if residual_norm > SOLVE_RESIDUAL_TOL * max(1.0, float(np.linalg.norm(rhs))):
        raise SolverError(f"score system residual {residual_norm:.3g} above tolerance")

    clamped = int(np.sum((b < -CLAMP_TOL) | (b > 1.0 + CLAMP_TOL)))
    if clamped:
        logger.warning("%d score(s) outside [0, 1] clipped", clamped)
    return ScoreVector(np.clip(b, 0.0, 1.0), clamped)


def score_energy(
    b,
    residual: Union[ClusterResidual, np.ndarray],
    graph: AdjacencyGraph,
    theta_b: float,
    theta_t: float,
    smoothness: float = 1.0,
) -> float:
    delta = _delta_array(residual)
    b = np.asarray(b.b if isinstance(b, ScoreVector) else b, dtype=float)
    g = np.atleast_1d(assignment_g(delta, theta_b, theta_t))
    w = np.atleast_1d(weight_w(delta, theta_b, theta_t))
    data = float(np.sum(w * (b - g) ** 2))
    if len(graph) == 0:
        return data
    diff = b[graph.edges[:, 0]] - b[graph.edges[:, 1]]
    return data + smoothness * float(np.sum(diff * diff))


def dynamic_mask(clusters: ClusterSet, scores: ScoreVector, cutoff: float = 0.5) -> np.ndarray:
    """Pixels whose cluster score reaches ``cutoff``; unclustered pixels are static."""
    if len(scores) != clusters.count:
        raise DimensionMismatchError(f"{len(scores)} score(s) for {clusters.count} cluster(s)")
    labels = clusters.labels
    mask = np.zeros(labels.shape, dtype=bool)
    labelled = labels >= 0
    mask[labelled] = scores.b[labels[labelled]] >= cutoff
    return mask


# ---------------------------------------------------------------------------
# One full segmentation step
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SegmentationResult:
    residual: ClusterResidual
    scores: ScoreVector
    thresholds: Tuple[float, float]
    degenerate: bool = False


def segment_clusters(
    clusters: ClusterSet,
    graph: AdjacencyGraph,
    residuals: ResidualImages,
    flow_residual: FlowResidualField,
    config: Optional[SegmentationConfig] = None,
) -> SegmentationResult:
    """Aggregate residuals, pick thresholds and solve for the scores.

    A degenerate residual set yields all-static scores with ``degenerate`` set.
    """
    config = config or SegmentationConfig()
    residual = aggregate_cluster_residuals(clusters, residuals, flow_residual, config)
    try:
        thresholds = pick_thresholds(residual, config.threshold_mode, config.theta_b, config.theta_t)
    except DegenerateSegmentationError as exc:
        logger.warning("Segmentation degenerate, treating all clusters as static: %s", exc)
        return SegmentationResult(residual, ScoreVector.zeros(clusters.count), (config.theta_b, config.theta_t), True)
    scores = solve_scores(
        residual,
        graph,
        *thresholds,
        smoothness=config.smoothness,
        direct_solve_limit=config.direct_solve_limit,
        cg_tolerance=config.cg_tolerance,
    )
    return SegmentationResult(residual, scores, thresholds)


def _delta_array(residual: Union[ClusterResidual, np.ndarray]) -> np.ndarray:
    if isinstance(residual, ClusterResidual):
        return residual.delta
    return np.asarray(residual, dtype=float).ravel()
