"""Robust direct RGB-D odometry between two frames.

The camera motion minimises, over valid frame-A pixels ``p``::

    sum_p m_p * [C(alpha_I * w_I * r_I) + C(w_D * r_D)]

where ``C`` is the Cauchy penalty, ``r_I``/``r_D`` are the photometric and
depth residuals of ``p`` warped into frame B, and ``m_p`` is 1 (plain mode)
or ``1 - b`` of the pixel's cluster (dynamic-aware mode). The solver is
Gauss-Newton with IRLS weights over an image pyramid, coarse to fine. Pose
increments are applied on the left: ``T <- exp(delta) @ T``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg

from .config import SolverConfig
from .errors import DegenerateInputError, NumericalError, ParameterError, UnderConstrainedError
from .frames import RgbdFrame
from .geometry import PinholeIntrinsics, RigidTransform, Twist, se3_exp, se3_log, warp_coordinates

if TYPE_CHECKING:
    from .clustering import ClusterSet
    from .segmentation import ScoreVector

logger = logging.getLogger(__name__)

MAD_TO_SIGMA = 1.4826
MIN_SCALE = 1e-6
MIN_LEVEL_SIZE = 8


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ResidualImages:
    """Signed residual images of frame A warped into frame B.

    ``r_i`` is in intensity units, ``r_d`` in metres; both are 0 where
    ``valid`` is false.
    """

    r_i: np.ndarray
    r_d: np.ndarray
    valid: np.ndarray

    def __post_init__(self) -> None:
        valid = np.array(self.valid, dtype=bool)
        for name in ("r_i", "r_d"):
            values = np.where(valid, np.asarray(getattr(self, name), dtype=float), 0.0)
            values.setflags(write=False)
            object.__setattr__(self, name, values)
        valid.setflags(write=False)
        object.__setattr__(self, "valid", valid)

    @property
    def shape(self):
        return self.valid.shape


@dataclass(frozen=True, eq=False)
class PixelWeights:
    """Per-pixel pre-weights of the intensity and depth terms."""

    w_i: np.ndarray
    w_d: np.ndarray


@dataclass(frozen=True)
class PyramidLevel:
    intensity: np.ndarray
    depth: np.ndarray
    intrinsics: PinholeIntrinsics


@dataclass(frozen=True)
class SolverIteration:
    """One Gauss-Newton iteration. ``energy`` is evaluated after the step."""

    level: int
    iteration: int
    energy: float
    step_norm: float
    halvings: int
    accepted: bool


@dataclass(frozen=True)
class VoResult:
    twist: Twist
    transform: RigidTransform
    iterations: Tuple[SolverIteration, ...] = ()
    valid_pixels: int = 0
    failed: bool = False
    message: str = ""

    def energies(self, level: int) -> List[float]:
        return [it.energy for it in self.iterations if it.level == level and it.accepted]


# ---------------------------------------------------------------------------
# Robust penalty
# ---------------------------------------------------------------------------

def cauchy_penalty(r, c: float):
    """``C(r) = c^2/2 * log(1 + (r/c)^2)``; works on scalars and arrays."""
    _check_scale(c)
    ratio = np.asarray(r, dtype=float) / c
    value = 0.5 * c * c * np.log1p(ratio * ratio)
    return float(value) if np.ndim(value) == 0 else value


def cauchy_weight(r, c: float):
    """IRLS weight ``C'(r) / r = 1 / (1 + (r/c)^2)``."""
    _check_scale(c)
    ratio = np.asarray(r, dtype=float) / c
    value = 1.0 / (1.0 + ratio * ratio)
    return float(value) if np.ndim(value) == 0 else value


def estimate_scale_c(residuals: Sequence[float], k: float = 1.345, min_count: Optional[int] = None) -> float:
    """Robust scale ``k * 1.4826 * MAD``, floored at 1e-6.

    ``min_count`` defaults to the solver's ``min_valid_pixels``.
    """
    if min_count is None:
        min_count = SolverConfig.min_valid_pixels
    min_count = max(min_count, 1)
    values = np.asarray(residuals, dtype=float).ravel()
    values = values[np.isfinite(values)]
    if values.size < min_count:
        raise DegenerateInputError(f"need at least {min_count} residual(s) to estimate c, got {values.size}")
    mad = float(np.median(np.abs(values - np.median(values))))
    return max(k * MAD_TO_SIGMA * mad, MIN_SCALE)


def _check_scale(c: float) -> None:
    if not c > 0:
        raise ParameterError(f"Cauchy scale c must be positive, got {c}")


# ---------------------------------------------------------------------------
# Pre-weights and pyramid
# ---------------------------------------------------------------------------

def compute_pixel_weights(frame: Union[RgbdFrame, np.ndarray], config: Optional[SolverConfig] = None) -> PixelWeights:
    """``w_I = 1``; ``w_D = 1 / (sigma0 + sigma1 * z^2)`` scaled to a valid-pixel median of 1."""
    config = config or SolverConfig()
    depth = np.asarray(frame.depth if isinstance(frame, RgbdFrame) else frame, dtype=float)
    return PixelWeights(np.ones(depth.shape), _depth_weights(depth, config))


def _depth_weights(depth: np.ndarray, config: SolverConfig, normalize: bool = True) -> np.ndarray:
    valid = depth > 0
    raw = np.where(valid, 1.0 / (config.depth_sigma0 + config.depth_sigma1 * depth * depth), 0.0)
    if normalize and np.any(valid):
        raw = raw / np.median(raw[valid])
    return raw


def build_pyramid(frame: RgbdFrame, levels: int) -> List[PyramidLevel]:
    """Level 0 is the input; each next level halves the image.

    Intensity is 2x2 average-pooled. Depth takes the median of the valid
    entries of each 2x2 block (0 if none). Odd trailing rows/columns are
    dropped. Stops early once a side would fall below 8 pixels.
    """
    if levels < 1:
        raise ParameterError(f"pyramid needs at least one level, got {levels}")
    pyramid = [PyramidLevel(np.asarray(frame.intensity, dtype=float), np.asarray(frame.depth, dtype=float), frame.intrinsics)]
    for _ in range(1, levels):
        top = pyramid[-1]
        h, w = top.intensity.shape
        if min(h, w) // 2 < MIN_LEVEL_SIZE:
            break
        pyramid.append(
            PyramidLevel(
                _blocks(top.intensity).mean(axis=-1),
                _median_valid(_blocks(top.depth)),
                top.intrinsics.downsampled(),
            )
        )
    return pyramid


def _blocks(image: np.ndarray) -> np.ndarray:
    """``(h//2, w//2, 4)`` view of the 2x2 blocks."""
    h, w = image.shape
    cropped = image[: h - h % 2, : w - w % 2]
    return cropped.reshape(h // 2, 2, w // 2, 2).transpose(0, 2, 1, 3).reshape(h // 2, w // 2, 4)


def _median_valid(blocks: np.ndarray) -> np.ndarray:
    ordered = np.sort(np.where(blocks > 0, blocks, np.nan), axis=-1)
    count = np.sum(blocks > 0, axis=-1)
    lo = np.maximum((count - 1) // 2, 0)[..., None]
    hi = np.maximum(count // 2, 0)[..., None]
    hi = np.minimum(hi, blocks.shape[-1] - 1)
    median = 0.5 * (np.take_along_axis(ordered, lo, -1) + np.take_along_axis(ordered, hi, -1))[..., 0]
    return np.where(count > 0, median, 0.0)


def _weight_pyramid(static: np.ndarray, levels: int) -> List[np.ndarray]:
    """Coarse pixels keep the smallest static weight of their block."""
    pyramid = [static]
    for _ in range(1, levels):
        pyramid.append(_blocks(pyramid[-1]).min(axis=-1))
    return pyramid


def static_weight_image(clusters: "ClusterSet", scores: "ScoreVector") -> np.ndarray:
    """Per-pixel ``1 - b`` of the pixel's cluster; 1 where no cluster."""
    b = np.asarray(scores.b, dtype=float)
    if b.size != clusters.count:
        raise ParameterError(f"{b.size} score(s) for {clusters.count} cluster(s)")
    labels = clusters.labels
    weights = np.ones(labels.shape)
    labelled = labels >= 0
    weights[labelled] = 1.0 - b[labels[labelled]]
    return weights


# ---------------------------------------------------------------------------
# Residuals and Jacobians
# ---------------------------------------------------------------------------

def compute_residuals(
    frame_a: RgbdFrame,
    frame_b: RgbdFrame,
    xi: Union[Twist, RigidTransform],
) -> ResidualImages:
    _check_pair(frame_a, frame_b)
    transform = xi if isinstance(xi, RigidTransform) else se3_exp(xi)
    level_a = PyramidLevel(np.asarray(frame_a.intensity), np.asarray(frame_a.depth), frame_a.intrinsics)
    level_b = PyramidLevel(np.asarray(frame_b.intensity), np.asarray(frame_b.depth), frame_b.intrinsics)
    ev = _evaluate(level_a, level_b, transform, jacobians=False)
    return ResidualImages(ev.r_i, ev.r_d, ev.valid)


def residual_jacobians(
    frame_a: RgbdFrame,
    frame_b: RgbdFrame,
    transform: Union[Twist, RigidTransform],
) -> Tuple[ResidualImages, np.ndarray, np.ndarray]:
    """Residuals plus ``d r / d delta`` (``HxWx6`` each) for ``exp(delta) @ T``.

    The Jacobians are the exact derivatives of the bilinear interpolant,
    valid while the warped point stays inside its sampling cell.
    """
    _check_pair(frame_a, frame_b)
    transform = transform if isinstance(transform, RigidTransform) else se3_exp(transform)
    level_a = PyramidLevel(np.asarray(frame_a.intensity), np.asarray(frame_a.depth), frame_a.intrinsics)
    level_b = PyramidLevel(np.asarray(frame_b.intensity), np.asarray(frame_b.depth), frame_b.intrinsics)
    ev = _evaluate(level_a, level_b, transform, jacobians=True)
    return ResidualImages(ev.r_i, ev.r_d, ev.valid), ev.j_i, ev.j_d


@dataclass(frozen=True, eq=False)
class _Evaluation:
    r_i: np.ndarray
    r_d: np.ndarray
    valid: np.ndarray
    j_i: Optional[np.ndarray] = None
    j_d: Optional[np.ndarray] = None


def _evaluate(level_a: PyramidLevel, level_b: PyramidLevel, transform: RigidTransform, jacobians: bool) -> _Evaluation:
    K = level_a.intrinsics
    warp = warp_coordinates(level_a.depth, transform, K)
    i_b, iu, iv, ok_i = _bilinear(level_b.intensity, warp.u, warp.v, warp.valid)
    d_b, du, dv, ok_d = _bilinear(level_b.depth, warp.u, warp.v, warp.valid, positive=True)
    valid = ok_i & ok_d
    r_i = np.where(valid, i_b - level_a.intensity, 0.0)
    r_d = np.where(valid, d_b - warp.depth, 0.0)
    if not jacobians:
        return _Evaluation(r_i, r_d, valid)

    # projection derivatives w.r.t. the left increment, at the warped point
    z = np.where(valid, warp.depth, 1.0)
    x = np.where(valid, (warp.u - K.cx) / K.fx, 0.0)
    y = np.where(valid, (warp.v - K.cy) / K.fy, 0.0)
    inv_z = 1.0 / z
    zero = np.zeros_like(z)
    du_dxi = K.fx * np.stack([inv_z, zero, -x * inv_z, -x * y, 1.0 + x * x, -y], axis=-1)
    dv_dxi = K.fy * np.stack([zero, inv_z, -y * inv_z, -(1.0 + y * y), x * y, x], axis=-1)
    # depth of the moved point: dZ = [0, 0, 1, Y, -X, 0]
    dz_dxi = np.stack([zero, zero, np.ones_like(z), y * z, -x * z, zero], axis=-1)

    j_i = iu[..., None] * du_dxi + iv[..., None] * dv_dxi
    j_d = du[..., None] * du_dxi + dv[..., None] * dv_dxi - dz_dxi
    j_i[~valid] = 0.0
    j_d[~valid] = 0.0
    return _Evaluation(r_i, r_d, valid, j_i, j_d)


def _bilinear(image: np.ndarray, u: np.ndarray, v: np.ndarray, mask: np.ndarray, positive: bool = False):
    """Bilinear sample with its exact partial derivatives.

    With ``positive`` all four taps must be > 0 (depth holes are never blended).
    """
    h, w = image.shape
    ok = mask & (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    uu = np.where(ok, u, 0.0)
    vv = np.where(ok, v, 0.0)
    x0 = np.minimum(np.floor(uu).astype(np.intp), w - 2)
    y0 = np.minimum(np.floor(vv).astype(np.intp), h - 2)
    ax = uu - x0
    ay = vv - y0
    i00 = image[y0, x0]
    i01 = image[y0, x0 + 1]
    i10 = image[y0 + 1, x0]
    i11 = image[y0 + 1, x0 + 1]
    if positive:
        ok = ok & (i00 > 0) & (i01 > 0) & (i10 > 0) & (i11 > 0)
    top = (1.0 - ax) * i00 + ax * i01
    bottom = (1.0 - ax) * i10 + ax * i11
    value = (1.0 - ay) * top + ay * bottom
    d_u = (1.0 - ay) * (i01 - i00) + ay * (i11 - i10)
    d_v = bottom - top
    return (
        np.where(ok, value, 0.0),
        np.where(ok, d_u, 0.0),
        np.where(ok, d_v, 0.0),
        ok,
    )


def _check_pair(frame_a: RgbdFrame, frame_b: RgbdFrame) -> None:
    if frame_a.intrinsics != frame_b.intrinsics:
        raise ParameterError("frames must share intrinsics")


# ---------------------------------------------------------------------------
# Solver
# ---------------------------------------------------------------------------

def solve_vo(
    frame_a: RgbdFrame,
    frame_b: RgbdFrame,
    config: Optional[SolverConfig] = None,
    cluster_scores: Optional[Tuple["ClusterSet", "ScoreVector"]] = None,
    xi0: Optional[Twist] = None,
) -> VoResult:
    """Estimate the twist taking frame-A coordinates to frame-B coordinates.

    Without ``cluster_scores`` every pixel counts fully; with them each pixel
    is weighted by ``1 - b`` of its frame-A cluster.

    Raises ``UnderConstrainedError`` when a pyramid level has fewer than
    ``min_valid_pixels`` usable pixels. A non-finite or singular system
    returns ``xi0`` with ``failed`` set.
    """
    config = config or SolverConfig()
    config.validate()
    _check_pair(frame_a, frame_b)
    xi0 = xi0 or Twist.zero()

    if cluster_scores is not None:
        static = static_weight_image(*cluster_scores)
    else:
        static = np.ones(frame_a.shape)

    pyr_a = build_pyramid(frame_a, config.pyramid_levels)
    pyr_b = build_pyramid(frame_b, config.pyramid_levels)
    # min-pooling: a block holding any b = 1 pixel stays at weight 0, so fully
    # dynamic pixels are excluded on every level, not only the finest
    masks = _weight_pyramid(static, len(pyr_a))

    transform = se3_exp(xi0)
    records: List[SolverIteration] = []
    used = 0
    for level in reversed(range(len(pyr_a))):
        try:
            transform, used = _solve_level(level, pyr_a[level], pyr_b[level], masks[level], transform, config, records)
        except NumericalError as exc:
            logger.warning("VO solve failed at level %d: %s", level, exc)
            return VoResult(xi0, se3_exp(xi0), tuple(records), used, failed=True, message=str(exc))

    return VoResult(se3_log(transform), transform, tuple(records), used)


def _solve_level(
    level: int,
    level_a: PyramidLevel,
    level_b: PyramidLevel,
    static: np.ndarray,
    transform: RigidTransform,
    config: SolverConfig,
    records: List[SolverIteration],
) -> Tuple[RigidTransform, int]:
    w_d = _depth_weights(level_a.depth, config)
    scale_i = config.alpha_i  # w_I = 1
    ev = _evaluate(level_a, level_b, transform, jacobians=True)
    use = ev.valid & (static > 0)
    count = int(np.count_nonzero(use))
    if count < config.min_valid_pixels:
        raise UnderConstrainedError(
            f"pyramid level {level}: {count} usable pixel(s), need {config.min_valid_pixels}"
        )

    c_i = estimate_scale_c(scale_i * ev.r_i[use], config.cauchy_k, config.min_valid_pixels)
    c_d = estimate_scale_c(w_d[use] * ev.r_d[use], config.cauchy_k, config.min_valid_pixels)
    energy = _energy(ev, use, static, w_d, scale_i, c_i, c_d)
    logger.debug("level %d: %d px, c_I=%.3g c_D=%.3g, E=%.6g", level, count, c_i, c_d, energy)

    for iteration in range(config.iters_per_level):
        step = _gauss_newton_step(ev, use, static, w_d, scale_i, c_i, c_d, config.damping)
        accepted = False
        factor = 1.0
        for halvings in range(config.max_halvings + 1):
            candidate = se3_exp(Twist.from_vector(factor * step)) @ transform
            cand_ev = _evaluate(level_a, level_b, candidate, jacobians=True)
            cand_use = cand_ev.valid & (static > 0)
            if np.count_nonzero(cand_use) >= config.min_valid_pixels:
                cand_energy = _energy(cand_ev, cand_use, static, w_d, scale_i, c_i, c_d)
                if cand_energy <= energy:
                    accepted = True
                    break
            factor *= 0.5

        step_norm = float(factor * np.linalg.norm(step))
        if not accepted:
            records.append(SolverIteration(level, iteration, energy, step_norm, halvings, False))
            logger.debug("level %d iter %d: step rejected", level, iteration)
            break

        transform, ev, use, energy = candidate, cand_ev, cand_use, cand_energy
        count = int(np.count_nonzero(use))
        records.append(SolverIteration(level, iteration, energy, step_norm, halvings, True))
        logger.debug("level %d iter %d: E=%.6g |dxi|=%.3g", level, iteration, energy, step_norm)
        if step_norm < config.convergence_eps:
            break
    return transform, count


def _energy(ev: _Evaluation, use: np.ndarray, static: np.ndarray, w_d: np.ndarray, scale_i: float, c_i: float, c_d: float) -> float:
    s_i = scale_i * ev.r_i[use]
    s_d = w_d[use] * ev.r_d[use]
    return float(np.sum(static[use] * (cauchy_penalty(s_i, c_i) + cauchy_penalty(s_d, c_d))))


def _gauss_newton_step(
    ev: _Evaluation,
    use: np.ndarray,
    static: np.ndarray,
    w_d: np.ndarray,
    scale_i: float,
    c_i: float,
    c_d: float,
    damping: float,
) -> np.ndarray:
    m = static[use]
    s_i = scale_i * ev.r_i[use]
    s_d = w_d[use] * ev.r_d[use]
    j_i = scale_i * ev.j_i[use]
    j_d = w_d[use][:, None] * ev.j_d[use]
    k_i = m * cauchy_weight(s_i, c_i)
    k_d = m * cauchy_weight(s_d, c_d)

    H = np.einsum("ni,n,nj->ij", j_i, k_i, j_i) + np.einsum("ni,n,nj->ij", j_d, k_d, j_d)
    g = np.einsum("ni,n->i", j_i, k_i * s_i) + np.einsum("ni,n->i", j_d, k_d * s_d)
    if not (np.all(np.isfinite(H)) and np.all(np.isfinite(g))):
        raise NumericalError("non-finite normal equations")
    try:
        factor = linalg.cho_factor(H + damping * np.eye(6))
        step = -linalg.cho_solve(factor, g)
    except (linalg.LinAlgError, ValueError) as exc:
        raise NumericalError(f"normal equations not positive definite: {exc}") from None
    if not np.all(np.isfinite(step)):
        raise NumericalError("non-finite Gauss-Newton step")
    return step


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------

DIAGNOSTIC_COLUMNS = ("level", "iteration", "energy", "step_norm", "halvings", "accepted")


def write_diagnostics_csv(iterations: Sequence[SolverIteration], path: Union[str, Path], pair: Optional[int] = None) -> None:
    """Write (or append, when ``pair`` is given and the file exists) solver iterations as CSV."""
    path = Path(path)
    columns = (("pair",) if pair is not None else ()) + DIAGNOSTIC_COLUMNS
    append = pair is not None and path.exists()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a" if append else "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        if not append:
            writer.writerow(columns)
        for it in iterations:
            row = [it.level, it.iteration, f"{it.energy:.9g}", f"{it.step_norm:.9g}", it.halvings, int(it.accepted)]
            writer.writerow(([pair] if pair is not None else []) + row)
