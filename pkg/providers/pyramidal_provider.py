"""Built-in dense optical flow: coarse-to-fine Lucas-Kanade.

Every pixel solves the forward-additive Lucas-Kanade normal equations over a
square window; the estimate is propagated from the coarsest Gaussian pyramid
level to the finest. Pixels whose window has no usable gradient structure,
or whose flow leaves the image, are marked invalid.
"""

from __future__ import annotations

import logging
from typing import List, Optional

import cv2
import numpy as np
from scipy import ndimage

from flowfusion.errors import DimensionMismatchError, ParameterError
from flowfusion.frames import FlowField, RgbdFrame

from .base import FlowProvider

logger = logging.getLogger(__name__)


class PyramidalFlowProvider(FlowProvider):
    """Dense pyramidal Lucas-Kanade (4 levels, 5x5 window, 10 iterations/level by default)."""

    variant = "builtin-pyramidal"

    def __init__(
        self,
        levels: int = 4,
        window: int = 5,
        iterations: int = 10,
        min_eigenvalue: float = 1e-4,
    ):
        if levels < 1 or iterations < 1:
            raise ParameterError("levels and iterations must be at least 1")
        if window < 3 or window % 2 == 0:
            raise ParameterError(f"window must be an odd size >= 3, got {window}")
        self._levels = levels
        self._window = window
        self._iterations = iterations
        self._min_eigenvalue = min_eigenvalue

    # ------------------------------------------------------------------
    # Public API
    # ------------------------------------------------------------------

    def compute(
        self,
        frame_a: RgbdFrame,
        frame_b: RgbdFrame,
        *,
        index_a: Optional[int] = None,
        index_b: Optional[int] = None,
    ) -> FlowField:
        if frame_a.shape != frame_b.shape:
            raise DimensionMismatchError(f"frames differ in size: {frame_a.shape} vs {frame_b.shape}")
        return self.flow_between(np.asarray(frame_a.intensity), np.asarray(frame_b.intensity))

    def flow_between(self, image_a: np.ndarray, image_b: np.ndarray) -> FlowField:
        """Flow between two intensity images of equal shape."""
        pyr_a = _gaussian_pyramid(image_a, self._levels)
        pyr_b = _gaussian_pyramid(image_b, self._levels)

        flow: Optional[np.ndarray] = None
        solvable = np.zeros(image_a.shape, dtype=bool)
        for level in reversed(range(len(pyr_a))):
            a, b = pyr_a[level], pyr_b[level]
            h, w = a.shape
            if flow is None:
                flow = np.zeros((h, w, 2))
            else:
                flow = cv2.resize(flow, (w, h), interpolation=cv2.INTER_LINEAR) * 2.0
            flow, solvable = self._refine(a, b, flow)

        h, w = image_a.shape
        cols, rows = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
        tx = cols + flow[..., 0]
        ty = rows + flow[..., 1]
        inside = (tx >= 0) & (tx <= w - 1) & (ty >= 0) & (ty <= h - 1)
        return FlowField(flow[..., 0], flow[..., 1], solvable & inside)

    # ------------------------------------------------------------------
    # Internals
    # ------------------------------------------------------------------

    def _refine(self, a: np.ndarray, b: np.ndarray, flow: np.ndarray):
        h, w = a.shape
        cols, rows = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
        gx_b = cv2.Sobel(b, cv2.CV_64F, 1, 0, ksize=3, scale=0.125)
        gy_b = cv2.Sobel(b, cv2.CV_64F, 0, 1, ksize=3, scale=0.125)
        size = (self._window, self._window)

        solvable = np.zeros((h, w), dtype=bool)
        for _ in range(self._iterations):
            coords = [rows + flow[..., 1], cols + flow[..., 0]]
            warped = ndimage.map_coordinates(b, coords, order=1, mode="nearest")
            gx = ndimage.map_coordinates(gx_b, coords, order=1, mode="nearest")
            gy = ndimage.map_coordinates(gy_b, coords, order=1, mode="nearest")
            it = warped - a

            sxx = _window_sum(gx * gx, size)
            sxy = _window_sum(gx * gy, size)
            syy = _window_sum(gy * gy, size)
            sxt = _window_sum(gx * it, size)
            syt = _window_sum(gy * it, size)

            det = sxx * syy - sxy * sxy
            half_trace = 0.5 * (sxx + syy)
            min_eig = half_trace - np.sqrt(np.maximum(half_trace ** 2 - det, 0.0))
            solvable = min_eig > self._min_eigenvalue
            safe_det = np.where(solvable, det, 1.0)
            du = np.where(solvable, (-syy * sxt + sxy * syt) / safe_det, 0.0)
            dv = np.where(solvable, (sxy * sxt - sxx * syt) / safe_det, 0.0)
            flow = flow + np.stack((du, dv), axis=-1)
        return flow, solvable


def _gaussian_pyramid(image: np.ndarray, levels: int) -> List[np.ndarray]:
    pyramid = [np.asarray(image, dtype=np.float64)]
    for _ in range(1, levels):
        top = pyramid[-1]
        if min(top.shape) < 16:
            break
        pyramid.append(cv2.pyrDown(top))
    return pyramid


def _window_sum(values: np.ndarray, size) -> np.ndarray:
    return cv2.boxFilter(values, -1, size, normalize=False, borderType=cv2.BORDER_REFLECT)
