"""Process-wide runtime knobs read from the environment."""

from __future__ import annotations

import logging
import os

import cv2

logger = logging.getLogger(__name__)

THREADS_ENV = "FLOWFUSION_THREADS"


def worker_count() -> int:
    """Worker cap from ``FLOWFUSION_THREADS`` (defaults to the CPU count)."""
    raw = os.getenv(THREADS_ENV)
    if raw:
        try:
            value = int(raw)
        except ValueError:
            logger.warning("Ignoring %s=%r (not an integer)", THREADS_ENV, raw)
        else:
            if value >= 1:
                return value
            logger.warning("Ignoring %s=%r (must be >= 1)", THREADS_ENV, raw)
    return os.cpu_count() or 1


def apply_thread_limit() -> int:
    """Propagate the worker cap to OpenCV; returns the cap."""
    count = worker_count()
    cv2.setNumThreads(count)
    return count
