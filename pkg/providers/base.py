"""Abstract interface for optical-flow providers.

Implement this to plug in any flow source (a learned network's exported
fields, a classical estimator, rendered ground truth) without changing the
pipeline logic.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from typing import Optional

from flowfusion.frames import FlowField, RgbdFrame


class FlowProvider(ABC):
    """Source of dense A→B optical flow.

    Providers are read-only after construction and may be shared between
    threads. ``index_a``/``index_b`` are the frames' positions in their
    sequence; providers that look flow up by position require them.
    """

    variant: str = ""

    @abstractmethod
    def compute(
        self,
        frame_a: RgbdFrame,
        frame_b: RgbdFrame,
        *,
        index_a: Optional[int] = None,
        index_b: Optional[int] = None,
    ) -> FlowField:
        """Return the optical flow from ``frame_a`` to ``frame_b``."""
        ...

    def describe(self) -> str:
        """Short label for manifests and logs."""
        return self.variant
