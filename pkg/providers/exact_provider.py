"""Ground-truth flow passthrough for synthetic sequences."""

from __future__ import annotations

from typing import Optional, Sequence

from flowfusion.errors import FlowProviderError
from flowfusion.frames import FlowField, RgbdFrame

from .base import FlowProvider


class ExactFlowProvider(FlowProvider):
    """Returns the rendered ground-truth flow of consecutive frame pairs."""

    variant = "exact"

    def __init__(self, flows: Sequence[FlowField]):
        self._flows = tuple(flows)

    def compute(
        self,
        frame_a: RgbdFrame,
        frame_b: RgbdFrame,
        *,
        index_a: Optional[int] = None,
        index_b: Optional[int] = None,
    ) -> FlowField:
        if index_a is None:
            raise FlowProviderError("exact flow needs the pair's frame indices")
        if index_b is not None and index_b != index_a + 1:
            raise FlowProviderError(
                f"exact flow only covers consecutive pairs, got {index_a}->{index_b}"
            )
        if not 0 <= index_a < len(self._flows):
            raise FlowProviderError(
                f"no ground-truth flow for pair {index_a}->{index_a + 1} "
                f"({len(self._flows)} pair(s) available)"
            )
        return self._flows[index_a]
