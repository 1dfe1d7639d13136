"""Build a FlowProvider from a ``--flow`` value: ``exact``, ``builtin`` or ``dir:<path>``."""

from __future__ import annotations

from typing import Optional, Sequence

from flowfusion.errors import ConfigError
from flowfusion.frames import FlowField

from .base import FlowProvider
from .exact_provider import ExactFlowProvider
from .file_provider import FileFlowProvider
from .pyramidal_provider import PyramidalFlowProvider

FLOW_CHOICES = ("exact", "builtin", "dir:<path>")


def make_flow_provider(
    choice: str,
    ground_truth_flows: Optional[Sequence[FlowField]] = None,
) -> FlowProvider:
    """Resolve a flow choice string into a provider.

    ``exact`` needs ground-truth flows (from a synthetic render or a
    dataset's ``gt_flow`` directory, resolved by the caller).
    """
    choice = choice.strip()
    if choice == "builtin":
        return PyramidalFlowProvider()
    if choice == "exact":
        if ground_truth_flows is None:
            raise ConfigError("--flow exact requires ground-truth flow (synthetic input or gt_flow/)")
        return ExactFlowProvider(ground_truth_flows)
    if choice.startswith("dir:"):
        directory = choice[len("dir:"):]
        if not directory:
            raise ConfigError("--flow dir: needs a directory path")
        return FileFlowProvider(directory)
    raise ConfigError(f"unknown flow provider {choice!r}; expected one of {', '.join(FLOW_CHOICES)}")
