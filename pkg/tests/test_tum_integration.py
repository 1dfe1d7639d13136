"""Optional accuracy check on a real TUM sequence with exported flow.

Set ``FLOWFUSION_TUM_WALKING_XYZ`` to an extracted ``rgbd_dataset_freiburg3_walking_xyz``
directory and ``FLOWFUSION_TUM_FLOW_DIR`` to its ``flow_<a>_<b>.flo`` files.
"""

from __future__ import annotations

import os

import pytest

from flowfusion.core import FlowFusion
from flowfusion.dataset_io import load_tum_sequence
from flowfusion.evaluation import compute_ate
from providers import FileFlowProvider

SEQUENCE = os.getenv("FLOWFUSION_TUM_WALKING_XYZ")
FLOW_DIR = os.getenv("FLOWFUSION_TUM_FLOW_DIR")

pytestmark = pytest.mark.skipif(
    not (SEQUENCE and FLOW_DIR), reason="FLOWFUSION_TUM_WALKING_XYZ / FLOWFUSION_TUM_FLOW_DIR not set"
)


def test_walking_xyz_ate():
    sequence = load_tum_sequence(SEQUENCE)
    gt = sequence.ground_truth()
    assert gt is not None, "sequence has no groundtruth.txt"
    result = FlowFusion(FileFlowProvider(FLOW_DIR)).process_sequence(sequence.frames)
    assert compute_ate(result.trajectory, gt).rmse <= 0.20
