"""Import externally computed flow from ``flow_<A>_<B>.flo`` files."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Union

from flowfusion.dataset_io import flow_file_name, read_flow_file
from flowfusion.errors import FlowProviderError
from flowfusion.frames import FlowField, RgbdFrame

from .base import FlowProvider


class FileFlowProvider(FlowProvider):
    """Reads the .flo file matching the pair's frame indices."""

    variant = "file-import"

    def __init__(self, directory: Union[str, Path]):
        self._directory = Path(directory)
        if not self._directory.is_dir():
            raise FlowProviderError(f"flow directory {self._directory} does not exist")

    @property
    def directory(self) -> Path:
        return self._directory

    def compute(
        self,
        frame_a: RgbdFrame,
        frame_b: RgbdFrame,
        *,
        index_a: Optional[int] = None,
        index_b: Optional[int] = None,
    ) -> FlowField:
        if index_a is None:
            raise FlowProviderError("file-import flow needs the pair's frame indices")
        if index_b is None:
            index_b = index_a + 1
        path = self._directory / flow_file_name(index_a, index_b)
        if not path.exists():
            raise FlowProviderError(f"missing flow file {path}")
        return read_flow_file(path, expected_shape=frame_a.shape)

    def describe(self) -> str:
        return f"dir:{self._directory}"
