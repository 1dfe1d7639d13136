from .base import FlowProvider
from .exact_provider import ExactFlowProvider
from .factory import make_flow_provider
from .file_provider import FileFlowProvider
from .pyramidal_provider import PyramidalFlowProvider

__all__ = [
    "FlowProvider",
    "ExactFlowProvider",
    "FileFlowProvider",
    "PyramidalFlowProvider",
    "make_flow_provider",
]
