"""Run manifest: a JSON record of what a run used and produced.

Written at the end of every ``run``, on success and on failure alike.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

from . import __version__

MANIFEST_NAME = "manifest.json"


@dataclass
class RunManifest:
    command: str
    config: Dict[str, Any] = field(default_factory=dict)
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)
    output_dir: str = ""
    version: str = __version__
    started: str = field(default_factory=lambda: time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()))
    stage_seconds: Dict[str, float] = field(default_factory=dict)
    metrics: Dict[str, float] = field(default_factory=dict)
    degraded_pairs: int = 0
    exit_code: Optional[int] = None
    error: Optional[str] = None

    # ------------------------------------------------------------------
    # Recording
    # ------------------------------------------------------------------

    def record_output(self, name: str, path: Path) -> None:
        self.outputs[name] = str(path)

    def record_stage(self, name: str, seconds: float) -> None:
        self.stage_seconds[name] = round(self.stage_seconds.get(name, 0.0) + seconds, 6)

    def finish(self, exit_code: int, error: Optional[str] = None) -> None:
        self.exit_code = exit_code
        self.error = error

    # ------------------------------------------------------------------
    # Persistence
    # ------------------------------------------------------------------

    def write(self, directory: Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / MANIFEST_NAME
        with open(path, "w", encoding="utf-8") as f:
            json.dump(asdict(self), f, indent=2, sort_keys=True, default=str)
            f.write("\n")
        return path


def read_manifest(path: Path) -> Dict[str, Any]:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)
