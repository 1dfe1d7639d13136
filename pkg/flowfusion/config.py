"""Pipeline configuration.

Every tunable lives in one of four dataclasses. Files use a flat
``section.key=value`` syntax::

    preset=tum
    solver.pyramid_levels=4
    segmentation.theta_b=0.05   # comment

A ``preset`` line applies first regardless of its position; explicit keys
override it, and command-line flags override the file.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

from .errors import ConfigError, ParameterError

PathLike = Union[str, Path]

THRESHOLD_MODES = ("fixed", "adaptive")

PRESETS: Dict[str, Dict[str, Any]] = {
    "tum": {"alpha_i": 0.9, "alpha_f": 0.022, "max_outer_iterations": 8},
    "hrpslam": {"alpha_i": 0.88, "alpha_f": 0.018, "max_outer_iterations": 8},
}


@dataclass(frozen=True)
class SolverConfig:
    """Robust direct RGB-D odometry."""

    # --- Residual terms ---
    alpha_i: float = 0.9
    depth_sigma0: float = 0.001   # m
    depth_sigma1: float = 0.0019  # 1/m, quadratic depth noise

    # --- Coarse-to-fine ---
    pyramid_levels: int = 4
    iters_per_level: int = 2

    # --- Robust penalty ---
    cauchy_k: float = 1.345

    # --- Gauss-Newton ---
    convergence_eps: float = 1e-6
    min_valid_pixels: int = 200
    damping: float = 1e-6
    max_halvings: int = 5

    def validate(self) -> None:
        if not self.alpha_i > 0:
            raise ParameterError(f"solver.alpha_i must be positive, got {self.alpha_i}")
        if self.pyramid_levels < 1:
            raise ParameterError(f"solver.pyramid_levels must be >= 1, got {self.pyramid_levels}")
        if self.iters_per_level < 1:
            raise ParameterError(f"solver.iters_per_level must be >= 1, got {self.iters_per_level}")
        if not self.cauchy_k > 0:
            raise ParameterError(f"solver.cauchy_k must be positive, got {self.cauchy_k}")
        if self.depth_sigma0 < 0 or self.depth_sigma1 < 0 or self.depth_sigma0 + self.depth_sigma1 <= 0:
            raise ParameterError("solver depth noise coefficients must be non-negative and not both zero")
        if self.min_valid_pixels < 6:
            raise ParameterError(f"solver.min_valid_pixels must be >= 6, got {self.min_valid_pixels}")
        if self.damping < 0 or self.max_halvings < 0:
            raise ParameterError("solver.damping and solver.max_halvings must be non-negative")


@dataclass(frozen=True)
class SegmentationConfig:
    """Per-cluster residual aggregation and dynamic-score solve."""

    # --- Residual mix ---
    alpha_i: float = 0.9
    alpha_f: float = 0.022

    # --- Assignment thresholds ---
    threshold_mode: str = "fixed"
    theta_b: float = 0.05
    theta_t: float = 0.15

    # --- Score solve ---
    smoothness: float = 1.0
    direct_solve_limit: int = 2000
    cg_tolerance: float = 1e-10

    # --- Mask export ---
    static_cutoff: float = 0.5

    def validate(self) -> None:
        if not (self.alpha_i > 0 and self.alpha_f > 0):
            raise ParameterError("segmentation.alpha_i and segmentation.alpha_f must be positive")
        if self.threshold_mode not in THRESHOLD_MODES:
            raise ParameterError(
                f"segmentation.threshold_mode must be one of {', '.join(THRESHOLD_MODES)}, got {self.threshold_mode!r}"
            )
        if not self.theta_b < self.theta_t:
            raise ParameterError(f"theta_b ({self.theta_b}) must be below theta_t ({self.theta_t})")
        if self.smoothness < 0:
            raise ParameterError(f"segmentation.smoothness must be >= 0, got {self.smoothness}")
        if not 0.0 <= self.static_cutoff <= 1.0:
            raise ParameterError(f"segmentation.static_cutoff must be in [0, 1], got {self.static_cutoff}")


@dataclass(frozen=True)
class ClusteringConfig:
    """Grid-seeded k-means over (x, y, z, intensity)."""

    seed_resolution: float = 0.3  # m
    spatial_weight: float = 1.0
    intensity_weight: float = 0.5
    max_kmeans_iters: int = 10

    def validate(self) -> None:
        if not self.seed_resolution > 0:
            raise ParameterError(f"clustering.seed_resolution must be positive, got {self.seed_resolution}")
        if self.spatial_weight <= 0 or self.intensity_weight < 0:
            raise ParameterError("clustering weights must be positive (intensity may be zero)")
        if self.max_kmeans_iters < 0:
            raise ParameterError(f"clustering.max_kmeans_iters must be >= 0, got {self.max_kmeans_iters}")


@dataclass(frozen=True)
class PipelineConfig:
    """All tunables for the FlowFusion loop."""

    solver: SolverConfig = field(default_factory=SolverConfig)
    segmentation: SegmentationConfig = field(default_factory=SegmentationConfig)
    clustering: ClusteringConfig = field(default_factory=ClusteringConfig)

    # --- Flow ---
    flow: str = "builtin"

    # --- Outer loop ---
    max_outer_iterations: int = 8
    refine_levels: int = 1  # pyramid levels of the warm-started re-solves
    twist_tolerance: float = 1e-6
    score_tolerance: float = 1e-3
    segmentation_enabled: bool = True

    # --- Inputs and outputs ---
    dataset: Optional[str] = None         # TUM-layout directory
    synthetic_spec: Optional[str] = None  # scene file, instead of a dataset
    out: Optional[str] = None
    seed: Optional[int] = None            # overrides the scene file's texture seed
    map_voxel_size: float = 0.02  # m
    rpe_delta: float = 1.0        # s

    def validate(self) -> None:
        self.solver.validate()
        self.segmentation.validate()
        self.clustering.validate()
        if self.max_outer_iterations < 1:
            raise ParameterError(f"pipeline.max_outer_iterations must be >= 1, got {self.max_outer_iterations}")
        if self.refine_levels < 1:
            raise ParameterError(f"pipeline.refine_levels must be >= 1, got {self.refine_levels}")
        if not self.map_voxel_size > 0:
            raise ParameterError(f"pipeline.map_voxel_size must be positive, got {self.map_voxel_size}")
        if not self.rpe_delta > 0:
            raise ParameterError(f"pipeline.rpe_delta must be positive, got {self.rpe_delta}")

    def with_preset(self, name: str) -> "PipelineConfig":
        try:
            preset = PRESETS[name.lower()]
        except KeyError:
            raise ConfigError(f"unknown preset {name!r}; expected one of {', '.join(PRESETS)}") from None
        return replace(
            self,
            solver=replace(self.solver, alpha_i=preset["alpha_i"]),
            segmentation=replace(self.segmentation, alpha_i=preset["alpha_i"], alpha_f=preset["alpha_f"]),
            max_outer_iterations=preset["max_outer_iterations"],
        )

    def to_flat_dict(self) -> Dict[str, Any]:
        """Effective configuration as ``section.key -> value``, for manifests."""
        flat: Dict[str, Any] = {}
        for section in _SECTIONS:
            for f in fields(getattr(self, section)):
                flat[f"{section}.{f.name}"] = getattr(getattr(self, section), f.name)
        for f in fields(self):
            if f.name not in _SECTIONS:
                flat[f"pipeline.{f.name}"] = getattr(self, f.name)
        return flat


_SECTIONS = ("solver", "segmentation", "clustering")


# ---------------------------------------------------------------------------
# Public API
# ---------------------------------------------------------------------------

def parse_config(text: str, source: str = "<config>", base: Optional[PipelineConfig] = None) -> PipelineConfig:
    """Parse ``section.key=value`` text on top of ``base`` (defaults if omitted)."""
    entries: Dict[str, Tuple[str, int]] = {}
    preset: Optional[Tuple[str, int]] = None
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected key=value, got {line!r}", number, source)
        key, value = (part.strip() for part in line.split("=", 1))
        if key == "preset":
            preset = (value, number)
        else:
            entries[key] = (value, number)

    config = base or PipelineConfig()
    if preset is not None:
        try:
            config = config.with_preset(preset[0])
        except ConfigError as exc:
            raise ConfigError(str(exc), preset[1], source) from None

    overrides = {key: value for key, (value, _) in entries.items()}
    lines = {key: number for key, (_, number) in entries.items()}
    config = apply_overrides(config, overrides, lines=lines, source=source)
    return config


def load_config(path: PathLike, base: Optional[PipelineConfig] = None) -> PipelineConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc.strerror}", source=str(path)) from None
    return parse_config(text, source=str(path), base=base)


def apply_overrides(
    config: PipelineConfig,
    overrides: Dict[str, Any],
    lines: Optional[Dict[str, int]] = None,
    source: Optional[str] = None,
) -> PipelineConfig:
    """Return ``config`` with ``section.key`` values replaced.

    String values are converted to the field's type; the result is validated.
    """
    lines = lines or {}
    sections: Dict[str, Dict[str, Any]] = {name: {} for name in _SECTIONS}
    top: Dict[str, Any] = {}
    for key, value in overrides.items():
        line = lines.get(key)
        section, _, name = key.partition(".")
        if not name:
            raise ConfigError(f"key {key!r} needs a section prefix (e.g. solver.{key})", line, source)
        if section in sections:
            target = getattr(config, section)
            bucket = sections[section]
        elif section == "pipeline" and name not in _SECTIONS:
            target = config
            bucket = top
        else:
            raise ConfigError(f"unknown section {section!r} in key {key!r}", line, source)
        known = {f.name for f in fields(target)}
        if name not in known:
            raise ConfigError(f"unknown key {key!r}", line, source)
        bucket[name] = _coerce(value, getattr(target, name), key, line, source)

    updated = replace(
        config,
        **{name: replace(getattr(config, name), **values) for name, values in sections.items() if values},
        **top,
    )
    try:
        updated.validate()
    except ParameterError as exc:
        line = max((lines[k] for k in overrides if k in lines), default=None)
        raise ConfigError(str(exc), line, source) from None
    return updated


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

# value types of keys whose default is None
_OPTIONAL_KINDS: Dict[str, type] = {"pipeline.seed": int}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(value: Any, current: Any, key: str, line: Optional[int], source: Optional[str]) -> Any:
    if not isinstance(value, str):
        return value
    text = value.strip()
    try:
        if current is None:
            return _OPTIONAL_KINDS.get(key, str)(text)
        if isinstance(current, bool):
            if text.lower() in _TRUE:
                return True
            if text.lower() in _FALSE:
                return False
            raise ValueError(text)
        if isinstance(current, int):
            return int(text)
        if isinstance(current, float):
            return float(text)
    except ValueError:
        kind = _OPTIONAL_KINDS.get(key, str).__name__ if current is None else type(current).__name__
        raise ConfigError(f"{key}: expected {kind}, got {text!r}", line, source) from None
    return text
