"""Sub-command implementations behind ``main.py``.

Each command takes the parsed ``argparse`` namespace and returns an exit
code: 0 success, 1 fatal error, 2 finished with degraded frame pairs.
"""

from __future__ import annotations

import argparse
import csv
import logging
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from providers import make_flow_provider

from .config import PipelineConfig, apply_overrides, load_config
from .core import FlowFusion, FramePairResult, SequenceResult
from .dataset_io import (
    flow_file_name,
    load_tum_sequence,
    read_flow_file,
    write_flow_file,
    write_mask_png,
    write_tum_sequence,
)
from .errors import ConfigError, FlowFusionError, InsufficientDataError
from .evaluation import compute_ate, compute_rpe, summary_line, write_error_csv
from .frames import FlowField, RgbdFrame
from .manifest import RunManifest
from .runtime import apply_thread_limit
from .static_map import accumulate_static_map, write_point_cloud
from .synthetic import dump_scene_spec, generate_synthetic_sequence, load_scene_spec
from .trajectory import Trajectory, read_trajectory_file, write_trajectory_file
from .vo_solver import write_diagnostics_csv

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FATAL = 1
EXIT_DEGRADED = 2

GT_FLOW_DIR = "gt_flow"
GT_MASK_DIR = "gt_masks"
MASK_DIR = "masks"


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

def cmd_run(args: argparse.Namespace) -> int:
    out: Optional[Path] = Path(args.out) if getattr(args, "out", None) else None
    manifest = RunManifest(command="run", output_dir=str(out or ""))
    exit_code, error = EXIT_FATAL, None
    try:
        config = resolve_run_config(args)
        manifest.config = config.to_flat_dict()
        if not config.out:
            raise ConfigError("no output directory: give --out or set pipeline.out")
        out = Path(config.out)
        manifest.output_dir = str(out)
        apply_thread_limit()

        started = time.perf_counter()
        frames, gt_trajectory, gt_flows = _load_input(config, manifest)
        manifest.record_stage("load", time.perf_counter() - started)

        provider = make_flow_provider(config.flow, gt_flows)
        manifest.inputs["flow"] = provider.describe()
        pipeline = FlowFusion(provider, config)
        result = pipeline.process_sequence(frames)
        for stage, seconds in pipeline.timings.items():
            manifest.record_stage(stage, seconds)

        started = time.perf_counter()
        _write_run_outputs(out, frames, result, config, manifest)
        if gt_trajectory is not None:
            _record_metrics(result.trajectory, gt_trajectory, config.rpe_delta, manifest)
        manifest.record_stage("write", time.perf_counter() - started)

        manifest.degraded_pairs = len(result.degraded_pairs)
        exit_code = EXIT_DEGRADED if result.degraded_pairs else EXIT_OK
        if result.degraded_pairs:
            logger.warning("%d of %d pair(s) degraded", len(result.degraded_pairs), len(result.pairs))
    except (FlowFusionError, OSError) as exc:
        error = str(exc)
        logger.error("Error: %s", exc)
    finally:
        manifest.finish(exit_code, error)
        if out is not None:
            try:
                manifest.write(out)
            except OSError as exc:
                logger.error("Error: cannot write manifest: %s", exc)
    return exit_code


def resolve_run_config(args: argparse.Namespace) -> PipelineConfig:
    """Defaults, then the config file, then command-line flags.

    An input flag replaces both input keys of the file, so ``--dataset``
    wins over a file's ``pipeline.synthetic_spec`` and the other way round.
    """
    config = load_config(args.config) if getattr(args, "config", None) else PipelineConfig()
    overrides: Dict[str, object] = {}
    if getattr(args, "dataset", None):
        overrides["pipeline.dataset"] = args.dataset
        overrides["pipeline.synthetic_spec"] = None
    if getattr(args, "synthetic_spec", None):
        overrides["pipeline.synthetic_spec"] = args.synthetic_spec
        overrides["pipeline.dataset"] = None
    if getattr(args, "out", None):
        overrides["pipeline.out"] = args.out
    if getattr(args, "flow", None):
        overrides["pipeline.flow"] = args.flow
    if getattr(args, "no_segmentation", False):
        overrides["pipeline.segmentation_enabled"] = False
    if getattr(args, "seed", None) is not None:
        overrides["pipeline.seed"] = args.seed
    if getattr(args, "max_outer_iters", None) is not None:
        overrides["pipeline.max_outer_iterations"] = args.max_outer_iters
    if not overrides:
        return config
    return apply_overrides(config, overrides, source="command line")


def _load_input(
    config: PipelineConfig, manifest: RunManifest
) -> Tuple[List[RgbdFrame], Optional[Trajectory], Optional[List[FlowField]]]:
    dataset, spec_path = config.dataset, config.synthetic_spec
    if bool(dataset) == bool(spec_path):
        raise ConfigError(
            "give exactly one input: --dataset / pipeline.dataset or --synthetic-spec / pipeline.synthetic_spec"
        )

    if spec_path:
        manifest.inputs["synthetic_spec"] = str(spec_path)
        spec = load_scene_spec(spec_path)
        if config.seed is not None:
            spec = spec.with_seed(config.seed)
        manifest.inputs["texture_seed"] = str(spec.texture_seed)
        frames, truth = generate_synthetic_sequence(spec)
        return frames, truth.trajectory([f.timestamp for f in frames]), list(truth.flows)

    manifest.inputs["dataset"] = str(dataset)
    sequence = load_tum_sequence(dataset)
    if len(sequence) < 2:
        raise InsufficientDataError(f"{dataset}: need at least 2 frames, loaded {len(sequence)}")
    gt_flows = _read_gt_flows(Path(dataset), sequence.frames) if config.flow == "exact" else None
    return sequence.frames, sequence.ground_truth(), gt_flows


def _read_gt_flows(directory: Path, frames: Sequence[RgbdFrame]) -> Optional[List[FlowField]]:
    flow_dir = directory / GT_FLOW_DIR
    if not flow_dir.is_dir():
        return None
    shape = frames[0].shape
    return [read_flow_file(flow_dir / flow_file_name(k, k + 1), shape) for k in range(len(frames) - 1)]


def _write_run_outputs(
    out: Path,
    frames: Sequence[RgbdFrame],
    result: SequenceResult,
    config: PipelineConfig,
    manifest: RunManifest,
) -> None:
    out.mkdir(parents=True, exist_ok=True)

    trajectory_path = out / "trajectory.txt"
    write_trajectory_file(result.trajectory, trajectory_path)
    manifest.record_output("trajectory", trajectory_path)

    for pair in result.pairs:
        write_mask_png(pair.mask, out / MASK_DIR / f"mask_{pair.index_a:06d}.png")
    manifest.record_output("masks", out / MASK_DIR)

    diagnostics_path = out / "diagnostics.csv"
    write_pair_diagnostics(result.pairs, diagnostics_path)
    manifest.record_output("diagnostics", diagnostics_path)

    scores_path = out / "scores.csv"
    write_scores_csv(result.pairs, scores_path)
    manifest.record_output("scores", scores_path)

    vo_path = out / "vo_diagnostics.csv"
    vo_path.unlink(missing_ok=True)
    for pair in result.pairs:
        write_diagnostics_csv(pair.vo.iterations if pair.vo is not None else (), vo_path, pair=pair.index_a)
    manifest.record_output("vo_diagnostics", vo_path)

    keyframes = Trajectory(result.trajectory.timestamps[:-1], result.trajectory.poses[:-1])
    cloud = accumulate_static_map(frames[:-1], keyframes, result.masks, config.map_voxel_size)
    map_path = out / "static_map.txt"
    write_point_cloud(cloud, map_path)
    manifest.record_output("static_map", map_path)
    logger.info("Wrote results to %s", out)


PAIR_COLUMNS = (
    "pair", "iteration", "degraded", "converged", "vo_energy", "score_energy", "changed_scores",
    "max_score_change", "step_norm", "dynamic_pixels", "clusters", "max_b", "mean_b",
)


def write_pair_diagnostics(pairs: Sequence[FramePairResult], path: Path) -> None:
    """One row per outer iteration; pairs without outer iterations get a row with iteration 0."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(PAIR_COLUMNS)
        for pair in pairs:
            b = pair.scores.b
            head = [pair.index_a]
            tail = [len(b), f"{b.max(initial=0.0):.6f}", f"{b.mean() if b.size else 0.0:.6f}"]
            flags = [int(pair.degraded), int(pair.converged)]
            if not pair.iterations:
                writer.writerow(head + [0] + flags + ["", "", 0, "0.000000", "0", int(pair.mask.sum())] + tail)
                continue
            for it in pair.iterations:
                writer.writerow(
                    head + [it.iteration] + flags + [
                        f"{it.vo_energy:.9g}", f"{it.score_energy:.9g}", it.changed_scores,
                        f"{it.max_score_change:.6f}", f"{it.step_norm:.3e}", it.dynamic_pixels,
                    ] + tail
                )


def write_scores_csv(pairs: Sequence[FramePairResult], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["pair", "cluster", "b"])
        for pair in pairs:
            for i, value in enumerate(pair.scores.b):
                writer.writerow([pair.index_a, i, f"{value:.6f}"])


def _record_metrics(est: Trajectory, gt: Trajectory, delta: float, manifest: RunManifest) -> None:
    try:
        manifest.metrics["ate_rmse"] = compute_ate(est, gt).rmse
    except InsufficientDataError as exc:
        logger.info("ATE skipped: %s", exc)
    try:
        manifest.metrics["rpe_rmse"] = compute_rpe(est, gt, delta).rmse
    except InsufficientDataError as exc:
        logger.info("RPE skipped: %s", exc)


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(args: argparse.Namespace) -> int:
    try:
        est = read_trajectory_file(args.estimate)
        gt = read_trajectory_file(args.groundtruth)
        ate = compute_ate(est, gt)
        rpe = compute_rpe(est, gt, args.delta)
        out = Path(args.out)
        write_error_csv(ate, out / "ate.csv")
        write_error_csv(rpe, out / "rpe.csv")
    except (FlowFusionError, OSError) as exc:
        logger.error("Error: %s", exc)
        return EXIT_FATAL
    print(summary_line(ate, rpe))
    return EXIT_OK


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(args: argparse.Namespace) -> int:
    """Render a scene spec into a TUM-layout directory with ground-truth flow and masks."""
    try:
        spec = load_scene_spec(args.spec)
        if getattr(args, "seed", None) is not None:
            spec = spec.with_seed(args.seed)
        frames, truth = generate_synthetic_sequence(spec)
        out = Path(args.out)
        write_tum_sequence(out, frames, truth.trajectory([f.timestamp for f in frames]).poses)
        for k, flow in enumerate(truth.flows):
            write_flow_file(flow, out / GT_FLOW_DIR / flow_file_name(k, k + 1))
        for k, mask in enumerate(truth.masks):
            write_mask_png(mask, out / GT_MASK_DIR / f"mask_{k:06d}.png")
        (out / "scene.cfg").write_text(dump_scene_spec(spec), encoding="utf-8")
    except (FlowFusionError, OSError) as exc:
        logger.error("Error: %s", exc)
        return EXIT_FATAL
    logger.info("Wrote %d frame(s) to %s", len(frames), out)
    return EXIT_OK
