"""Coarse-to-fine reconstruction: match ingest, coarse mapping, iterative refinement."""

from __future__ import annotations

import dataclasses
import itertools
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from . import colmap_io
from .config import PipelineConfig
from .errors import EmptyInputError, InputMissingError
from .evaluation import EvalReport, evaluate_model
from .geo_refine import RoundLog, refine_geometry
from .geometry import CameraIntrinsics
from .mapper import run_incremental
from .matching import (
    RawMatchPair,
    build_tracks,
    coarse_grid_match,
    default_verify_threshold,
    dropped_nodes,
    quantize_matches,
    read_match_file,
    verify_pair_geometric,
)
from .model import SceneModel
from .track_refine import refine_tracks

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp", ".pgm")


@dataclass
class PipelineInputs:
    pairs: list[RawMatchPair]
    cameras: dict[int, CameraIntrinsics]
    names: dict[int, str]
    images: dict[int, np.ndarray] = field(default_factory=dict)


@dataclass
class PipelineResult:
    model: SceneModel
    coarse_model: SceneModel
    round_logs: list[list[RoundLog]]
    runtimes: dict[str, float]
    metrics: dict[str, float]
    report: Optional[EvalReport] = None
    stage_models: list[SceneModel] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Inputs
# ---------------------------------------------------------------------------


def list_images(image_dir) -> list[str]:
    if not image_dir or not os.path.isdir(image_dir):
        raise InputMissingError(f"image directory not found: {image_dir}")
    return sorted(f for f in os.listdir(image_dir) if f.lower().endswith(IMAGE_EXTENSIONS))


def match_images(images: Mapping[int, np.ndarray], r: int, min_confidence: float = 0.8,
                 pairs: Optional[Sequence[tuple[int, int]]] = None) -> list[RawMatchPair]:
    """Exhaustive (or listed) pairwise grid matching."""
    ids = sorted(images)
    pairs = list(itertools.combinations(ids, 2)) if pairs is None else pairs
    return [coarse_grid_match(images[a], images[b], r=max(r, 4), min_confidence=min_confidence,
                              image_ids=(a, b)) for a, b in pairs]


def load_inputs(config: PipelineConfig) -> PipelineInputs:
    """Read matches, intrinsics and images named by the configuration."""
    intr_by_name = {}
    if config.intrinsics_file:
        intr_by_name = colmap_io.read_intrinsics(config.intrinsics_file)
    image_names = list_images(config.image_dir) if config.image_dir else []

    if config.match_file:
        raw = read_match_file(config.match_file)
        names = sorted({p.image_a for p in raw} | {p.image_b for p in raw} | set(image_names))
    elif image_names:
        raw = None
        names = image_names
    else:
        raise InputMissingError("neither a match file nor an image directory was given")
    ids = {n: i for i, n in enumerate(names)}

    images = {}
    if config.image_dir:
        for n in names:
            p = os.path.join(config.image_dir, n)
            if os.path.exists(p):
                images[ids[n]] = colmap_io.load_image(p)
    cameras = {}
    for n in names:
        i = ids[n]
        if n in intr_by_name:
            cameras[i] = intr_by_name[n]
        elif i in images:
            h, w = images[i].shape
            cameras[i] = CameraIntrinsics.from_image_size(w, h)
    missing = [n for n in names if ids[n] not in cameras]

    if raw is None:
        pairs = match_images(images, config.r)
    else:
        pairs = [RawMatchPair(ids[p.image_a], ids[p.image_b], p.xy_a, p.xy_b, p.confidence) for p in raw]
    if missing:
        # size unknown: bound by the matches themselves
        for n in missing:
            i = ids[n]
            pts = [p.xy_a for p in pairs if p.image_a == i] + [p.xy_b for p in pairs if p.image_b == i]
            if not pts:
                continue
            ext = np.ceil(np.vstack(pts).max(axis=0)).astype(int) + 1
            cameras[i] = CameraIntrinsics.from_image_size(int(ext[0]), int(ext[1]))
    return PipelineInputs(pairs, cameras, {ids[n]: n for n in names}, images)


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def verify_threshold(config: PipelineConfig, cameras: Mapping[int, CameraIntrinsics]) -> float:
    if config.ransac_threshold_px is not None:
        return float(config.ransac_threshold_px)
    w = max(c.width for c in cameras.values())
    h = max(c.height for c in cameras.values())
    return default_verify_threshold(w, h)


def coarse_tracks(pairs: Sequence[RawMatchPair], cameras: Mapping[int, CameraIntrinsics],
                  config: PipelineConfig):
    """Quantize, verify and chain matches; returns ``(tracks, leftover nodes, verified pairs)``."""
    thr = verify_threshold(config, cameras)
    verified = []
    for k, pair in enumerate(pairs):
        ca, cb = cameras.get(pair.image_a), cameras.get(pair.image_b)
        q = quantize_matches(pair, config.r, (ca.width, ca.height) if ca else None,
                             (cb.width, cb.height) if cb else None)
        v = verify_pair_geometric(q, thr, config.min_pair_inliers, seed=config.seed + k)
        if v is not None:
            verified.append(v)
    tracks = build_tracks(verified)
    return tracks, dropped_nodes(verified, tracks), verified


def _stage_configs(config: PipelineConfig):
    ba = dataclasses.replace(config.refine.ba, refine_intrinsics=not config.intrinsics_known)
    refine = dataclasses.replace(config.refine, ba=ba)
    mapper = dataclasses.replace(config.mapper, refine_intrinsics=not config.intrinsics_known,
                                 seed=config.seed)
    refiner = dataclasses.replace(config.refiner, threads=max(config.threads, config.refiner.threads))
    return mapper, refine, refiner


def run_pipeline(config: PipelineConfig, inputs: Optional[PipelineInputs] = None, *,
                 gt_poses=None, gt_cloud=None,
                 round_monitor: Optional[Callable] = None,
                 ba_observer: Optional[Callable] = None,
                 keep_stages: bool = False) -> PipelineResult:
    """Coarse SfM followed by ``refine_iterations`` x (track refinement, geometry refinement).

    ``round_monitor(model, round_log)`` runs after every BA/TA round and
    ``ba_observer(report)`` after every bundle adjustment, including the
    coarse mapper's.
    """
    runtimes = {}
    t0 = time.perf_counter()
    inputs = inputs or load_inputs(config)
    if not inputs.pairs:
        raise EmptyInputError("no matches")
    mapper_cfg, refine_cfg, refiner_cfg = _stage_configs(config)
    if ba_observer is not None:
        mapper_cfg = dataclasses.replace(mapper_cfg, ba=dataclasses.replace(mapper_cfg.ba, observer=ba_observer))
        refine_cfg = dataclasses.replace(refine_cfg, ba=dataclasses.replace(refine_cfg.ba, observer=ba_observer))
    threshold = verify_threshold(config, inputs.cameras)
    # quantization alone moves keypoints by up to r/sqrt(2) px per axis pair
    mapper_cfg = dataclasses.replace(mapper_cfg, reproj_threshold_px=max(threshold, float(config.r)))

    tracks, leftovers, verified = coarse_tracks(inputs.pairs, inputs.cameras, config)
    runtimes["matching"] = time.perf_counter() - t0
    log.info("%d verified pairs, %d coarse tracks", len(verified), len(tracks))
    if not tracks:
        raise EmptyInputError("no tracks survived verification")

    t1 = time.perf_counter()
    model = run_incremental(tracks, inputs.cameras, mapper_cfg, names=inputs.names,
                            extra_keypoints=leftovers)
    runtimes["coarse_sfm"] = time.perf_counter() - t1
    coarse = model.copy()
    stages = [coarse] if keep_stages else []
    out_dir = Path(config.output_dir) if config.output_dir else None
    if out_dir is not None and config.export_coarse:
        colmap_io.write_model(coarse, out_dir / "coarse")

    t2 = time.perf_counter()
    logs, refined_stages = refine_model(model, inputs.images, config, refine_cfg=refine_cfg,
                                        refiner_cfg=refiner_cfg, round_monitor=round_monitor,
                                        keep_stages=keep_stages)
    stages.extend(refined_stages)
    runtimes["refinement"] = time.perf_counter() - t2

    metrics = summarize(model, coarse, logs, runtimes)
    report = None
    if gt_poses is not None:
        report = evaluate_model(model, gt_poses, gt_cloud)
        report.runtimes = dict(runtimes)
        metrics.update(report.as_metrics())
    runtimes["total"] = time.perf_counter() - t0
    metrics["runtime_total_s"] = runtimes["total"]
    result = PipelineResult(model, coarse, logs, runtimes, metrics, report, stages)
    if out_dir is not None:
        write_outputs(result, out_dir)
    return result


def refine_model(model: SceneModel, images: Mapping[int, np.ndarray], config: PipelineConfig, *,
                 refine_cfg=None, refiner_cfg=None, round_monitor: Optional[Callable] = None,
                 keep_stages: bool = False):
    """Run the refinement iterations on ``model`` in place; returns ``(round logs, stage copies)``."""
    if refine_cfg is None or refiner_cfg is None:
        _, r_cfg, t_cfg = _stage_configs(config)
        refine_cfg = refine_cfg or r_cfg
        refiner_cfg = refiner_cfg or t_cfg
    if config.refine_iterations > 0 and not images:
        raise InputMissingError("refinement needs images; set image_dir or refine_iterations = 0")
    logs, stages = [], []
    for it in range(config.refine_iterations):
        flags = refine_tracks(model, images, refiner_cfg)
        last = it == config.refine_iterations - 1
        # the final reprojection is skipped so observations keep refined locations
        logs.append(refine_geometry(model, refine_cfg, reproject=not last, monitor=round_monitor))
        log.info("iteration %d: %d/%d tracks refined, %d points", it + 1, sum(flags.values()),
                 len(flags), len(model.points))
        if keep_stages:
            stages.append(model.copy())
    return logs, stages


def summarize(model: SceneModel, coarse: SceneModel, logs, runtimes) -> dict[str, float]:
    err = model.reprojection_errors()
    m = {
        "num_images": len(model.cameras),
        "num_registered": len(model.poses),
        "registration_rate": len(model.poses) / max(len(model.cameras), 1),
        "num_points": len(model.points),
        "num_observations": model.observation_count(),
        "mean_track_length": model.observation_count() / max(len(model.points), 1),
        "mean_reprojection_error_px": float(err.mean()) if len(err) else 0.0,
        "coarse_num_points": len(coarse.points),
        "coarse_mean_reprojection_error_px": coarse.mean_reprojection_error(),
    }
    for it, rounds in enumerate(logs, 1):
        for r in rounds:
            pre = f"iter{it}_round{r.round}"
            m[f"{pre}_initial_cost"] = r.ba.initial_cost
            m[f"{pre}_final_cost"] = r.ba.final_cost
            m[f"{pre}_completed"] = r.completed
            m[f"{pre}_merged"] = r.merged
            m[f"{pre}_filtered"] = r.filtered
    for k, v in runtimes.items():
        m[f"runtime_{k}_s"] = v
    return m


def format_metrics(metrics: Mapping[str, float]) -> str:
    lines = []
    for k, v in metrics.items():
        if isinstance(v, (int, np.integer)):
            lines.append(f"{k} = {int(v)}")
        else:
            lines.append(f"{k} = {float(v):.9g}")
    return "\n".join(lines) + "\n"


def write_metrics(path, metrics: Mapping[str, float]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(format_metrics(metrics))


def read_metrics(path) -> dict[str, float]:
    out = {}
    with open(path, encoding="utf-8") as f:
        for ln in f:
            if "=" in ln:
                k, v = ln.split("=", 1)
                out[k.strip()] = float(v)
    return out


def write_outputs(result: PipelineResult, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    colmap_io.write_model(result.model, out_dir / "model")
    colmap_io.model_ply(result.model, out_dir / "points.ply")
    # the model directory is reproducible; only metrics.txt carries timings
    write_metrics(out_dir / "metrics.txt", result.metrics)
