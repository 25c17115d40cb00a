"""Geometry refinement: bundle adjustment alternated with track topology
adjustment and outlier filtering, then keypoint reprojection."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.spatial import cKDTree

from .bundle import BAConfig, BAReport, bundle_adjust
from .errors import EmptyInputError, SfMError
from .geometry import MIN_DEPTH, Observation2D, project_points, triangulate_multiview
from .model import FeatureTrack, SceneModel

log = logging.getLogger(__name__)


@dataclass
class RefineConfig:
    epsilon_px: float = 3.0
    ba_ta_rounds: int = 5
    merge_threshold_px: float = 3.0
    completion_threshold_px: float = 3.0
    ba: BAConfig = field(default_factory=BAConfig)


@dataclass
class RoundLog:
    round: int
    ba: BAReport
    completed: int
    merged: int
    filtered: int
    points: int
    observations: int


def _project_all(model: SceneModel, image_id: int, pids: np.ndarray):
    X = np.array([model.points[p].xyz for p in pids]).reshape(-1, 3)
    return project_points(X, model.poses[image_id], model.cameras[image_id])


def filter_outliers(model: SceneModel, epsilon_px: float) -> int:
    """Drop observations reprojecting worse than ``epsilon_px`` (or behind the camera).

    Removed observations return to the unassigned pool; tracks left with fewer
    than two observations are deleted together with their points.
    """
    if not model.tracks:
        return 0
    pids, iids, xy = model.observation_arrays()
    bad = np.zeros(len(pids), dtype=bool)
    for image_id in np.unique(iids):
        sel = np.flatnonzero(iids == image_id)
        uv, z = _project_all(model, image_id, pids[sel])
        err = np.linalg.norm(uv - xy[sel], axis=1)
        bad[sel] = (z <= MIN_DEPTH) | ~(err <= epsilon_px)
    removed = 0
    drop = {}
    for pid, iid in zip(pids[bad], iids[bad]):
        drop.setdefault(int(pid), set()).add(int(iid))
    for pid, images in drop.items():
        track = model.tracks[pid]
        keep = []
        for o in track.observations:
            if o.image_id in images:
                model.add_unassigned(o.image_id, o.xy)
                track.variances.pop(o.image_id, None)
                removed += 1
            else:
                keep.append(o)
        track.observations = keep
    for pid in list(drop):
        if len(model.tracks[pid]) < 2:
            model.remove_point(pid)
    return removed


def reproject_keypoints(model: SceneModel) -> int:
    """Replace every observation by the projection of its point.

    Observations whose projection falls behind the camera or outside the image
    are dropped; returns the number dropped.
    """
    dropped = 0
    for pid in list(model.tracks):
        track = model.tracks[pid]
        keep = []
        for o in track.observations:
            cam = model.cameras[o.image_id]
            uv, z = project_points(model.points[pid].xyz[None], model.poses[o.image_id], cam)
            if z[0] > MIN_DEPTH and cam.contains(uv[0]):
                keep.append(o.moved(uv[0]))
            else:
                dropped += 1
        track.observations = keep
        if len(keep) < 2:
            model.remove_point(pid, to_pool=False)
    return dropped


def _complete_tracks(model: SceneModel, threshold: float) -> int:
    """Attach unassigned keypoints that a point reprojects onto."""
    in_image = model.points_in_image()
    all_pids = np.array(sorted(model.points), dtype=int)
    added = 0
    for image_id in sorted(model.unassigned):
        pool = model.unassigned[image_id]
        if image_id not in model.poses or len(pool) == 0 or len(all_pids) == 0:
            continue
        cand = np.array([p for p in all_pids if p not in in_image.get(image_id, ())], dtype=int)
        if len(cand) == 0:
            continue
        uv, z = _project_all(model, image_id, cand)
        front = z > MIN_DEPTH
        cand, uv = cand[front], uv[front]
        if len(cand) == 0:
            continue
        tree = cKDTree(pool)
        hits = tree.query_ball_point(uv, threshold)
        pairs = []
        for k, obs_idx in enumerate(hits):
            for j in obs_idx:
                pairs.append((float(np.linalg.norm(uv[k] - pool[j])), int(cand[k]), j))
        pairs.sort()
        used_pts, used_obs = set(), set()
        for err, pid, j in pairs:
            if err >= threshold or pid in used_pts or j in used_obs:
                continue
            used_pts.add(pid)
            used_obs.add(j)
            model.tracks[pid].observations.append(Observation2D(image_id, pool[j]))
            added += 1
        if used_obs:
            keep = np.ones(len(pool), dtype=bool)
            keep[sorted(used_obs)] = False
            model.unassigned[image_id] = pool[keep]
    return added


def _track_errors(model: SceneModel, xyz: np.ndarray, track: FeatureTrack) -> np.ndarray:
    errs = []
    for o in track.observations:
        uv, z = project_points(xyz[None], model.poses[o.image_id], model.cameras[o.image_id])
        errs.append(np.linalg.norm(uv[0] - o.xy) if z[0] > MIN_DEPTH else np.inf)
    return np.array(errs)


def _merge_tracks(model: SceneModel, threshold: float, min_angle_deg: float = 0.0) -> int:
    """Merge track pairs whose points explain each other's observations."""
    pids = np.array(sorted(model.points), dtype=int)
    if len(pids) < 2:
        return 0
    xyz = np.array([model.points[p].xyz for p in pids])
    # world-space radius corresponding to the pixel threshold at each point
    radius = np.empty(len(pids))
    for k, pid in enumerate(pids):
        scale = 0.0
        for o in model.tracks[pid].observations:
            pose, cam = model.poses[o.image_id], model.cameras[o.image_id]
            depth = float(pose.rotation[2] @ xyz[k] + pose.translation[2])
            scale = max(scale, abs(depth) / min(cam.fx, cam.fy))
        radius[k] = scale * threshold
    tree = cKDTree(xyz)
    candidates = []
    for a, b in sorted(tree.query_pairs(r=4.0 * float(radius.max()))):
        d = float(np.linalg.norm(xyz[a] - xyz[b]))
        if d <= 2.0 * (radius[a] + radius[b]):
            candidates.append((d, int(pids[a]), int(pids[b])))
    candidates.sort()
    merged = 0
    for _, pa, pb in candidates:
        if pa not in model.tracks or pb not in model.tracks:
            continue
        ta, tb = model.tracks[pa], model.tracks[pb]
        if set(ta.image_ids) & set(tb.image_ids):
            continue
        if np.any(_track_errors(model, model.points[pa].xyz, tb) >= threshold):
            continue
        if np.any(_track_errors(model, model.points[pb].xyz, ta) >= threshold):
            continue
        union = FeatureTrack(ta.observations + tb.observations,
                             {**ta.variances, **tb.variances}, ta.refined and tb.refined)
        try:
            tri = triangulate_multiview(
                [(o, model.poses[o.image_id], model.cameras[o.image_id]) for o in union.observations],
                min_angle_deg=min_angle_deg)
        except SfMError:
            continue
        model.points[pa].xyz = tri.xyz
        model.tracks[pa] = union
        model.remove_point(pb, to_pool=False)
        merged += 1
    return merged


def adjust_topology(model: SceneModel, config: Optional[RefineConfig] = None) -> tuple[int, int]:
    """Track completion followed by track merging; returns ``(completed, merged)``."""
    config = config or RefineConfig()
    completed = _complete_tracks(model, config.completion_threshold_px)
    merged = _merge_tracks(model, config.merge_threshold_px)
    return completed, merged


def refine_geometry(model: SceneModel, config: Optional[RefineConfig] = None, *,
                    reproject: bool = True,
                    monitor: Optional[Callable[[SceneModel, RoundLog], None]] = None) -> list[RoundLog]:
    """Alternate ``[bundle_adjust, adjust_topology, filter_outliers]`` and reproject keypoints."""
    config = config or RefineConfig()
    if not model.tracks:
        raise EmptyInputError("model has no tracks to refine")
    logs = []
    for k in range(config.ba_ta_rounds):
        report = bundle_adjust(model, config.ba)
        completed, merged = adjust_topology(model, config)
        filtered = filter_outliers(model, config.epsilon_px)
        entry = RoundLog(k + 1, report, completed, merged, filtered,
                         len(model.points), model.observation_count())
        log.info("refine round %d: cost %.4g -> %.4g, +%d obs, %d merges, %d filtered",
                 k + 1, report.initial_cost, report.final_cost, completed, merged, filtered)
        logs.append(entry)
        if monitor is not None:
            monitor(model, entry)
        if not model.tracks:
            raise EmptyInputError("all tracks were filtered out")
    if reproject:
        reproject_keypoints(model)
    return logs
