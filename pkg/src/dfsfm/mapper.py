"""Incremental coarse SfM from quantized feature tracks."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .bundle import BAConfig, bundle_adjust
from .errors import (
    EmptyInputError,
    InitializationError,
    InsufficientDataError,
    SfMError,
)
from .geometry import (
    CameraIntrinsics,
    Observation2D,
    Pose,
    pixel_to_normalized,
    ray_angles_deg,
    solve_pnp_ransac,
    solve_relative_pose_ransac,
    triangulate_multiview,
    triangulate_two_view,
)
from .geo_refine import filter_outliers
from .matching import QuantizedMatchPair
from .model import FeatureTrack, SceneModel

log = logging.getLogger(__name__)


@dataclass
class MapperConfig:
    reproj_threshold_px: float = 4.0
    min_triangulation_angle_deg: float = 1.5
    min_registration_inliers: int = 15
    # global BA whenever the registered set grew by this fraction of all images
    global_ba_interval: float = 0.25
    local_ba_min_shared: int = 20
    init_min_points: int = 30
    refine_intrinsics: bool = False
    seed: int = 0
    ba: BAConfig = field(default_factory=BAConfig)

    def __post_init__(self):
        if min(self.reproj_threshold_px, self.min_triangulation_angle_deg,
               self.min_registration_inliers, self.global_ba_interval) <= 0:
            raise ValueError("mapper configuration values must be positive")


def pairs_from_tracks(tracks: Sequence[FeatureTrack]) -> list[QuantizedMatchPair]:
    """Pairwise correspondences implied by track co-occurrence."""
    acc: dict[tuple, list] = {}
    for track in tracks:
        obs = sorted(track.observations, key=lambda o: o.image_id)
        for i in range(len(obs)):
            for j in range(i + 1, len(obs)):
                acc.setdefault((obs[i].image_id, obs[j].image_id), []).append(
                    (obs[i].xy, obs[j].xy, min(obs[i].confidence, obs[j].confidence)))
    pairs = []
    for (a, b), rows in sorted(acc.items()):
        pairs.append(QuantizedMatchPair(a, b, [r[0] for r in rows], [r[1] for r in rows],
                                        [r[2] for r in rows]))
    return pairs


def _init_candidates(pairs, cameras, config: MapperConfig):
    """Valid initial pairs ordered by inlier count, then by image ids."""
    scored = []
    for pair in pairs:
        if len(pair) < 8:
            continue
        try:
            pose, mask = solve_relative_pose_ransac(
                pair.xy_a, pair.xy_b, cameras[pair.image_a], cameras[pair.image_b],
                config.reproj_threshold_px, config.min_triangulation_angle_deg, seed=config.seed)
        except SfMError:
            continue
        a, b = sorted((pair.image_a, pair.image_b))
        scored.append((-int(mask.sum()), a, b, pair, pose, mask))
    scored.sort(key=lambda s: s[:3])
    return scored


def select_init_pair(pairs: Sequence[QuantizedMatchPair], cameras: dict[int, CameraIntrinsics],
                     config: Optional[MapperConfig] = None) -> tuple:
    """Pair with most essential-matrix inliers among those with enough parallax."""
    config = config or MapperConfig()
    if not pairs:
        raise EmptyInputError("no verified pairs")
    scored = _init_candidates(pairs, cameras, config)
    if not scored:
        raise InitializationError("every candidate pair is degenerate")
    return scored[0][1], scored[0][2]


# ---------------------------------------------------------------------------
# Mapper state
# ---------------------------------------------------------------------------


class _Index:
    """Lookup from image to the coarse tracks observing it."""

    def __init__(self, tracks: Sequence[FeatureTrack]):
        self.by_image: dict[int, list[tuple[int, Observation2D]]] = {}
        for ti, track in enumerate(tracks):
            for o in track.observations:
                self.by_image.setdefault(o.image_id, []).append((ti, o))


def _track_to_point(model: SceneModel) -> dict[int, int]:
    return {p.track_id: pid for pid, p in model.points.items() if p.track_id >= 0}


def register_image(model: SceneModel, image_id: int, tracks: Sequence[FeatureTrack],
                   config: Optional[MapperConfig] = None, _index: Optional[_Index] = None) -> bool:
    """Register ``image_id`` by PnP on its 2D-3D correspondences.

    Returns ``False`` (deferred) when there are too few candidates or inliers.
    Inlier observations are appended to the tracks of their points.
    """
    config = config or MapperConfig()
    index = _index or _Index(tracks)
    t2p = _track_to_point(model)
    corr = [(t2p[ti], o) for ti, o in index.by_image.get(image_id, []) if ti in t2p]
    if len(corr) < max(4, config.min_registration_inliers):
        return False
    xy = np.array([o.xy for _, o in corr])
    X = np.array([model.points[pid].xyz for pid, _ in corr])
    try:
        pose, mask = solve_pnp_ransac(xy, X, model.cameras[image_id], config.reproj_threshold_px,
                                      min_inliers=config.min_registration_inliers,
                                      seed=config.seed + int(image_id))
    except SfMError:
        return False
    model.register(image_id, pose)
    for (pid, o), inlier in zip(corr, mask):
        track = model.tracks[pid]
        if inlier and track.get(image_id) is None:
            track.observations.append(Observation2D(image_id, o.xy, o.confidence))
    return True


def _triangulate_track(model: SceneModel, track: FeatureTrack, threshold: float, min_angle: float):
    obs = [o for o in track.observations if o.image_id in model.poses]
    while len(obs) >= 2:
        try:
            tri = triangulate_multiview([(o, model.poses[o.image_id], model.cameras[o.image_id])
                                         for o in obs], min_angle_deg=min_angle)
        except SfMError:
            return None
        if tri.max_error <= threshold:
            return tri.xyz, obs
        if len(obs) == 2:
            return None
        # drop the worst observation and retry
        errs = []
        for o in obs:
            pose, cam = model.poses[o.image_id], model.cameras[o.image_id]
            Xc = pose.transform(tri.xyz)
            errs.append(np.linalg.norm(cam.K[:2, :2] @ (Xc[:2] / Xc[2]) + cam.K[:2, 2] - o.xy))
        obs.pop(int(np.argmax(errs)))
    return None


def triangulate_tracks(model: SceneModel, tracks: Sequence[FeatureTrack],
                       threshold_px: float, config: Optional[MapperConfig] = None) -> int:
    """Create points for untriangulated tracks with two or more registered views."""
    config = config or MapperConfig()
    t2p = _track_to_point(model)
    added = 0
    for ti, track in enumerate(tracks):
        if ti in t2p:
            continue
        if sum(o.image_id in model.poses for o in track.observations) < 2:
            continue
        result = _triangulate_track(model, track, threshold_px, config.min_triangulation_angle_deg)
        if result is None:
            continue
        xyz, obs = result
        model.add_point(xyz, FeatureTrack([Observation2D(o.image_id, o.xy, o.confidence) for o in obs]),
                        track_id=ti)
        added += 1
    return added


def _local_ba(model: SceneModel, image_id: int, config: MapperConfig):
    shared: dict[int, int] = {}
    local_points = [pid for pid, t in model.tracks.items() if t.get(image_id) is not None]
    for pid in local_points:
        for o in model.tracks[pid].observations:
            shared[o.image_id] = shared.get(o.image_id, 0) + 1
    variable = {image_id} | {i for i, n in shared.items() if n >= config.local_ba_min_shared}
    points = {pid for pid, t in model.tracks.items() if any(o.image_id in variable for o in t)}
    if not points:
        return None
    const = sorted({o.image_id for pid in points for o in model.tracks[pid]} - variable)
    return bundle_adjust(model, config.ba, variable_images=sorted(variable),
                         constant_images=const, point_ids=points)


def _global_ba(model: SceneModel, config: MapperConfig):
    ba = dataclasses.replace(config.ba, refine_intrinsics=config.refine_intrinsics and len(model.poses) >= 3)
    return bundle_adjust(model, ba)


def _next_candidates(model: SceneModel, index: _Index, failed: set) -> list[int]:
    t2p = _track_to_point(model)
    scores = []
    for image_id, items in index.by_image.items():
        if image_id in model.poses or image_id in failed:
            continue
        visible = sum(1 for ti, _ in items if ti in t2p)
        if visible > 0:
            scores.append((-visible, image_id))
    scores.sort()
    return [i for _, i in scores]


def run_incremental(tracks: Sequence[FeatureTrack], cameras: dict[int, CameraIntrinsics],
                    config: Optional[MapperConfig] = None,
                    names: Optional[dict[int, str]] = None,
                    extra_keypoints: Optional[dict] = None,
                    monitor=None) -> SceneModel:
    """Incremental mapping: initialize, then register, triangulate, adjust, filter."""
    config = config or MapperConfig()
    tracks = [t for t in tracks if len(t) >= 2]
    if not tracks:
        raise EmptyInputError("no tracks to reconstruct")
    pairs = pairs_from_tracks(tracks)
    candidates = _init_candidates(pairs, cameras, config)
    if not candidates:
        raise InitializationError("no pair with enough parallax")
    index = _Index(tracks)
    n_images = len(index.by_image)

    model = None
    for _, a, b, pair, rel, _mask in candidates[:10]:
        trial = SceneModel(cameras=dict(cameras), image_names=dict(names or {}),
                           intrinsics_known=not config.refine_intrinsics)
        pose_a = Pose.identity()
        pose_b = rel if pair.image_a == a else rel.inverse()
        trial.register(a, pose_a)
        trial.register(b, pose_b)
        triangulate_tracks(trial, tracks, config.reproj_threshold_px, config)
        if len(trial.points) < config.init_min_points:
            continue
        try:
            _global_ba(trial, config)
        except SfMError:
            continue
        filter_outliers(trial, config.reproj_threshold_px)
        if len(trial.points) >= config.init_min_points:
            model = trial
            break
    if model is None:
        raise InitializationError("no initial pair produced enough points")
    log.info("initialized with images %s", model.registration_order)

    last_global = len(model.poses)
    step = max(1, math.ceil(config.global_ba_interval * n_images))
    failed: set[int] = set()
    while True:
        registered_one = False
        for image_id in _next_candidates(model, index, failed):
            if register_image(model, image_id, tracks, config, _index=index):
                registered_one = True
                break
            failed.add(image_id)
        if not registered_one:
            break
        new_image = model.registration_order[-1]
        # points may have become triangulable: retry deferred images later
        failed.clear()
        triangulate_tracks(model, tracks, config.reproj_threshold_px, config)
        try:
            _local_ba(model, new_image, config)
        except SfMError as exc:
            log.warning("local BA failed: %s", exc)
        filter_outliers(model, config.reproj_threshold_px)
        if len(model.poses) - last_global >= step:
            _global_ba(model, config)
            filter_outliers(model, config.reproj_threshold_px)
            last_global = len(model.poses)
        if monitor is not None:
            monitor(model)
        log.info("registered image %s (%d/%d), %d points", new_image, len(model.poses),
                 n_images, len(model.points))

    triangulate_tracks(model, tracks, config.reproj_threshold_px, config)
    _global_ba(model, config)
    filter_outliers(model, config.reproj_threshold_px)

    # coarse keypoints not explained by a point become the completion pool
    for pid in list(model.tracks):
        if len(model.tracks[pid]) < 2:
            model.remove_point(pid)
    assigned = {(o.image_id, float(o.xy[0]), float(o.xy[1])) for t in model.tracks.values() for o in t}
    pool: dict[int, set] = {}
    for track in tracks:
        for o in track.observations:
            key = (o.image_id, float(o.xy[0]), float(o.xy[1]))
            if o.image_id in model.poses and key not in assigned:
                pool.setdefault(o.image_id, set()).add(key[1:])
    for image_id, xy in (extra_keypoints or {}).items():
        if image_id in model.poses:
            for x, y in np.asarray(xy).reshape(-1, 2):
                if (image_id, float(x), float(y)) not in assigned:
                    pool.setdefault(image_id, set()).add((float(x), float(y)))
    model.unassigned = {}
    for image_id, pts in sorted(pool.items()):
        model.add_unassigned(image_id, np.array(sorted(pts)))
    model.gauge = None
    for pid, p in model.points.items():
        p.track_id = pid
    return model
