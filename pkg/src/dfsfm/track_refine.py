"""Multi-view refinement of feature tracks by patch correlation.

Each track picks a reference view, samples a ``w x w`` grid of reference
locations around its keypoint and correlates the reference feature at each
location against a ``p x p`` patch in every query view. Heatmaps come from a
softmax over correlation scores; their expectation is the refined keypoint
and the trace of their covariance its uncertainty. The candidate with the
smallest total uncertainty wins.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import cv2
import numpy as np

from .geometry import MIN_DEPTH
from .model import FeatureTrack, SceneModel

log = logging.getLogger(__name__)

LOW_TEXTURE_VARIANCE = 1e-8


@dataclass
class RefinerConfig:
    p: int = 15
    w: int = 7
    max_views: int = 16
    tau: float = 0.05
    # half-size of the local window that forms each cell's descriptor
    descriptor_radius: int = 3
    threads: int = 1

    def __post_init__(self):
        if self.p % 2 == 0 or self.w % 2 == 0 or self.p < 3 or self.w < 1:
            raise ValueError("p and w must be odd")
        if self.max_views < 2:
            raise ValueError("max_views must be >= 2")
        if self.tau <= 0:
            raise ValueError("tau must be positive")


@dataclass
class PatchFeature:
    """Dense features on an ``n x n`` grid of 1 px cells around ``center``.

    ``data[i, j]`` is the descriptor of the cell at ``center + (j - h, i - h)``
    with ``h = (n - 1) / 2``; every descriptor is zero-mean and unit-norm per
    channel block (zero where the cell has no texture).
    """

    data: np.ndarray
    center: np.ndarray
    image_id: int = -1

    @property
    def size(self) -> int:
        return self.data.shape[0]

    def center_vector(self) -> np.ndarray:
        h = self.size // 2
        return self.data[h, h]


@dataclass
class PatchHeatmap:
    weights: np.ndarray
    expectation: np.ndarray  # (x, y) in cell coordinates
    variance: float


@dataclass
class CandidateTrack:
    reference: np.ndarray
    queries: dict[int, np.ndarray]
    variances: dict[int, float]

    @property
    def total_uncertainty(self) -> float:
        return float(sum(self.variances.values()))


# ---------------------------------------------------------------------------
# Heatmaps
# ---------------------------------------------------------------------------


def heatmap_stats(weights: np.ndarray) -> tuple[np.ndarray, float]:
    """Expectation ``(x, y)`` and covariance trace of a normalized heatmap.

    ``weights[y, x]`` is the mass at cell ``(x, y)``.
    """
    weights = np.asarray(weights, dtype=float)
    if weights.ndim != 2 or np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
        raise ValueError("heatmap weights must be nonnegative and sum to 1")
    ys, xs = np.indices(weights.shape)
    mx = float((weights * xs).sum())
    my = float((weights * ys).sum())
    var = float((weights * ((xs - mx) ** 2 + (ys - my) ** 2)).sum())
    return np.array([mx, my]), max(var, 0.0)


def softmax2d(scores: np.ndarray, tau: float) -> np.ndarray:
    z = np.asarray(scores, dtype=float) / tau
    z = np.exp(z - z.max())
    return z / z.sum()


def correlate_heatmap(ref_vector: np.ndarray, query: PatchFeature, tau: float) -> PatchHeatmap:
    scores = query.data @ np.asarray(ref_vector)
    weights = softmax2d(scores, tau)
    mu, var = heatmap_stats(weights)
    return PatchHeatmap(weights, mu, var)


# ---------------------------------------------------------------------------
# Features
# ---------------------------------------------------------------------------


def _sample_window(image: np.ndarray, center, size: int) -> np.ndarray:
    """Bilinear ``size x size`` window centred on ``center``."""
    if image.dtype != np.float32:
        image = image.astype(np.float32)
    return cv2.getRectSubPix(image, (size, size), (float(center[0]), float(center[1])))


def extract_patch_feature(image: np.ndarray, center, config: Optional[RefinerConfig] = None,
                          size: Optional[int] = None, image_id: int = -1) -> Optional[PatchFeature]:
    """Features of an ``size x size`` cell grid (default ``p``), or ``None`` if excluded.

    Channels are intensity and its x/y gradients. Each cell's descriptor stacks
    the channels over a ``(2R+1)^2`` neighbourhood, normalized per channel.
    Excluded when the sampled support leaves the image or has no texture.
    """
    config = config or RefinerConfig()
    n = config.p if size is None else size
    R = config.descriptor_radius
    center = np.asarray(center, dtype=float)
    if not np.all(np.isfinite(center)):
        raise ValueError("patch center must be finite")
    h, w = image.shape[:2]
    half = n // 2
    # the cell grid itself must lie inside the image
    if (center[0] - half < 0 or center[1] - half < 0
            or center[0] + half > w - 1 or center[1] + half > h - 1):
        return None
    support = n + 2 * R + 2
    win = _sample_window(image, center, support).astype(np.float64)
    core = win[1:-1, 1:-1]
    if core.var() < LOW_TEXTURE_VARIANCE:
        return None
    gy, gx = np.gradient(win)
    chans = [core, gx[1:-1, 1:-1], gy[1:-1, 1:-1]]
    k = 2 * R + 1
    blocks = []
    for ch in chans:
        v = np.lib.stride_tricks.sliding_window_view(ch, (k, k)).reshape(n, n, k * k)
        v = v - v.mean(axis=2, keepdims=True)
        norm = np.linalg.norm(v, axis=2, keepdims=True)
        v = np.where(norm > 1e-12, v / np.maximum(norm, 1e-12), 0.0)
        blocks.append(v)
    data = np.concatenate(blocks, axis=2) / math.sqrt(len(chans))
    return PatchFeature(data, center, image_id)


# ---------------------------------------------------------------------------
# Tracks
# ---------------------------------------------------------------------------


def observation_scales(track: FeatureTrack, xyz: np.ndarray, model: SceneModel) -> dict[int, float]:
    """Scale ``depth / focal`` per observing view, skipping views behind the camera."""
    out = {}
    for o in track.observations:
        pose = model.poses[o.image_id]
        depth = float(pose.rotation[2] @ xyz + pose.translation[2])
        if depth > MIN_DEPTH:
            out[o.image_id] = depth / model.cameras[o.image_id].mean_focal
    return out


def reference_order(track: FeatureTrack, model: SceneModel, point_id: int) -> list[int]:
    """Views ranked by distance from the (lower) median scale; ties go to the smaller scale."""
    scales = observation_scales(track, model.points[point_id].xyz, model)
    if len(scales) < 2:
        return []
    ordered = [iid for iid, _ in sorted(scales.items(), key=lambda kv: (kv[1], kv[0]))]
    mid = (len(ordered) - 1) // 2
    ranks = sorted(range(len(ordered)), key=lambda k: (abs(k - mid), k))
    return [ordered[k] for k in ranks]


def select_reference_view(track: FeatureTrack, model: SceneModel, point_id: Optional[int] = None):
    """View at the (lower) median of the per-view scales; ``None`` when < 2 views qualify."""
    if point_id is None:
        matches = [pid for pid, t in model.tracks.items() if t is track]
        if not matches:
            raise KeyError("track is not triangulated in the model")
        point_id = matches[0]
    order = reference_order(track, model, point_id)
    return order[0] if order else None


def _segments(queries: list, max_views: int) -> list[list]:
    per = max_views - 1
    return [queries[i:i + per] for i in range(0, len(queries), per)]


@dataclass
class RefineResult:
    track: FeatureTrack
    refined: bool
    segments: int = 0
    candidates: list = field(default_factory=list)


def refine_track(track: FeatureTrack, ref_view: int, images: Mapping[int, np.ndarray],
                 config: Optional[RefinerConfig] = None, keep_candidates: bool = False) -> RefineResult:
    """Refine one track given its reference view.

    Queries beyond ``max_views - 1`` are split into segments that share the
    reference view. Each segment picks its own winning reference location and
    its queries are placed relative to it; the reference observation takes the
    first segment's choice. ``candidates`` holds one list per segment.
    """
    config = config or RefinerConfig()
    ref_obs = track.get(ref_view)
    if ref_obs is None:
        raise KeyError(f"reference view {ref_view} not in track")
    ref_feat = extract_patch_feature(images[ref_view], ref_obs.xy, config, size=config.w,
                                     image_id=ref_view)
    if ref_feat is None:
        return RefineResult(track.copy(), False)
    queries = []
    for o in track.observations:
        if o.image_id == ref_view:
            continue
        feat = extract_patch_feature(images[o.image_id], o.xy, config, image_id=o.image_id)
        if feat is not None:
            queries.append(feat)
    if not queries:
        return RefineResult(track.copy(), False)

    hp, hw = config.p // 2, config.w // 2
    ref_vectors = ref_feat.data.reshape(config.w * config.w, -1)
    # candidate c = (row, col) in the reference grid
    offsets = np.stack(np.meshgrid(np.arange(config.w) - hw, np.arange(config.w) - hw),
                       axis=-1).reshape(-1, 2).astype(float)
    n_cand = len(ref_vectors)
    ys, xs = np.divmod(np.arange(config.p * config.p), config.p)
    segments = _segments(queries, config.max_views)
    locs, vars_ = {}, {}
    ref_xy = None
    cands = []
    for seg in segments:
        totals = np.zeros(n_cand)
        seg_locs, seg_vars = {}, {}
        for q in seg:
            scores = q.data.reshape(config.p * config.p, -1) @ ref_vectors.T  # (p*p, C)
            z = (scores - scores.max(axis=0)) / config.tau
            wts = np.exp(z)
            wts /= wts.sum(axis=0)
            mx = xs @ wts
            my = ys @ wts
            var = ((xs[:, None] - mx) ** 2 * wts).sum(axis=0) + ((ys[:, None] - my) ** 2 * wts).sum(axis=0)
            var = np.maximum(var, 0.0)
            totals += var
            seg_locs[q.image_id] = q.center + np.column_stack([mx, my]) - hp
            seg_vars[q.image_id] = var
        best = int(np.argmin(totals))
        for iid in seg_locs:
            locs[iid] = seg_locs[iid][best]
            vars_[iid] = float(seg_vars[iid][best])
        # the reference keeps the location chosen by the first segment
        if ref_xy is None:
            ref_xy = ref_obs.xy + offsets[best]
        if keep_candidates:
            cands.append([CandidateTrack(ref_obs.xy + offsets[c],
                                         {i: seg_locs[i][c] for i in seg_locs},
                                         {i: float(seg_vars[i][c]) for i in seg_vars})
                          for c in range(n_cand)])
    out = FeatureTrack([], dict(track.variances), True)
    for o in track.observations:
        if o.image_id == ref_view:
            out.observations.append(o.moved(ref_xy))
            out.variances[o.image_id] = 0.0
        elif o.image_id in locs:
            out.observations.append(o.moved(locs[o.image_id]))
            out.variances[o.image_id] = vars_[o.image_id]
        else:
            out.observations.append(o.moved(o.xy))
    return RefineResult(out, True, len(segments), cands)


def refine_tracks(model: SceneModel, images: Mapping[int, np.ndarray],
                  config: Optional[RefinerConfig] = None,
                  point_ids: Optional[Sequence[int]] = None) -> dict[int, bool]:
    """Refine tracks of ``model`` in place; returns per-point success flags.

    Tracks are processed independently (optionally on a thread pool) and the
    results applied in point-id order.
    """
    config = config or RefinerConfig()
    pids = sorted(model.tracks if point_ids is None else point_ids)
    images = {k: np.asarray(v, dtype=np.float32) for k, v in images.items()}

    def work(pid):
        track = model.tracks[pid]
        # fall back to the next view by scale rank when the reference patch is excluded
        for ref in reference_order(track, model, pid):
            xy = track.get(ref).xy
            if extract_patch_feature(images[ref], xy, config, size=config.w) is not None:
                return pid, refine_track(track, ref, images, config)
        return pid, None

    if config.threads > 1:
        with ThreadPoolExecutor(config.threads) as pool:
            results = list(pool.map(work, pids))
    else:
        results = [work(pid) for pid in pids]
    flags = {}
    for pid, res in results:
        if res is None or not res.refined:
            model.tracks[pid].refined = False
            flags[pid] = False
            continue
        model.tracks[pid] = res.track
        flags[pid] = True
    n_ok = sum(flags.values())
    log.info("refined %d/%d tracks", n_ok, len(flags))
    return flags
