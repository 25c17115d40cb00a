"""Synthetic desk-scale scenes with exact geometry.

A low-relief textured heightfield is observed by cameras on an orbit arc.
Images are rendered by ray casting and projective texture sampling, and the
renderer also emits depth maps, a dense ground-truth cloud and exact
correspondence tables for a set of sampled surface points.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional, Sequence

import cv2
import numpy as np

from .geometry import (CameraIntrinsics, Observation2D, Pose, backproject, pixel_to_normalized,
                       project_points)
from .matching import RawMatchPair
from .model import FeatureTrack

GT_DEPTH_ERROR = 0.005
GT_CYCLE_ERROR_PX = 1.0


@dataclass
class Surface:
    """Heightfield ``z = relief * sum_k a_k sin(w_k . (x, y) + phi_k)`` with a texture."""

    amps: np.ndarray
    freqs: np.ndarray
    phases: np.ndarray
    relief: float
    texture: np.ndarray
    extent: float

    def height(self, x, y):
        arg = np.multiply.outer(x, self.freqs[:, 0]) + np.multiply.outer(y, self.freqs[:, 1]) + self.phases
        return self.relief * (np.sin(arg) @ self.amps)

    def height_grad(self, x, y):
        arg = np.multiply.outer(x, self.freqs[:, 0]) + np.multiply.outer(y, self.freqs[:, 1]) + self.phases
        c = np.cos(arg) * self.amps
        return self.relief * (c @ self.freqs[:, 0]), self.relief * (c @ self.freqs[:, 1])

    def points(self, x, y) -> np.ndarray:
        return np.stack([x, y, self.height(x, y)], axis=-1)

    def shade(self, x, y) -> np.ndarray:
        n = self.texture.shape[0]
        s = (n - 1) / (2 * self.extent)
        mx = ((np.asarray(x) + self.extent) * s).astype(np.float32)
        my = ((np.asarray(y) + self.extent) * s).astype(np.float32)
        return cv2.remap(self.texture, mx, my, cv2.INTER_LINEAR, borderMode=cv2.BORDER_REFLECT)


@dataclass
class SyntheticScene:
    cameras: dict[int, CameraIntrinsics]
    poses: dict[int, Pose]
    points: np.ndarray
    images: dict[int, np.ndarray]
    depths: dict[int, np.ndarray]
    # point index -> {image_id: exact projection}
    correspondences: list[dict[int, np.ndarray]]
    surface: Surface
    names: dict[int, str] = field(default_factory=dict)
    noise_px: float = 0.0
    seed: int = 0
    # half-width of the square the points were sampled from
    point_extent: float = 2.0

    @property
    def image_ids(self) -> list[int]:
        return sorted(self.poses)

    def visible_sets(self) -> dict[int, set[int]]:
        out: dict[int, set[int]] = {i: set() for i in self.poses}
        for k, obs in enumerate(self.correspondences):
            for i in obs:
                out[i].add(k)
        return out

    def dense_cloud(self, spacing: float = 0.0025, extent: Optional[float] = None) -> np.ndarray:
        extent = self.point_extent + 0.1 if extent is None else extent
        g = np.arange(-extent, extent + 0.5 * spacing, spacing)
        x, y = np.meshgrid(g, g)
        return self.surface.points(x.ravel(), y.ravel())


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def _make_texture(rng, size: int, sigmas=(4.0, 10.0)) -> np.ndarray:
    tex = np.zeros((size, size), np.float32)
    for k, s in enumerate(sigmas):
        noise = rng.standard_normal((size, size)).astype(np.float32)
        layer = cv2.GaussianBlur(noise, (0, 0), s)
        tex += layer / layer.std() / (k + 1)
    tex = (tex - tex.min()) / (tex.max() - tex.min())
    return tex


def _make_surface(rng, relief: float, extent: float, texture_size: int, texture_sigma: float) -> Surface:
    n = 4
    freqs = rng.uniform(-2.5, 2.5, (n, 2))
    amps = rng.uniform(0.5, 1.0, n) / n
    phases = rng.uniform(0, 2 * np.pi, n)
    tex = _make_texture(rng, texture_size, (texture_sigma, 2.5 * texture_sigma))
    return Surface(amps, freqs, phases, relief, tex, extent)


def cast_rays(surface: Surface, pose: Pose, cam: CameraIntrinsics, xy: np.ndarray,
              iterations: int = 12) -> np.ndarray:
    """Intersect pixel rays with the heightfield; returns world points ``(N, 3)``."""
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    n = pixel_to_normalized(xy, cam)
    d = np.column_stack([n, np.ones(len(n))]) @ pose.rotation
    c = pose.center
    t = -c[2] / d[:, 2]
    for _ in range(iterations):
        p = c + t[:, None] * d
        hx, hy = surface.height_grad(p[:, 0], p[:, 1])
        g = p[:, 2] - surface.height(p[:, 0], p[:, 1])
        dg = d[:, 2] - hx * d[:, 0] - hy * d[:, 1]
        t = t - g / dg
    return c + t[:, None] * d


def render_view(surface: Surface, pose: Pose, cam: CameraIntrinsics):
    """Rendered intensity image (float32 in [0, 1]) and depth map."""
    ys, xs = np.mgrid[0:cam.height, 0:cam.width]
    xy = np.column_stack([xs.ravel(), ys.ravel()]).astype(float)
    X = cast_rays(surface, pose, cam, xy)
    depth = (X @ pose.rotation[2] + pose.translation[2]).reshape(cam.height, cam.width)
    img = surface.shade(X[:, 0].reshape(cam.height, cam.width), X[:, 1].reshape(cam.height, cam.width))
    return img.astype(np.float32), depth


def sample_depth(depth: np.ndarray, xy: np.ndarray) -> np.ndarray:
    """Bilinear depth lookup (``nan`` outside the map)."""
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    h, w = depth.shape
    out = np.full(len(xy), np.nan)
    ok = (xy[:, 0] >= 0) & (xy[:, 1] >= 0) & (xy[:, 0] <= w - 1) & (xy[:, 1] <= h - 1)
    if ok.any():
        m = xy[ok].astype(np.float32)
        out[ok] = cv2.remap(depth.astype(np.float32), m[:, 0:1], m[:, 1:2], cv2.INTER_LINEAR,
                            borderMode=cv2.BORDER_REPLICATE).ravel()
    return out


def _orbit_poses(rng, n: int, radius: float, elevation_deg: float, arc_deg: float, jitter: float):
    """Cameras on a ring above the surface, all looking at the centre.

    The image "up" follows a fixed world axis, so ground texture keeps its
    in-plane orientation across views.
    """
    full = arc_deg >= 360.0
    az = np.deg2rad(np.linspace(0.0, arc_deg, n, endpoint=not full) - (0.0 if full else arc_deg / 2))
    poses = {}
    for i in range(n):
        el = np.deg2rad(elevation_deg + rng.uniform(-3, 3) * jitter)
        r = radius * (1 + rng.uniform(-0.05, 0.05) * jitter)
        a = az[i] + np.deg2rad(rng.uniform(-3, 3)) * jitter
        center = r * np.array([np.sin(a) * np.cos(el), -np.cos(a) * np.cos(el), np.sin(el)])
        target = rng.uniform(-0.1, 0.1, 3) * jitter
        target[2] = 0.0
        poses[i] = Pose.look_at(center, target, up=(0.0, 1.0, 0.0))
    return poses


def generate_synthetic_scene(seed: int = 0, n_cameras: int = 10, n_points: int = 500,
                             noise_px: float = 0.0, image_size: tuple[int, int] = (640, 480),
                             focal: Optional[float] = None, relief: float = 0.25,
                             texture_sigma: float = 5.0, texture_size: int = 2048,
                             radius: float = 3.0, elevation_deg: float = 65.0, arc_deg: float = 360.0,
                             jitter: float = 1.0, margin_px: int = 16,
                             point_extent: float = 2.0) -> SyntheticScene:
    """Deterministic synthetic scene; every sampled point is visible in >= 2 views."""
    if n_cameras < 2 or n_points < 1:
        raise ValueError("need at least 2 cameras and 1 point")
    if noise_px < 0 or relief < 0:
        raise ValueError("noise and relief must be nonnegative")
    rng = np.random.default_rng(seed)
    w, h = image_size
    f = focal or 0.85 * w
    cam = CameraIntrinsics(f, f, (w - 1) / 2, (h - 1) / 2, w, h)
    surface = _make_surface(rng, relief, 2.5, texture_size, texture_sigma)
    poses = _orbit_poses(rng, n_cameras, radius, elevation_deg, arc_deg, jitter)
    cameras = {i: cam for i in poses}
    images, depths = {}, {}
    for i, pose in poses.items():
        images[i], depths[i] = render_view(surface, pose, cam)

    points, corr = [], []
    for _ in range(200):
        need = n_points - len(points)
        if need <= 0:
            break
        xy = rng.uniform(-point_extent, point_extent, (4 * need, 2))
        X = surface.points(xy[:, 0], xy[:, 1])
        vis = _visibility(X, poses, cameras, depths, margin_px)
        for k in range(len(X)):
            obs = {i: v[1][k] for i, v in vis.items() if v[0][k]}
            if len(obs) >= 2:
                points.append(X[k])
                corr.append(obs)
                if len(points) == n_points:
                    break
    if len(points) < n_points:
        raise ValueError("could not place the requested number of points")
    return SyntheticScene(cameras, poses, np.array(points), images, depths, corr, surface,
                          {i: f"img_{i:03d}.png" for i in poses}, noise_px, seed, point_extent)


def _visibility(X, poses, cameras, depths, margin_px):
    out = {}
    for i, pose in poses.items():
        cam = cameras[i]
        uv, z = project_points(X, pose, cam)
        inb = ((uv[:, 0] >= margin_px) & (uv[:, 1] >= margin_px)
               & (uv[:, 0] <= cam.width - 1 - margin_px) & (uv[:, 1] <= cam.height - 1 - margin_px) & (z > 0))
        d = sample_depth(depths[i], uv)
        ok = inb & (np.abs(d - z) < GT_DEPTH_ERROR * np.abs(d))
        out[i] = (ok, uv)
    return out


def correspondence_cycle_errors(scene: SyntheticScene) -> np.ndarray:
    """Max cycle error per correspondence entry: unproject by depth map, reproject."""
    errs = []
    for k, obs in enumerate(scene.correspondences):
        for i, xy in obs.items():
            d = sample_depth(scene.depths[i], xy)[0]
            X = backproject(xy[None], np.array([d]), scene.poses[i], scene.cameras[i])[0]
            errs.append(float(np.linalg.norm(X - scene.points[k])) / max(d, 1e-12)
                        * scene.cameras[i].mean_focal)
    return np.array(errs)


# ---------------------------------------------------------------------------
# Ground-truth tracks, co-visibility, matches
# ---------------------------------------------------------------------------


def make_gt_tracks(scene: SyntheticScene, grid_step: int = 8, ref_view: Optional[int] = None,
                   views: Optional[Sequence[int]] = None, depths: Optional[dict] = None,
                   seed: int = 0, return_errors: bool = False):
    """Project grid points of a reference view into query views through depth.

    A query observation is kept when its projection depth error is below
    0.005 and its cycle projection error below 1 px.
    """
    rng = np.random.default_rng(seed)
    depths = scene.depths if depths is None else depths
    views = sorted(scene.poses if views is None else views)
    if ref_view is None:
        ref_view = int(rng.choice(views))
    cam_r, pose_r = scene.cameras[ref_view], scene.poses[ref_view]
    ys, xs = np.mgrid[0:cam_r.height:grid_step, 0:cam_r.width:grid_step]
    xr = np.column_stack([xs.ravel(), ys.ravel()]).astype(float)
    X = backproject(xr, depths[ref_view][ys.ravel(), xs.ravel()].astype(float), pose_r, cam_r)
    tracks: list[list[Observation2D]] = [[Observation2D(ref_view, x)] for x in xr]
    errors = {}
    for q in views:
        if q == ref_view:
            continue
        cam_q, pose_q = scene.cameras[q], scene.poses[q]
        xp, dp = project_points(X, pose_q, cam_q)
        Dq = sample_depth(depths[q], xp)
        valid = np.isfinite(Dq) & (dp > 0) & (Dq > 0)
        e_d = np.full(len(xr), np.inf)
        e_c = np.full(len(xr), np.inf)
        e_d[valid] = np.abs(Dq[valid] - dp[valid]) / Dq[valid]
        Xq = backproject(xp[valid], Dq[valid], pose_q, cam_q)
        xc, zc = project_points(Xq, pose_r, cam_r)
        e_c[valid] = np.where(zc > 0, np.linalg.norm(xc - xr[valid], axis=1), np.inf)
        keep = (e_d < GT_DEPTH_ERROR) & (e_c < GT_CYCLE_ERROR_PX)
        for k in np.flatnonzero(keep):
            tracks[k].append(Observation2D(q, xp[k]))
        errors[q] = (e_d, e_c)
    out = [FeatureTrack(t) for t in tracks if len(t) >= 2]
    if return_errors:
        return out, ref_view, errors
    return out


def covisibility_ratio(bag: Sequence[set]) -> float:
    """``|intersection| / min size`` over per-image observed point sets."""
    sets = [set(s) for s in bag]
    if not sets or any(len(s) == 0 for s in sets):
        raise ValueError("co-visibility needs non-empty point sets")
    return len(set.intersection(*sets)) / min(len(s) for s in sets)


def synthetic_matches(scene: SyntheticScene, noise_px: Optional[float] = None, seed: int = 0,
                      pairs: Optional[Sequence[tuple[int, int]]] = None,
                      min_matches: int = 1, per_pair_noise: bool = False) -> list[RawMatchPair]:
    """Pairwise matches from the correspondence tables with Gaussian keypoint noise.

    By default each (point, image) keypoint is perturbed once and shared by
    every pair using that image. With ``per_pair_noise`` each pair draws its
    own noise, as fully independent pairwise matching would.
    """
    noise = scene.noise_px if noise_px is None else noise_px
    rng = np.random.default_rng(seed)
    ids = scene.image_ids
    pairs = list(itertools.combinations(ids, 2)) if pairs is None else pairs
    n_pts = len(scene.correspondences)
    shared = {i: rng.normal(0, noise, (n_pts, 2)) if noise > 0 else np.zeros((n_pts, 2)) for i in ids}
    out = []
    for a, b in pairs:
        ks = [k for k, obs in enumerate(scene.correspondences) if a in obs and b in obs]
        if len(ks) < min_matches:
            continue
        xa = np.array([scene.correspondences[k][a] for k in ks])
        xb = np.array([scene.correspondences[k][b] for k in ks])
        if per_pair_noise and noise > 0:
            xa = xa + rng.normal(0, noise, xa.shape)
            xb = xb + rng.normal(0, noise, xb.shape)
        else:
            xa = xa + shared[a][ks]
            xb = xb + shared[b][ks]
        ca, cb = scene.cameras[a], scene.cameras[b]
        xa[:, 0] = np.clip(xa[:, 0], 0, ca.width - 1)
        xa[:, 1] = np.clip(xa[:, 1], 0, ca.height - 1)
        xb[:, 0] = np.clip(xb[:, 0], 0, cb.width - 1)
        xb[:, 1] = np.clip(xb[:, 1], 0, cb.height - 1)
        out.append(RawMatchPair(a, b, xa, xb, np.ones(len(ks))))
    return out


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------


def gt_model(scene: SyntheticScene):
    """Ground-truth :class:`SceneModel` built from the correspondence tables."""
    from .model import SceneModel

    model = SceneModel(cameras=dict(scene.cameras), image_names=dict(scene.names), intrinsics_known=True)
    for i in scene.image_ids:
        model.register(i, scene.poses[i])
    for k, obs in enumerate(scene.correspondences):
        track = FeatureTrack([Observation2D(i, xy) for i, xy in sorted(obs.items())])
        model.add_point(scene.points[k], track, track_id=k)
    return model


def scene_inputs(scene: SyntheticScene, noise_px: Optional[float] = None, seed: int = 0):
    """Pipeline inputs (matches, cameras, images) for an in-memory scene."""
    from .pipeline import PipelineInputs

    return PipelineInputs(synthetic_matches(scene, noise_px, seed), dict(scene.cameras),
                          dict(scene.names), dict(scene.images))


def write_synthetic_dataset(scene: SyntheticScene, out_dir, noise_px: Optional[float] = None,
                            seed: int = 0, cloud_spacing: float = 0.005) -> None:
    """Images, match file, intrinsics, ground-truth model and dense cloud."""
    from pathlib import Path

    from . import colmap_io
    from .matching import write_match_file

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for i in scene.image_ids:
        colmap_io.save_image(out / "images" / scene.names[i], scene.images[i])
    write_match_file(out / "matches.txt", synthetic_matches(scene, noise_px, seed), scene.names)
    colmap_io.write_intrinsics(out / "intrinsics.txt", scene.cameras, scene.names)
    colmap_io.write_model(gt_model(scene), out / "gt")
    colmap_io.write_ply(out / "gt_cloud.ply", scene.dense_cloud(spacing=cloud_spacing))
