"""Camera models, pose algebra, projection, triangulation and robust solvers.

Conventions used throughout the package:

* Poses are world-to-camera: ``X_cam = R @ X_world + t``.
* Pixel coordinates put the centre of the top-left pixel at ``(0, 0)``.
* Distortion is a single radial term applied to normalized coordinates,
  ``x_d = x * (1 + k1 * r^2)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, NamedTuple, Optional, Sequence

import cv2
import numpy as np
from scipy.optimize import least_squares
from scipy.spatial.transform import Rotation

from .errors import (
    CheiralityError,
    DegenerateGeometryError,
    DegenerateMotionError,
    InsufficientDataError,
    NoConsensusError,
)

MIN_DEPTH = 1e-6
DEFAULT_MIN_TRI_ANGLE_DEG = 1.5
DEFAULT_MIN_PNP_INLIERS = 15
DEFAULT_RANSAC_CONFIDENCE = 0.9999


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    k1: Optional[float] = None

    def __post_init__(self):
        self.fx, self.fy = float(self.fx), float(self.fy)
        self.cx, self.cy = float(self.cx), float(self.cy)
        self.width, self.height = int(self.width), int(self.height)
        if self.k1 is not None:
            self.k1 = float(self.k1)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @classmethod
    def from_image_size(cls, width: int, height: int) -> "CameraIntrinsics":
        """Uncalibrated default: focal length equal to the longest image edge."""
        f = float(max(width, height))
        return cls(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height)

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def distortion(self) -> float:
        return 0.0 if self.k1 is None else self.k1

    @property
    def mean_focal(self) -> float:
        return 0.5 * (self.fx + self.fy)

    def params(self) -> np.ndarray:
        """``[fx, fy, cx, cy, k1]`` with ``k1 = 0`` when undistorted."""
        return np.array([self.fx, self.fy, self.cx, self.cy, self.distortion])

    def with_params(self, params: Sequence[float]) -> "CameraIntrinsics":
        fx, fy, cx, cy, k1 = (float(v) for v in params)
        return CameraIntrinsics(fx, fy, cx, cy, self.width, self.height,
                                None if self.k1 is None else k1)

    def contains(self, xy, margin: float = 0.0) -> np.ndarray:
        xy = np.asarray(xy, dtype=float)
        return ((xy[..., 0] >= margin) & (xy[..., 1] >= margin)
                & (xy[..., 0] <= self.width - 1 - margin)
                & (xy[..., 1] <= self.height - 1 - margin))


@dataclass
class Pose:
    """Rigid world-to-camera transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.array(self.rotation, dtype=float).reshape(3, 3)
        self.translation = np.array(self.translation, dtype=float).reshape(3)
        R = self.rotation
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(self.translation))):
            raise ValueError("pose contains non-finite values")
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation is not orthonormal with determinant +1")

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_rotvec(cls, rotvec, translation) -> "Pose":
        return cls(Rotation.from_rotvec(np.asarray(rotvec, float)).as_matrix(), translation)

    @classmethod
    def look_at(cls, center, target, up=(0.0, 0.0, 1.0)) -> "Pose":
        """Camera at ``center`` looking at ``target`` (y axis of the image points down)."""
        center, target, up = (np.asarray(v, float) for v in (center, target, up))
        z = target - center
        z /= np.linalg.norm(z)
        x = np.cross(z, up)
        if np.linalg.norm(x) < 1e-9:
            x = np.cross(z, [1.0, 0.0, 0.0])
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        return cls(R, -R @ center)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def __matmul__(self, other: "Pose") -> "Pose":
        """``(a @ b)(X) == a(b(X))``."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def transform(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return X @ self.rotation.T + self.translation

    def copy(self) -> "Pose":
        return Pose(self.rotation.copy(), self.translation.copy())


@dataclass
class Point3D:
    xyz: np.ndarray
    track_id: int = -1
    color: Optional[tuple] = None

    def __post_init__(self):
        self.xyz = np.array(self.xyz, dtype=float).reshape(3)
        if not np.all(np.isfinite(self.xyz)):
            raise ValueError("point coordinates must be finite")


@dataclass
class Observation2D:
    image_id: int
    xy: np.ndarray
    confidence: float = 1.0

    def __post_init__(self):
        self.xy = np.array(self.xy, dtype=float).reshape(2)
        self.confidence = float(self.confidence)

    def moved(self, xy) -> "Observation2D":
        return Observation2D(self.image_id, xy, self.confidence)


def _as_xyz(point) -> np.ndarray:
    return point.xyz if isinstance(point, Point3D) else np.asarray(point, dtype=float).reshape(3)


# ---------------------------------------------------------------------------
# Rotations
# ---------------------------------------------------------------------------


def so3_exp(rotvecs) -> np.ndarray:
    """Rotation matrices for one or many rotation vectors."""
    return Rotation.from_rotvec(np.asarray(rotvecs, dtype=float)).as_matrix()


def rotation_angle(R) -> float:
    """Angle of a rotation matrix in radians, accurate near zero."""
    return float(Rotation.from_matrix(R).magnitude())


def vector_angle(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(math.atan2(np.linalg.norm(np.cross(a, b)), float(np.dot(a, b))))


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def batch_skew(v: np.ndarray) -> np.ndarray:
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1], out[..., 0, 2] = -v[..., 2], v[..., 1]
    out[..., 1, 0], out[..., 1, 2] = v[..., 2], -v[..., 0]
    out[..., 2, 0], out[..., 2, 1] = -v[..., 1], v[..., 0]
    return out


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------


def distort(xn: np.ndarray, k1: float) -> np.ndarray:
    if k1 == 0.0:
        return xn
    r2 = np.sum(xn * xn, axis=-1, keepdims=True)
    return xn * (1.0 + k1 * r2)


def undistort(xd: np.ndarray, k1: float, iters: int = 30) -> np.ndarray:
    """Invert :func:`distort` by Newton iterations on the radius."""
    xd = np.asarray(xd, dtype=float)
    if k1 == 0.0:
        return xd.copy()
    rd = np.linalg.norm(xd, axis=-1)
    ru = rd.copy()
    for _ in range(iters):
        f = ru + k1 * ru ** 3 - rd
        ru = ru - f / (1.0 + 3.0 * k1 * ru ** 2)
    scale = np.where(rd > 0, ru / np.where(rd > 0, rd, 1.0), 1.0)
    return xd * scale[..., None]


def pixel_to_normalized(xy, intr: CameraIntrinsics) -> np.ndarray:
    xy = np.asarray(xy, dtype=float)
    xd = np.stack([(xy[..., 0] - intr.cx) / intr.fx, (xy[..., 1] - intr.cy) / intr.fy], axis=-1)
    return undistort(xd, intr.distortion)


def normalized_to_pixel(xn, intr: CameraIntrinsics) -> np.ndarray:
    xd = distort(np.asarray(xn, dtype=float), intr.distortion)
    return np.stack([intr.fx * xd[..., 0] + intr.cx, intr.fy * xd[..., 1] + intr.cy], axis=-1)


def project_camera(Xc: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """Project camera-frame points; the caller is responsible for cheirality."""
    z = Xc[..., 2:3]
    return normalized_to_pixel(Xc[..., :2] / z, intr)


def project_points(X, pose: Pose, intr: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection. Returns ``(pixels, depths)``; no cheirality check."""
    Xc = pose.transform(X)
    z = Xc[..., 2]
    safe = np.where(np.abs(z) > MIN_DEPTH, z, MIN_DEPTH)
    uv = normalized_to_pixel(Xc[..., :2] / safe[..., None], intr)
    return uv, z


def project(point, pose: Pose, intr: CameraIntrinsics) -> np.ndarray:
    """Project a world point to pixels; raises :class:`CheiralityError` behind the camera."""
    X = _as_xyz(point)
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite point")
    Xc = pose.transform(X)
    if Xc[2] <= MIN_DEPTH:
        raise CheiralityError(f"point has camera depth {Xc[2]:.3g}")
    return project_camera(Xc, intr)


def backproject(xy, depth: float, pose: Pose, intr: CameraIntrinsics) -> np.ndarray:
    """World point seen at pixel ``xy`` with camera-frame depth ``depth``."""
    xn = pixel_to_normalized(xy, intr)
    d = np.asarray(depth, dtype=float)
    Xc = np.concatenate([xn * d[..., None], d[..., None]], axis=-1)
    return (Xc - pose.translation) @ pose.rotation


def projection_jacobians(Xc: np.ndarray, params: np.ndarray):
    """Derivatives of the pixel projection.

    ``Xc`` is ``(N, 3)`` in the camera frame and ``params`` is ``(N, 5)`` holding
    ``[fx, fy, cx, cy, k1]``. Returns ``(uv, d_uv/d_Xc (N,2,3), d_uv/d_params (N,2,5))``.
    """
    fx, fy, cx, cy, k1 = (params[:, i] for i in range(5))
    X, Y, Z = Xc[:, 0], Xc[:, 1], Xc[:, 2]
    x, y = X / Z, Y / Z
    r2 = x * x + y * y
    d = 1.0 + k1 * r2
    uv = np.stack([fx * d * x + cx, fy * d * y + cy], axis=1)

    # d(uv)/d(x, y)
    du_dx = fx * (d + 2 * k1 * x * x)
    du_dy = fx * 2 * k1 * x * y
    dv_dx = fy * 2 * k1 * x * y
    dv_dy = fy * (d + 2 * k1 * y * y)
    iz = 1.0 / Z
    J_xy = np.zeros((len(Z), 2, 3))
    J_xy[:, 0] = np.stack([iz, np.zeros_like(iz), -x * iz], axis=1)
    J_xy[:, 1] = np.stack([np.zeros_like(iz), iz, -y * iz], axis=1)
    J_uv_xy = np.empty((len(Z), 2, 2))
    J_uv_xy[:, 0, 0], J_uv_xy[:, 0, 1] = du_dx, du_dy
    J_uv_xy[:, 1, 0], J_uv_xy[:, 1, 1] = dv_dx, dv_dy
    J_X = J_uv_xy @ J_xy

    J_K = np.zeros((len(Z), 2, 5))
    J_K[:, 0, 0] = d * x
    J_K[:, 1, 1] = d * y
    J_K[:, 0, 2] = 1.0
    J_K[:, 1, 3] = 1.0
    J_K[:, 0, 4] = fx * x * r2
    J_K[:, 1, 4] = fy * y * r2
    return uv, J_X, J_K


# ---------------------------------------------------------------------------
# Triangulation
# ---------------------------------------------------------------------------


class Triangulation(NamedTuple):
    xyz: np.ndarray
    max_error: float
    angle_deg: float


def max_triangulation_angle(X: np.ndarray, centers: np.ndarray) -> float:
    """Largest angle in degrees between any two viewing rays of ``X``."""
    rays = X[None, :] - centers
    rays /= np.linalg.norm(rays, axis=1, keepdims=True)
    cosines = np.clip(rays @ rays.T, -1.0, 1.0)
    return float(np.degrees(np.arccos(cosines.min())))


def _dlt(xn: np.ndarray, Rs: np.ndarray, ts: np.ndarray) -> np.ndarray:
    P = np.concatenate([Rs, ts[:, :, None]], axis=2)
    A = np.concatenate([xn[:, 0:1] * P[:, 2] - P[:, 0], xn[:, 1:2] * P[:, 2] - P[:, 1]])
    _, _, Vt = np.linalg.svd(A)
    h = Vt[-1]
    if abs(h[3]) < 1e-14:
        raise DegenerateGeometryError("triangulated point at infinity")
    return h[:3] / h[3]


def _polish_point(X, obs_xy, Rs, ts, intrs, iters=10):
    """Gauss-Newton on the reprojection error for a single point."""
    params = np.stack([c.params() for c in intrs])
    for _ in range(iters):
        Xc = np.einsum("nij,j->ni", Rs, X) + ts
        if np.any(Xc[:, 2] <= MIN_DEPTH):
            break
        uv, J_X, _ = projection_jacobians(Xc, params)
        r = (uv - obs_xy).reshape(-1)
        J = (J_X @ Rs).reshape(-1, 3)
        try:
            dx = np.linalg.solve(J.T @ J, -J.T @ r)
        except np.linalg.LinAlgError:
            break
        X = X + dx
        if np.linalg.norm(dx) < 1e-14 * (1.0 + np.linalg.norm(X)):
            break
    return X


def triangulate_multiview(obs, min_angle_deg: float = DEFAULT_MIN_TRI_ANGLE_DEG,
                          polish: bool = True) -> Triangulation:
    """Triangulate one point from ``(xy_or_observation, pose, intrinsics)`` triples.

    A DLT on undistorted normalized coordinates gives the initial point, which
    is then polished by a few Gauss-Newton steps on the pixel reprojection error.
    """
    obs = list(obs)
    if len(obs) < 2:
        raise InsufficientDataError("triangulation needs at least two observations")
    xy = np.array([o.xy if isinstance(o, Observation2D) else np.asarray(o, float)
                   for o, _, _ in obs])
    poses = [p for _, p, _ in obs]
    intrs = [c for _, _, c in obs]
    Rs = np.stack([p.rotation for p in poses])
    ts = np.stack([p.translation for p in poses])
    xn = np.stack([pixel_to_normalized(xy[i], intrs[i]) for i in range(len(obs))])
    X = _dlt(xn, Rs, ts)
    if polish:
        X_pol = _polish_point(X, xy, Rs, ts, intrs)
        if np.all(np.isfinite(X_pol)):
            X = X_pol

    depths = np.einsum("nj,j->n", Rs[:, 2], X) + ts[:, 2]
    if np.any(depths <= MIN_DEPTH):
        raise CheiralityError("triangulated point lies behind an observing camera")
    centers = -np.einsum("nji,nj->ni", Rs, ts)
    angle = max_triangulation_angle(X, centers)
    if angle < min_angle_deg:
        raise DegenerateGeometryError(
            f"triangulation angle {angle:.3f} deg below minimum {min_angle_deg}")
    errors = [np.linalg.norm(project_camera(Rs[i] @ X + ts[i], intrs[i]) - xy[i])
              for i in range(len(obs))]
    return Triangulation(X, float(max(errors)), angle)


def triangulate_two_view(xn_a: np.ndarray, xn_b: np.ndarray, pose_a: Pose, pose_b: Pose) -> np.ndarray:
    """Vectorized linear triangulation of N normalized correspondences."""
    Pa = np.hstack([pose_a.rotation, pose_a.translation[:, None]])
    Pb = np.hstack([pose_b.rotation, pose_b.translation[:, None]])
    A = np.stack([
        xn_a[:, 0:1] * Pa[2] - Pa[0],
        xn_a[:, 1:2] * Pa[2] - Pa[1],
        xn_b[:, 0:1] * Pb[2] - Pb[0],
        xn_b[:, 1:2] * Pb[2] - Pb[1],
    ], axis=1)
    _, _, Vt = np.linalg.svd(A)
    h = Vt[:, -1]
    w = np.where(np.abs(h[:, 3]) < 1e-14, 1e-14, h[:, 3])
    return h[:, :3] / w[:, None]


def ray_angles_deg(X: np.ndarray, center_a: np.ndarray, center_b: np.ndarray) -> np.ndarray:
    a = X - center_a
    b = X - center_b
    cross = np.linalg.norm(np.cross(a, b), axis=1)
    return np.degrees(np.arctan2(cross, np.sum(a * b, axis=1)))


# ---------------------------------------------------------------------------
# RANSAC
# ---------------------------------------------------------------------------


def ransac_iterations(inlier_ratio: float, sample_size: int, confidence: float) -> float:
    if inlier_ratio >= 1.0:
        return 1
    p_good = inlier_ratio ** sample_size
    denom = math.log1p(-p_good)
    if denom == 0.0:
        return math.inf
    return math.log1p(-confidence) / denom


def ransac(n: int, sample_size: int,
           fit: Callable[[np.ndarray], Iterable],
           errors: Callable[[object], np.ndarray],
           threshold: float, rng: np.random.Generator,
           confidence: float = DEFAULT_RANSAC_CONFIDENCE,
           max_iters: int = 2000, min_iters: int = 0):
    """Generic hypothesize-and-verify loop.

    ``fit`` maps a sample index array to zero or more models; ``errors`` maps a
    model to per-datum errors. The hypothesis with most inliers wins, ties go to
    the lower truncated squared error. Returns ``(model, inlier_mask)``.
    """
    best_model, best_mask = None, np.zeros(n, dtype=bool)
    best_count, best_score = -1, math.inf
    needed = max_iters
    it = 0
    while it < min(max(needed, min_iters), max_iters):
        it += 1
        sample = rng.choice(n, size=sample_size, replace=False)
        for model in fit(sample):
            err = errors(model)
            mask = err < threshold
            count = int(mask.sum())
            score = float(np.sum(np.minimum(err, threshold) ** 2))
            if count > best_count or (count == best_count and score < best_score):
                best_model, best_mask, best_count, best_score = model, mask, count, score
                needed = ransac_iterations(count / n, sample_size, confidence)
    return best_model, best_mask


# ---------------------------------------------------------------------------
# PnP
# ---------------------------------------------------------------------------


def _sqpnp(X: np.ndarray, xn: np.ndarray) -> Optional[Pose]:
    ok, rvec, tvec = cv2.solvePnP(X.reshape(-1, 1, 3).astype(np.float64),
                                  xn.reshape(-1, 1, 2).astype(np.float64),
                                  np.eye(3), None, flags=cv2.SOLVEPNP_SQPNP)
    if not ok or not np.all(np.isfinite(rvec)) or not np.all(np.isfinite(tvec)):
        return None
    return Pose(so3_exp(rvec.reshape(3)), tvec.reshape(3))


def reprojection_errors(X: np.ndarray, xy: np.ndarray, pose: Pose, intr: CameraIntrinsics) -> np.ndarray:
    """Pixel errors, ``inf`` for points behind the camera."""
    uv, z = project_points(X, pose, intr)
    err = np.linalg.norm(uv - xy, axis=-1)
    return np.where(z > MIN_DEPTH, err, np.inf)


def refine_pose(pose: Pose, X: np.ndarray, xy: np.ndarray, intr: CameraIntrinsics,
                iters: int = 30) -> Pose:
    """Levenberg-Marquardt on the reprojection error of a single pose."""
    params = np.tile(intr.params(), (len(X), 1))
    R, t = pose.rotation.copy(), pose.translation.copy()

    def cost_of(R, t):
        Xc = X @ R.T + t
        if np.any(Xc[:, 2] <= MIN_DEPTH):
            return math.inf
        return float(np.sum((project_camera(Xc, intr) - xy) ** 2))

    cost = cost_of(R, t)
    lam = 1e-4
    for _ in range(iters):
        RX = X @ R.T
        Xc = RX + t
        uv, J_X, _ = projection_jacobians(Xc, params)
        r = (uv - xy).reshape(-1)
        J = np.concatenate([J_X @ -batch_skew(RX), J_X], axis=2).reshape(-1, 6)
        H, g = J.T @ J, J.T @ r
        improved = False
        while lam < 1e10:
            try:
                d = np.linalg.solve(H + lam * np.diag(np.diag(H) + 1e-12), -g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            R_new, t_new = so3_exp(d[:3]) @ R, t + d[3:]
            new_cost = cost_of(R_new, t_new)
            if new_cost <= cost:
                rel = (cost - new_cost) / max(cost, 1e-300)
                R, t, cost = R_new, t_new, new_cost
                lam = max(lam / 10, 1e-12)
                improved = True
                break
            lam *= 10
        if not improved or rel < 1e-12:
            break
    # re-orthonormalize to keep the Pose invariant exact
    U, _, Vt = np.linalg.svd(R)
    return Pose(U @ Vt, t)


def solve_pnp_ransac(points2d, points3d, intr: CameraIntrinsics, threshold_px: float,
                     min_inliers: int = DEFAULT_MIN_PNP_INLIERS, seed: int = 0,
                     confidence: float = DEFAULT_RANSAC_CONFIDENCE,
                     max_iters: int = 2000) -> tuple[Pose, np.ndarray]:
    """Robust absolute pose from 2D-3D correspondences.

    Minimal hypotheses come from SQPnP on 4-point samples; the winning pose is
    re-estimated on its inliers and polished with Levenberg-Marquardt.
    """
    xy = np.asarray(points2d, dtype=float).reshape(-1, 2)
    X = np.array([_as_xyz(p) for p in points3d]) if len(points3d) else np.zeros((0, 3))
    n = len(xy)
    if n < 4 or len(X) != n:
        raise InsufficientDataError(f"PnP needs at least 4 correspondences, got {n}")
    xn = pixel_to_normalized(xy, intr)
    rng = np.random.default_rng(seed)

    def fit(sample):
        pose = _sqpnp(X[sample], xn[sample])
        return [] if pose is None else [pose]

    pose, mask = ransac(n, 4, fit, lambda p: reprojection_errors(X, xy, p, intr),
                        threshold_px, rng, confidence, max_iters)
    if pose is None or mask.sum() < max(min_inliers, 4):
        raise NoConsensusError(f"PnP found {int(mask.sum())} inliers, need {min_inliers}")

    for _ in range(3):
        nonminimal = _sqpnp(X[mask], xn[mask])
        candidates = [pose] + ([nonminimal] if nonminimal is not None else [])
        pose = min(candidates, key=lambda p: np.sum(np.minimum(
            reprojection_errors(X[mask], xy[mask], p, intr), 1e6) ** 2))
        pose = refine_pose(pose, X[mask], xy[mask], intr)
        new_mask = reprojection_errors(X, xy, pose, intr) < threshold_px
        if np.array_equal(new_mask, mask):
            break
        if new_mask.sum() < 4:
            break
        mask = new_mask
    if mask.sum() < max(min_inliers, 4):
        raise NoConsensusError(f"PnP found {int(mask.sum())} inliers, need {min_inliers}")
    return pose, mask


# ---------------------------------------------------------------------------
# Two-view geometry
# ---------------------------------------------------------------------------


def _normalize_points(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = x.mean(axis=0)
    scale = math.sqrt(2.0) / max(np.mean(np.linalg.norm(x - mean, axis=1)), 1e-12)
    T = np.array([[scale, 0, -scale * mean[0]], [0, scale, -scale * mean[1]], [0, 0, 1]])
    return (x - mean) * scale, T


def eight_point(xa: np.ndarray, xb: np.ndarray, essential: bool = False) -> Optional[np.ndarray]:
    """Normalized 8-point estimate of ``M`` with ``xb^T M xa = 0``."""
    na, Ta = _normalize_points(xa)
    nb, Tb = _normalize_points(xb)
    A = np.column_stack([
        nb[:, 0] * na[:, 0], nb[:, 0] * na[:, 1], nb[:, 0],
        nb[:, 1] * na[:, 0], nb[:, 1] * na[:, 1], nb[:, 1],
        na[:, 0], na[:, 1], np.ones(len(na)),
    ])
    _, _, Vt = np.linalg.svd(A)
    M = Tb.T @ Vt[-1].reshape(3, 3) @ Ta
    U, S, Vt = np.linalg.svd(M)
    S = np.array([1.0, 1.0, 0.0]) if essential else np.array([S[0], S[1], 0.0])
    M = U @ np.diag(S) @ Vt
    norm = np.linalg.norm(M)
    if not np.isfinite(norm) or norm < 1e-15:
        return None
    return M / norm


def sampson_distance(F: np.ndarray, xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
    """First-order geometric distance (pixels when ``F`` maps pixels)."""
    ha = np.column_stack([xa, np.ones(len(xa))])
    hb = np.column_stack([xb, np.ones(len(xb))])
    Fa = ha @ F.T
    Fb = hb @ F
    num = np.sum(hb * Fa, axis=1)
    den = Fa[:, 0] ** 2 + Fa[:, 1] ** 2 + Fb[:, 0] ** 2 + Fb[:, 1] ** 2
    return np.abs(num) / np.sqrt(np.maximum(den, 1e-300))


def estimate_fundamental_ransac(xa, xb, threshold_px: float, seed: int = 0,
                                confidence: float = DEFAULT_RANSAC_CONFIDENCE,
                                max_iters: int = 2000):
    """Fundamental matrix by RANSAC over 8-point samples; returns ``(F, mask)``."""
    xa, xb = np.asarray(xa, float), np.asarray(xb, float)
    n = len(xa)
    if n < 8:
        raise InsufficientDataError(f"fundamental matrix needs 8 matches, got {n}")
    rng = np.random.default_rng(seed)

    def fit(sample):
        F = eight_point(xa[sample], xb[sample])
        return [] if F is None else [F]

    F, mask = ransac(n, 8, fit, lambda F: sampson_distance(F, xa, xb), threshold_px,
                     rng, confidence, max_iters)
    if F is not None and mask.sum() >= 8:
        F_all = eight_point(xa[mask], xb[mask])
        if F_all is not None:
            new_mask = sampson_distance(F_all, xa, xb) < threshold_px
            if new_mask.sum() >= mask.sum():
                F, mask = F_all, new_mask
    return F, mask


def decompose_essential(E: np.ndarray) -> list[Pose]:
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    t = U[:, 2]
    out = []
    for R in (U @ W @ Vt, U @ W.T @ Vt):
        for s in (1.0, -1.0):
            out.append(Pose(R, s * t))
    return out


def _cheirality_count(pose: Pose, xn_a, xn_b) -> tuple[int, np.ndarray]:
    X = triangulate_two_view(xn_a, xn_b, Pose.identity(), pose)
    za = X[:, 2]
    zb = X @ pose.rotation[2] + pose.translation[2]
    good = (za > MIN_DEPTH) & (zb > MIN_DEPTH)
    return int(good.sum()), X


def _essential_from_pose(pose: Pose) -> np.ndarray:
    return skew(pose.translation) @ pose.rotation


def _signed_sampson(F: np.ndarray, xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
    ha = np.column_stack([xa, np.ones(len(xa))])
    hb = np.column_stack([xb, np.ones(len(xb))])
    Fa = ha @ F.T
    Fb = hb @ F
    num = np.sum(hb * Fa, axis=1)
    den = Fa[:, 0] ** 2 + Fa[:, 1] ** 2 + Fb[:, 0] ** 2 + Fb[:, 1] ** 2
    return num / np.sqrt(np.maximum(den, 1e-300))


def refine_relative_pose(pose: Pose, ua: np.ndarray, ub: np.ndarray, Ka: np.ndarray, Kb: np.ndarray,
                         loss_scale: float = 1.0) -> Pose:
    """Robust least squares on Sampson residuals over rotation and translation direction."""
    if len(ua) < 6:
        return pose
    Ka_inv, Kb_inv = np.linalg.inv(Ka), np.linalg.inv(Kb)
    t0 = pose.translation / np.linalg.norm(pose.translation)
    # tangent basis of the unit sphere at t0
    basis = np.linalg.svd(t0[None])[2][1:]

    def unpack(v):
        R = so3_exp(v[:3]) @ pose.rotation
        t = t0 + basis.T @ v[3:]
        return R, t / np.linalg.norm(t)

    def residuals(v):
        R, t = unpack(v)
        F = Kb_inv.T @ skew(t) @ R @ Ka_inv
        return _signed_sampson(F, ua, ub)

    res = least_squares(residuals, np.zeros(5), loss="cauchy", f_scale=loss_scale, method="trf",
                        x_scale="jac", max_nfev=100)
    R, t = unpack(res.x)
    U, _, Vt = np.linalg.svd(R)
    return Pose(U @ Vt, t)


def solve_relative_pose_ransac(xa, xb, intr_a: CameraIntrinsics, intr_b: CameraIntrinsics,
                               threshold_px: float,
                               min_angle_deg: float = DEFAULT_MIN_TRI_ANGLE_DEG,
                               seed: int = 0, confidence: float = DEFAULT_RANSAC_CONFIDENCE,
                               max_iters: int = 2000) -> tuple[Pose, np.ndarray]:
    """Relative pose of camera B w.r.t. camera A from an essential matrix.

    The returned pose maps A's camera frame to B's and has a unit translation.
    """
    xa, xb = np.asarray(xa, float).reshape(-1, 2), np.asarray(xb, float).reshape(-1, 2)
    n = len(xa)
    if n < 8:
        raise InsufficientDataError(f"relative pose needs 8 matches, got {n}")
    na, nb = pixel_to_normalized(xa, intr_a), pixel_to_normalized(xb, intr_b)
    # undistorted pixel coordinates keep the RANSAC threshold in pixels
    ua, ub = na @ intr_a.K[:2, :2].T + intr_a.K[:2, 2], nb @ intr_b.K[:2, :2].T + intr_b.K[:2, 2]
    Ka_inv, Kb_inv = np.linalg.inv(intr_a.K), np.linalg.inv(intr_b.K)

    def to_F(E):
        return Kb_inv.T @ E @ Ka_inv

    rng = np.random.default_rng(seed)

    def fit(sample):
        # five-point minimal solver; well posed for planar scenes too
        E, _ = cv2.findEssentialMat(na[sample], nb[sample], np.eye(3), method=cv2.LMEDS)
        if E is None:
            return []
        return [E[k:k + 3] for k in range(0, E.shape[0] - 2, 3)]

    # loose thresholds let many hypotheses reach full consensus; keep sampling
    # so the truncated-error tie-break can pick the tightest one
    E, mask = ransac(n, 5, fit, lambda E: sampson_distance(to_F(E), ua, ub), threshold_px,
                     rng, confidence, max_iters, min_iters=min(200, max_iters))
    if E is None or mask.sum() < 8:
        raise NoConsensusError("no essential matrix consensus")

    best = None
    for cand in decompose_essential(E):
        count, X = _cheirality_count(cand, na[mask], nb[mask])
        if best is None or count > best[0]:
            best = (count, cand, X)
    count, pose, X = best
    if count == 0:
        raise DegenerateMotionError("no cheirality-consistent decomposition")
    pose = refine_relative_pose(pose, ua[mask], ub[mask], intr_a.K, intr_b.K)
    count, X = _cheirality_count(pose, na[mask], nb[mask])
    angles = ray_angles_deg(X, np.zeros(3), pose.center)
    if not np.isfinite(np.median(angles)) or np.median(angles) < min_angle_deg:
        raise DegenerateMotionError(
            f"median triangulation angle {np.median(angles):.3f} deg below {min_angle_deg}")
    return Pose(pose.rotation, pose.translation / np.linalg.norm(pose.translation)), mask
