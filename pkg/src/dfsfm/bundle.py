"""Robust geometric bundle adjustment.

Levenberg-Marquardt on the Cauchy-robustified reprojection error. Point
blocks are eliminated with the Schur complement; the reduced camera system is
factored densely for small problems and with a sparse LU otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import DegenerateGeometryError, InsufficientDataError
from .geometry import MIN_DEPTH, Pose, batch_skew, projection_jacobians, so3_exp
from .model import SceneModel

POSE_DOF = 6
INTR_DOF = 5  # fx, fy, cx, cy, k1


@dataclass
class BAConfig:
    loss_scale_px: float = 1.0
    max_iterations: int = 50
    function_tolerance: float = 1e-8
    initial_damping: float = 1e-4
    refine_intrinsics: bool = False
    refine_principal_point: bool = False
    dense_image_limit: int = 500
    # called with every BAReport; used by monitors that audit all BA calls
    observer: Optional[Callable[["BAReport"], None]] = field(default=None, repr=False, compare=False)


@dataclass
class BAReport:
    initial_cost: float
    final_cost: float
    iterations: int
    converged: bool
    cost_history: list[float] = field(default_factory=list)
    gauge: Optional[tuple] = None
    fixed_unchanged: bool = True
    num_residuals: int = 0
    solver: str = "dense"


def cauchy(sq: np.ndarray, scale: float) -> np.ndarray:
    c2 = scale * scale
    return c2 * np.log1p(sq / c2)


def cauchy_weight(sq: np.ndarray, scale: float) -> np.ndarray:
    return 1.0 / (1.0 + sq / (scale * scale))


def select_gauge(model: SceneModel, images: Iterable[int]) -> tuple[int, int, int]:
    """Farthest-apart pair of cameras: ``(fixed image, partially fixed image, axis)``.

    The axis is the translation component of the second camera most aligned
    with the baseline, which is the one that carries the scale.
    """
    images = sorted(images)
    if len(images) < 2:
        raise InsufficientDataError("gauge fixing needs two registered images")
    if model.gauge is not None and model.gauge[0] in images and model.gauge[1] in images:
        a, b = model.gauge
    else:
        C = np.array([model.poses[i].center for i in images])
        d = np.linalg.norm(C[:, None] - C[None], axis=2)
        ia, ib = np.unravel_index(np.argmax(d), d.shape)
        a, b = images[min(ia, ib)], images[max(ia, ib)]
    return a, b, _scale_axis(model.poses[a], model.poses[b])


def _scale_axis(fixed: Pose, other: Pose) -> int:
    t_rel = other.rotation @ (fixed.center - other.center)
    return int(np.argmax(np.abs(t_rel)))


class _Problem:
    """Flattened parameter and residual layout for one BA call."""

    def __init__(self, model, var_images, const_images, point_ids, config, fixed_params):
        self.model = model
        self.config = config
        self.images = list(var_images) + [i for i in const_images if i not in var_images]
        self.img_index = {im: k for k, im in enumerate(self.images)}
        self.point_ids = list(point_ids)
        self.pt_index = {p: k for k, p in enumerate(self.point_ids)}

        pids, iids, xy = [], [], []
        for pid in self.point_ids:
            for o in model.tracks[pid].observations:
                if o.image_id in self.img_index:
                    pids.append(self.pt_index[pid])
                    iids.append(self.img_index[o.image_id])
                    xy.append(o.xy)
        self.obs_pt = np.array(pids, dtype=int)
        self.obs_img = np.array(iids, dtype=int)
        self.obs_xy = np.array(xy, dtype=float).reshape(-1, 2)

        n_img = len(self.images)
        self.R = np.stack([model.poses[i].rotation for i in self.images])
        self.t = np.stack([model.poses[i].translation for i in self.images])
        self.K = np.stack([model.cameras[i].params() for i in self.images])
        self.X = np.array([model.points[p].xyz for p in self.point_ids]).reshape(-1, 3)

        # column of each camera-side parameter, -1 when held constant
        cols = -np.ones((n_img, POSE_DOF + INTR_DOF), dtype=int)
        next_col = 0
        observed = np.bincount(self.obs_img, minlength=n_img) > 0
        for k, im in enumerate(self.images):
            if im not in var_images or not observed[k]:
                continue
            free = np.ones(POSE_DOF + INTR_DOF, dtype=bool)
            free[POSE_DOF:] = False
            if config.refine_intrinsics:
                free[POSE_DOF + 0] = free[POSE_DOF + 1] = True
                if config.refine_principal_point:
                    free[POSE_DOF + 2] = free[POSE_DOF + 3] = True
                if model.cameras[im].k1 is not None:
                    free[POSE_DOF + 4] = True
            for j in fixed_params.get(im, ()):
                free[j] = False
            n_free = int(free.sum())
            cols[k, free] = np.arange(next_col, next_col + n_free)
            next_col += n_free
        self.cam_cols = cols
        self.n_cam = next_col
        self.n_pts = len(self.point_ids)

    # -- evaluation --------------------------------------------------------

    def residuals(self, R, t, K, X):
        Xw = X[self.obs_pt]
        Xc = np.einsum("nij,nj->ni", R[self.obs_img], Xw) + t[self.obs_img]
        z = Xc[:, 2]
        if np.any(z <= MIN_DEPTH):
            return None
        params = K[self.obs_img]
        x, y = Xc[:, 0] / z, Xc[:, 1] / z
        d = 1.0 + params[:, 4] * (x * x + y * y)
        uv = np.stack([params[:, 0] * d * x + params[:, 2], params[:, 1] * d * y + params[:, 3]], axis=1)
        return uv - self.obs_xy

    def cost(self, R, t, K, X) -> float:
        r = self.residuals(R, t, K, X)
        if r is None:
            return math.inf
        return float(np.sum(cauchy(np.sum(r * r, axis=1), self.config.loss_scale_px)))

    def jacobians(self, R, t, K, X):
        """Per-observation residual, camera Jacobian (N,2,11) and point Jacobian (N,2,3)."""
        Ri = R[self.obs_img]
        RX = np.einsum("nij,nj->ni", Ri, X[self.obs_pt])
        Xc = RX + t[self.obs_img]
        uv, J_X, J_K = projection_jacobians(Xc, K[self.obs_img])
        J_cam = np.concatenate([J_X @ -batch_skew(RX), J_X, J_K], axis=2)
        J_pt = J_X @ Ri
        return uv - self.obs_xy, J_cam, J_pt

    # -- linear system -----------------------------------------------------

    def normal_equations(self, R, t, K, X):
        r, J_cam, J_pt = self.jacobians(R, t, K, X)
        w = cauchy_weight(np.sum(r * r, axis=1), self.config.loss_scale_px)
        n_obs = len(r)

        cols = self.cam_cols[self.obs_img]                       # (N, 11)
        valid = cols >= 0
        rows = np.repeat(np.arange(2 * n_obs).reshape(n_obs, 2, 1), cols.shape[1], axis=2)
        colsb = np.broadcast_to(cols[:, None, :], J_cam.shape)
        mask = np.broadcast_to(valid[:, None, :], J_cam.shape)
        sw = np.sqrt(w)
        Jc = sp.csr_matrix(((J_cam * sw[:, None, None])[mask], (rows[mask], colsb[mask])),
                           shape=(2 * n_obs, self.n_cam))
        pt_rows = np.repeat(np.arange(2 * n_obs).reshape(n_obs, 2, 1), 3, axis=2)
        pt_cols = (3 * self.obs_pt)[:, None, None] + np.arange(3)[None, None, :]
        pt_cols = np.broadcast_to(pt_cols, J_pt.shape)
        Jp_w = J_pt * sw[:, None, None]
        Jp = sp.csr_matrix((Jp_w.ravel(), (pt_rows.ravel(), pt_cols.ravel())),
                           shape=(2 * n_obs, 3 * self.n_pts))
        rw = (r * sw[:, None]).ravel()

        U = (Jc.T @ Jc).tocsr()
        W = (Jc.T @ Jp).tocsr()
        V = np.zeros((self.n_pts, 3, 3))
        np.add.at(V, self.obs_pt, np.einsum("nki,nkj->nij", Jp_w, Jp_w))
        g_c = Jc.T @ rw
        g_p = np.zeros((self.n_pts, 3))
        np.add.at(g_p, self.obs_pt, np.einsum("nki,nk->ni", Jp_w, r * sw[:, None]))
        return U, W, V, g_c, g_p

    def solve(self, system, lam: float):
        U, W, V, g_c, g_p = system
        Vd = V.copy()
        idx = np.arange(3)
        Vd[:, idx, idx] *= (1.0 + lam)
        Vd[:, idx, idx] += 1e-12
        Vinv = np.linalg.inv(Vd)
        if not np.all(np.isfinite(Vinv)):
            raise np.linalg.LinAlgError("singular point block")
        bp = -g_p
        if self.n_cam == 0:
            return np.zeros(0), np.einsum("nij,nj->ni", Vinv, bp)
        Vinv_sp = sp.bsr_matrix((Vinv, np.arange(self.n_pts), np.arange(self.n_pts + 1)),
                                shape=(3 * self.n_pts, 3 * self.n_pts))
        WV = (W @ Vinv_sp).tocsr()
        Ud = U + sp.diags(U.diagonal() * lam + 1e-12)
        S = (Ud - WV @ W.T).tocsr()
        rhs = -g_c - WV @ bp.ravel()
        if len(self.images) < self.config.dense_image_limit:
            self.solver = "dense"
            S = S.toarray()
            c, low = scipy.linalg.cho_factor(S)
            dc = scipy.linalg.cho_solve((c, low), rhs)
        else:
            self.solver = "sparse"
            lu = spla.splu(S.tocsc())
            dc = lu.solve(rhs)
        if not np.all(np.isfinite(dc)):
            raise np.linalg.LinAlgError("non-finite camera update")
        dp = np.einsum("nij,nj->ni", Vinv, bp - (W.T @ dc).reshape(-1, 3))
        return dc, dp

    def apply(self, dc, dp, R, t, K, X):
        R, t, K = R.copy(), t.copy(), K.copy()
        for k in range(len(self.images)):
            cols = self.cam_cols[k]
            if not np.any(cols >= 0):
                continue
            delta = np.zeros(POSE_DOF + INTR_DOF)
            free = cols >= 0
            delta[free] = dc[cols[free]]
            if np.any(free[:3]):
                R[k] = so3_exp(delta[:3]) @ R[k]
            for j in range(3):
                if free[3 + j]:
                    t[k, j] = t[k, j] + delta[3 + j]
            for j in range(INTR_DOF):
                if free[POSE_DOF + j]:
                    K[k, j] = K[k, j] + delta[POSE_DOF + j]
        return R, t, K, X + dp


def bundle_adjust(model: SceneModel, config: Optional[BAConfig] = None, *,
                  variable_images: Optional[Iterable[int]] = None,
                  constant_images: Iterable[int] = (),
                  point_ids: Optional[Iterable[int]] = None) -> BAReport:
    """Refine poses, points and optionally intrinsics of ``model`` in place.

    With no constant images the gauge is fixed by holding the pose of one of
    the two farthest-apart cameras and one translation component of the other.
    """
    config = config or BAConfig()
    var_images = set(model.poses if variable_images is None else variable_images)
    const_images = [i for i in constant_images if i in model.poses and i not in var_images]
    if len(var_images) + len(const_images) < 2:
        raise InsufficientDataError("bundle adjustment needs two registered images")
    if point_ids is None:
        point_ids = sorted(model.tracks)
    else:
        point_ids = sorted(set(point_ids))
    if not point_ids:
        raise InsufficientDataError("bundle adjustment needs at least one track")
    # points observed by images outside the problem keep those residuals out
    needed = {o.image_id for pid in point_ids for o in model.tracks[pid].observations}
    const_images = sorted(set(const_images) | (needed - var_images) & set(model.poses))

    fixed: dict[int, tuple] = {}
    gauge = None
    if len(const_images) == 0:
        a, b, axis = select_gauge(model, var_images)
        fixed[a] = tuple(range(POSE_DOF))
        fixed[b] = (3 + axis,)
        gauge = (a, b, axis)
    elif len(const_images) == 1:
        anchor = model.poses[const_images[0]]
        others = sorted(var_images)
        far = max(others, key=lambda i: (np.linalg.norm(model.poses[i].center - anchor.center), -i))
        axis = _scale_axis(anchor, model.poses[far])
        fixed[far] = (3 + axis,)
        gauge = (const_images[0], far, axis)

    prob = _Problem(model, sorted(var_images), const_images, point_ids, config, fixed)
    R, t, K, X = prob.R, prob.t, prob.K, prob.X
    before = {im: (model.poses[im].rotation.copy(), model.poses[im].translation.copy())
              for im in list(fixed) + const_images}

    cost = prob.cost(R, t, K, X)
    if not math.isfinite(cost):
        raise DegenerateGeometryError("initial configuration violates cheirality")
    report = BAReport(cost, cost, 0, False, [cost], gauge, True, 2 * len(prob.obs_xy))
    prob.solver = "dense"
    lam = config.initial_damping
    any_success = False
    # residuals below ~1e-8 px RMS are roundoff, not signal
    floor = 1e-16 * max(report.num_residuals, 1)
    if cost <= floor:
        report.converged = True
    it = 0
    while not report.converged and it < config.max_iterations:
        it += 1
        system = prob.normal_equations(R, t, K, X)
        accepted = False
        while lam <= 1e16:
            try:
                dc, dp = prob.solve(system, lam)
            except (np.linalg.LinAlgError, RuntimeError, scipy.linalg.LinAlgError):
                lam *= 10.0
                continue
            any_success = True
            R_new, t_new, K_new, X_new = prob.apply(dc, dp, R, t, K, X)
            new_cost = prob.cost(R_new, t_new, K_new, X_new)
            if new_cost <= cost:
                rel = (cost - new_cost) / max(cost, 1e-300)
                R, t, K, X, cost = R_new, t_new, K_new, X_new, new_cost
                report.cost_history.append(cost)
                lam = max(lam / 10.0, 1e-15)
                accepted = True
                if rel < config.function_tolerance or cost <= floor:
                    report.converged = True
                break
            lam *= 10.0
        if not any_success:
            raise DegenerateGeometryError("rank-deficient normal equations")
        if not accepted:
            report.converged = True  # no descent direction left at any damping
            break

    report.iterations = it
    report.final_cost = cost
    report.solver = prob.solver

    for k, im in enumerate(prob.images):
        if not np.any(prob.cam_cols[k] >= 0):
            continue
        if np.any(prob.cam_cols[k, :3] >= 0):
            U_, _, Vt = np.linalg.svd(R[k])
            Rk = U_ @ Vt
        else:
            Rk = R[k]
        model.poses[im] = Pose(Rk, t[k])
        if np.any(prob.cam_cols[k, POSE_DOF:] >= 0):
            model.cameras[im] = model.cameras[im].with_params(K[k])
    for k, pid in enumerate(prob.point_ids):
        model.points[pid].xyz = X[k].copy()

    for im, (R0, t0) in before.items():
        cols = fixed.get(im, tuple(range(POSE_DOF)))
        if len(cols) == POSE_DOF:
            same = np.array_equal(R0, model.poses[im].rotation) and np.array_equal(t0, model.poses[im].translation)
        else:
            same = all(t0[j - 3] == model.poses[im].translation[j - 3] for j in cols)
        report.fixed_unchanged &= bool(same)
    if config.observer is not None:
        config.observer(report)
    return report
