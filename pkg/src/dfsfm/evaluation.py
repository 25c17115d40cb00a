"""Pose and point-cloud metrics."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import InsufficientDataError
from .geometry import Pose, rotation_angle, vector_angle

DEFAULT_AUC_THRESHOLDS = (1.0, 3.0, 5.0)
DEFAULT_DISTANCE_THRESHOLDS = (0.005, 0.01, 0.02)
MAX_POSE_ERROR_DEG = 180.0


@dataclass
class EvalReport:
    auc: dict[float, float] = field(default_factory=dict)
    registration_rate: float = 0.0
    accuracy: dict[float, float] = field(default_factory=dict)
    completeness: dict[float, float] = field(default_factory=dict)
    mean_reprojection_error: float = float("nan")
    runtimes: dict[str, float] = field(default_factory=dict)

    def as_metrics(self) -> dict[str, float]:
        out = {}
        for t, v in self.auc.items():
            out[f"auc@{t:g}deg"] = v
        out["registration_rate"] = self.registration_rate
        for t, v in self.accuracy.items():
            out[f"accuracy@{t:g}"] = v
        for t, v in self.completeness.items():
            out[f"completeness@{t:g}"] = v
        out["mean_reprojection_error_px"] = self.mean_reprojection_error
        for k, v in self.runtimes.items():
            out[f"runtime_{k}_s"] = v
        return out


def relative_pose_errors(estimated: Mapping, gt: Mapping) -> np.ndarray:
    """Pairwise errors in degrees (max of rotation and translation-direction error).

    Pairs involving an image missing from ``estimated`` count as 180 degrees.
    """
    ids = sorted(gt)
    common = [i for i in ids if i in estimated]
    if len(common) < 2:
        raise InsufficientDataError("pose evaluation needs at least two common images")
    errs = []
    for a, b in itertools.combinations(ids, 2):
        if a not in estimated or b not in estimated:
            errs.append(MAX_POSE_ERROR_DEG)
            continue
        rel_gt = gt[b] @ gt[a].inverse()
        rel_est = estimated[b] @ estimated[a].inverse()
        e_r = np.rad2deg(rotation_angle(rel_est.rotation.T @ rel_gt.rotation))
        if np.linalg.norm(rel_gt.translation) < 1e-12 or np.linalg.norm(rel_est.translation) < 1e-12:
            e_t = MAX_POSE_ERROR_DEG
        else:
            e_t = np.rad2deg(vector_angle(rel_est.translation, rel_gt.translation))
        errs.append(max(e_r, e_t))
    return np.array(errs, dtype=float)


def pose_auc(errors: Sequence[float], thresholds: Sequence[float]) -> dict[float, float]:
    """Exact area under the empirical error CDF up to each threshold, normalized."""
    e = np.sort(np.asarray(errors, dtype=float))
    n = len(e)
    out = {}
    for t in thresholds:
        # CDF is a step function: after the k-th sorted error it equals (k+1)/n
        below = e[e < t]
        area = float(np.sum(t - below)) / n
        out[float(t)] = area / t
    return out


def eval_pose_auc(estimated: Mapping, gt: Mapping,
                  thresholds_deg: Sequence[float] = DEFAULT_AUC_THRESHOLDS) -> dict[float, float]:
    return pose_auc(relative_pose_errors(estimated, gt), thresholds_deg)


def umeyama(src: np.ndarray, dst: np.ndarray, with_scale: bool = True):
    """Similarity ``(s, R, t)`` minimizing ``||dst - (s R src + t)||``."""
    src = np.asarray(src, float)
    dst = np.asarray(dst, float)
    if len(src) < 3:
        raise InsufficientDataError("alignment needs at least three points")
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    cov = xd.T @ xs / len(src)
    U, S, Vt = np.linalg.svd(cov)
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1
    R = U @ D @ Vt
    var_s = (xs ** 2).sum() / len(src)
    s = float(np.trace(np.diag(S) @ D) / var_s) if with_scale else 1.0
    t = mu_d - s * R @ mu_s
    return s, R, t


def align_to_gt(estimated: Mapping[int, Pose], gt: Mapping[int, Pose]):
    """Similarity mapping the estimated frame onto the ground-truth frame via camera centers."""
    common = sorted(set(estimated) & set(gt))
    src = np.array([estimated[i].center for i in common])
    dst = np.array([gt[i].center for i in common])
    return umeyama(src, dst)


def eval_triangulation(points: np.ndarray, gt_cloud: np.ndarray,
                       thresholds: Sequence[float] = DEFAULT_DISTANCE_THRESHOLDS):
    """Accuracy and completeness fractions per distance threshold."""
    points = np.asarray(points, float).reshape(-1, 3)
    gt_cloud = np.asarray(gt_cloud, float).reshape(-1, 3)
    if len(points) == 0 or len(gt_cloud) == 0:
        zero = {float(t): 0.0 for t in thresholds}
        return zero, dict(zero)
    d_acc, _ = cKDTree(gt_cloud).query(points)
    d_comp, _ = cKDTree(points).query(gt_cloud)
    acc = {float(t): float(np.mean(d_acc <= t)) for t in thresholds}
    comp = {float(t): float(np.mean(d_comp <= t)) for t in thresholds}
    return acc, comp


def aligned_points(model, gt_poses: Mapping[int, Pose]) -> np.ndarray:
    s, R, t = align_to_gt(model.poses, gt_poses)
    X = np.array([p.xyz for p in model.points.values()]).reshape(-1, 3)
    return s * X @ R.T + t


def evaluate_model(model, gt_poses: Mapping[int, Pose], gt_cloud: Optional[np.ndarray] = None,
                   auc_thresholds=DEFAULT_AUC_THRESHOLDS,
                   distance_thresholds=DEFAULT_DISTANCE_THRESHOLDS) -> EvalReport:
    report = EvalReport()
    report.auc = eval_pose_auc(model.poses, gt_poses, auc_thresholds)
    report.registration_rate = len(set(model.poses) & set(gt_poses)) / max(len(gt_poses), 1)
    if gt_cloud is not None and len(set(model.poses) & set(gt_poses)) >= 3:
        report.accuracy, report.completeness = eval_triangulation(
            aligned_points(model, gt_poses), gt_cloud, distance_thresholds)
    report.mean_reprojection_error = model.mean_reprojection_error()
    return report
