import numpy as np
import pytest

from dfsfm.errors import InsufficientDataError
from dfsfm.evaluation import (
    EvalReport,
    align_to_gt,
    eval_pose_auc,
    eval_triangulation,
    evaluate_model,
    pose_auc,
    relative_pose_errors,
    umeyama,
)
from dfsfm.geometry import Pose, rotation_angle

from conftest import planted_model, ring_poses
from oracles import hand_auc, random_similarity, similarity


def test_auc_identity():
    poses = ring_poses(5)
    assert eval_pose_auc(poses, poses, [1, 3, 5]) == {1.0: 1.0, 3.0: 1.0, 5.0: 1.0}


def test_auc_similarity_invariant(rng):
    gt = ring_poses(6)
    est = {i: Pose(Pose.from_rotvec(rng.normal(0, 0.01, 3), [0, 0, 0]).rotation @ p.rotation,
                   p.translation + rng.normal(0, 0.02, 3)) for i, p in gt.items()}
    base = eval_pose_auc(est, gt, [1, 3, 5, 10])
    for _ in range(20):
        moved = similarity(est, *random_similarity(rng))
        got = eval_pose_auc(moved, gt, [1, 3, 5, 10])
        for k in base:
            assert abs(got[k] - base[k]) < 1e-12
        gt_moved = similarity(gt, *random_similarity(rng))
        got = eval_pose_auc(est, gt_moved, [1, 3, 5, 10])
        for k in base:
            assert abs(got[k] - base[k]) < 1e-12


def test_auc_relabel_invariant(rng):
    gt = ring_poses(5)
    est = {i: Pose(p.rotation, p.translation + rng.normal(0, 0.05, 3)) for i, p in gt.items()}
    perm = dict(zip(range(5), [3, 0, 4, 1, 2]))
    a = eval_pose_auc(est, gt, [5, 10])
    b = eval_pose_auc({perm[i]: p for i, p in est.items()}, {perm[i]: p for i, p in gt.items()}, [5, 10])
    for k in a:
        assert b[k] == pytest.approx(a[k], abs=1e-12)


def test_auc_three_images_hand_enumeration():
    gt = ring_poses(3)
    est = dict(gt)
    # rotate camera 2 by 90 degrees about its optical axis, keeping its centre
    p = gt[2]
    Rz = Pose.from_rotvec([0, 0, np.pi / 2], [0, 0, 0]).rotation
    R2 = Rz @ p.rotation
    est[2] = Pose(R2, -R2 @ p.center)
    errors = []
    for a, b in ((0, 1), (0, 2), (1, 2)):
        rg = gt[b].rotation @ gt[a].rotation.T
        re = est[b].rotation @ est[a].rotation.T
        e_r = np.rad2deg(rotation_angle(re.T @ rg))
        tg = gt[b].translation - rg @ gt[a].translation
        te = est[b].translation - re @ est[a].translation
        e_t = np.rad2deg(np.arctan2(np.linalg.norm(np.cross(tg, te)), tg @ te))
        errors.append(max(e_r, e_t))
    assert errors[0] == pytest.approx(0.0, abs=1e-9)
    assert errors[1] == pytest.approx(90.0, abs=1e-6) and errors[2] >= 90.0 - 1e-6
    for thr in (1.0, 30.0, 120.0):
        assert eval_pose_auc(est, gt, [thr])[thr] == pytest.approx(hand_auc(errors, thr), abs=1e-12)
    # only the first pair is below 30 degrees: AUC = 1/3
    assert eval_pose_auc(est, gt, [30.0])[30.0] == pytest.approx(1 / 3, abs=1e-9)


def test_auc_missing_images_count_as_max_error():
    gt = ring_poses(4)
    est = {i: gt[i] for i in (0, 1, 2)}
    errs = relative_pose_errors(est, gt)
    assert sorted(errs)[-3:] == [180.0, 180.0, 180.0]
    assert eval_pose_auc(est, gt, [5])[5.0] == pytest.approx(0.5)


def test_auc_needs_two_common():
    gt = ring_poses(3)
    with pytest.raises(InsufficientDataError):
        eval_pose_auc({0: gt[0]}, gt)


def test_pose_auc_against_hand(rng):
    for _ in range(50):
        e = rng.exponential(3.0, int(rng.integers(1, 30)))
        for t in (1, 3, 5):
            assert pose_auc(e, [t])[float(t)] == pytest.approx(hand_auc(e, t), abs=1e-12)


def test_triangulation_identical():
    cloud = np.random.default_rng(0).uniform(-1, 1, (300, 3))
    acc, comp = eval_triangulation(cloud, cloud, [0.001, 0.01])
    assert acc == {0.001: 1.0, 0.01: 1.0} and comp == {0.001: 1.0, 0.01: 1.0}


def test_triangulation_half():
    cloud = np.random.default_rng(1).uniform(-1, 1, (300, 3))
    acc, comp = eval_triangulation(cloud[:150], cloud, [0.001])
    assert acc[0.001] == 1.0
    assert comp[0.001] == pytest.approx(0.5, abs=0.02)


def test_triangulation_empty():
    acc, comp = eval_triangulation(np.zeros((0, 3)), np.ones((5, 3)), [0.01, 0.1])
    assert acc == {0.01: 0.0, 0.1: 0.0} and comp == {0.01: 0.0, 0.1: 0.0}


def test_triangulation_monotone(rng):
    gt = rng.uniform(-1, 1, (500, 3))
    est = gt[:300] + rng.normal(0, 0.02, (300, 3))
    th = [0.005, 0.01, 0.02, 0.05, 0.1]
    acc, comp = eval_triangulation(est, gt, th)
    assert all(acc[a] <= acc[b] for a, b in zip(th, th[1:]))
    assert all(comp[a] <= comp[b] for a, b in zip(th, th[1:]))


def test_umeyama_recovers_similarity(rng):
    src = rng.normal(size=(20, 3))
    s, R, t = random_similarity(rng)
    dst = s * src @ R.T + t
    s2, R2, t2 = umeyama(src, dst)
    assert s2 == pytest.approx(s)
    np.testing.assert_allclose(R2, R, atol=1e-10)
    np.testing.assert_allclose(t2, t, atol=1e-9)


def test_align_and_evaluate_model(rng):
    model = planted_model(seed=0)
    gt_poses = dict(model.poses)
    cloud = np.array([p.xyz for p in model.points.values()])
    s, R, t = random_similarity(rng)
    moved = model.copy()
    moved.poses = similarity(model.poses, 1 / s, R.T, -R.T @ t / s)
    for p in moved.points.values():
        p.xyz = R.T @ (p.xyz - t) / s
    s2, R2, t2 = align_to_gt(moved.poses, gt_poses)
    assert s2 == pytest.approx(s)
    report = evaluate_model(moved, gt_poses, cloud, distance_thresholds=(1e-6,))
    assert report.registration_rate == 1.0
    assert report.auc[1.0] == pytest.approx(1.0)
    assert report.accuracy[1e-6] == 1.0 and report.completeness[1e-6] == 1.0
    m = report.as_metrics()
    assert {"auc@1deg", "auc@3deg", "auc@5deg", "registration_rate", "accuracy@1e-06",
            "completeness@1e-06", "mean_reprojection_error_px"} <= set(m)


def test_report_bounds():
    r = EvalReport(auc={1.0: 0.5}, registration_rate=0.8, accuracy={0.01: 0.3}, completeness={0.01: 0.2})
    assert all(0 <= v <= 1 for k, v in r.as_metrics().items() if not k.startswith("mean"))
