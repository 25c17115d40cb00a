import numpy as np
import pytest

from dfsfm.errors import EmptyInputError
from dfsfm.geo_refine import (
    RefineConfig,
    adjust_topology,
    filter_outliers,
    refine_geometry,
    reproject_keypoints,
)
from dfsfm.geometry import Observation2D, project_points
from dfsfm.model import FeatureTrack

from conftest import planted_model


def first_point(model):
    return min(model.tracks)


def test_filter_removes_large_error():
    model = planted_model(n_pts=20, seed=0)
    pid = first_point(model)
    o = model.tracks[pid].observations[2]
    model.tracks[pid].observations[2] = o.moved(o.xy + [3.0, 4.0])
    n0 = model.observation_count()
    assert filter_outliers(model, 3.0) == 1
    assert model.observation_count() == n0 - 1
    assert model.tracks[pid].get(o.image_id) is None
    # the removed keypoint goes back to the pool for later completion
    assert len(model.unassigned[o.image_id]) == 1


def test_filter_deletes_short_tracks():
    model = planted_model(n_pts=20, seed=1)
    pid = first_point(model)
    t = model.tracks[pid]
    t.observations = t.observations[:2]
    t.observations[1] = t.observations[1].moved(t.observations[1].xy + 10)
    filter_outliers(model, 3.0)
    assert pid not in model.tracks and pid not in model.points


def test_filter_identity_when_within_epsilon():
    model = planted_model(n_pts=20, seed=2, noise_px=0.5)
    before = model.copy()
    assert filter_outliers(model, 3.0) == 0
    assert model.observation_count() == before.observation_count()
    assert set(model.points) == set(before.points)


def test_filter_postcondition():
    model = planted_model(n_pts=60, seed=3, noise_px=2.0)
    filter_outliers(model, 3.0)
    assert model.reprojection_errors().max() <= 3.0
    assert all(len(t) >= 2 for t in model.tracks.values())


def test_reproject_zero_residual():
    model = planted_model(n_pts=20, seed=4)
    before = model.copy()
    assert reproject_keypoints(model) == 0
    for pid in model.tracks:
        for a, b in zip(model.tracks[pid].observations, before.tracks[pid].observations):
            assert np.abs(a.xy - b.xy).max() < 1e-9


def test_reproject_moves_to_projection():
    model = planted_model(n_pts=20, seed=5, noise_px=1.0)
    reproject_keypoints(model)
    assert model.reprojection_errors().max() < 1e-9


def test_reproject_drops_behind_and_out_of_bounds():
    model = planted_model(n_pts=20, seed=6)
    pids = sorted(model.tracks)
    # behind camera 0: mirror the point through camera 0's centre
    c0 = model.poses[0].center
    model.points[pids[0]].xyz = 2 * c0 - model.points[pids[0]].xyz + 0.0
    # move a point so it projects to (-5, 40) in image 1
    pose, cam = model.poses[1], model.cameras[1]
    z = 3.0
    xn = np.array([(-5 - cam.cx) / cam.fx, (40 - cam.cy) / cam.fy, 1.0]) * z
    model.points[pids[1]].xyz = pose.rotation.T @ (xn - pose.translation)
    n_before = len(model.tracks[pids[1]])
    reproject_keypoints(model)
    assert pids[1] not in model.tracks or model.tracks[pids[1]].get(1) is None
    if pids[1] in model.tracks:
        assert len(model.tracks[pids[1]]) < n_before
    assert pids[0] not in model.tracks or model.tracks[pids[0]].get(0) is None


def test_merge_planted_duplicates():
    model = planted_model(n_pts=30, seed=7)
    pid = first_point(model)
    t = model.tracks[pid]
    a = FeatureTrack(t.observations[:3])
    b = FeatureTrack(t.observations[3:])
    xyz = model.points[pid].xyz.copy()
    model.remove_point(pid, to_pool=False)
    pa = model.add_point(xyz + 1e-4, a)
    pb = model.add_point(xyz - 1e-4, b)
    n_points = len(model.points)
    completed, merged = adjust_topology(model)
    assert merged == 1 and completed == 0
    assert len(model.points) == n_points - 1
    survivor = pa if pa in model.tracks else pb
    assert sorted(model.tracks[survivor].image_ids) == list(range(6))
    assert np.linalg.norm(model.points[survivor].xyz - xyz) < 1e-6


def test_merge_rejected_on_duplicate_image():
    model = planted_model(n_pts=30, seed=8)
    pid = first_point(model)
    t = model.tracks[pid]
    a = FeatureTrack(t.observations[:4])
    b = FeatureTrack(t.observations[3:])  # image 3 in both
    xyz = model.points[pid].xyz.copy()
    model.remove_point(pid, to_pool=False)
    model.add_point(xyz, a)
    model.add_point(xyz, b)
    _, merged = adjust_topology(model)
    assert merged == 0
    assert all(not tr.has_duplicate_images() for tr in model.tracks.values())


def test_complete_planted_orphan():
    model = planted_model(n_pts=30, seed=9)
    pid = first_point(model)
    t = model.tracks[pid]
    orphan = t.get(4)
    t.observations = [o for o in t.observations if o.image_id != 4]
    model.add_unassigned(4, orphan.xy + [0.8, 0.0])
    completed, _ = adjust_topology(model, RefineConfig(completion_threshold_px=3.0))
    assert completed == 1
    np.testing.assert_allclose(model.tracks[pid].get(4).xy, orphan.xy + [0.8, 0.0])
    assert len(model.unassigned[4]) == 0


def test_completion_ignores_far_orphans():
    model = planted_model(n_pts=30, seed=10)
    pid = first_point(model)
    t = model.tracks[pid]
    orphan = t.get(4)
    t.observations = [o for o in t.observations if o.image_id != 4]
    model.add_unassigned(4, orphan.xy + [3.5, 0.0])
    completed, _ = adjust_topology(model)
    assert completed == 0 and model.tracks[pid].get(4) is None


def test_refine_geometry_five_rounds():
    model = planted_model(n_pts=80, seed=11, noise_px=0.5)
    logs = refine_geometry(model)
    assert RefineConfig().ba_ta_rounds == 5
    assert [l.round for l in logs] == [1, 2, 3, 4, 5]


def test_refine_geometry_cost_non_increasing():
    model = planted_model(n_pts=120, seed=12, noise_px=1.0)
    rng = np.random.default_rng(12)
    for pid in list(model.tracks)[:10]:
        o = model.tracks[pid].observations[0]
        model.tracks[pid].observations[0] = o.moved(o.xy + rng.uniform(10, 20, 2))
    logs = refine_geometry(model, reproject=False)
    for l in logs:
        h = l.ba.cost_history
        assert all(b <= a for a, b in zip(h, h[1:]))
    finals = [l.ba.final_cost for l in logs]
    assert all(b <= a for a, b in zip(finals, finals[1:]))
    assert model.reprojection_errors().max() <= 3.0


def test_refine_geometry_empty():
    model = planted_model(n_pts=5, seed=13)
    for pid in list(model.points):
        model.remove_point(pid, to_pool=False)
    with pytest.raises(EmptyInputError):
        refine_geometry(model)


def test_refine_geometry_deterministic():
    a = planted_model(n_pts=60, seed=14, noise_px=0.7)
    b = a.copy()
    refine_geometry(a)
    refine_geometry(b)
    for pid in a.points:
        assert np.array_equal(a.points[pid].xyz, b.points[pid].xyz)
    for i in a.poses:
        assert np.array_equal(a.poses[i].rotation, b.poses[i].rotation)


def test_refine_geometry_monitor_sees_valid_tracks():
    model = planted_model(n_pts=60, seed=15, noise_px=0.7)
    seen = []

    def monitor(m, log):
        m.check_invariants()
        seen.append(log.round)

    refine_geometry(model, monitor=monitor)
    assert seen == [1, 2, 3, 4, 5]
