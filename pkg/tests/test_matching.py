import time

import cv2
import numpy as np
import pytest

from dfsfm.geometry import CameraIntrinsics, Pose, project_points
from dfsfm.matching import (
    QuantizedMatchPair,
    RawMatchPair,
    build_tracks,
    coarse_grid_match,
    default_verify_threshold,
    dropped_nodes,
    quantize_matches,
    read_match_file,
    verify_pair_geometric,
    write_match_file,
)
from dfsfm.errors import InputMissingError
from dfsfm.synthetic import _make_texture

from oracles import brute_force_tracks, random_match_graph, track_sets


def test_quantize_example():
    q = quantize_matches(RawMatchPair(0, 1, [[13.7, 4.2]], [[20.1, 30.6]]), 8)
    np.testing.assert_array_equal(q.xy_a, [[16, 8]])
    np.testing.assert_array_equal(q.xy_b, [[24, 32]])
    assert isinstance(q, QuantizedMatchPair) and q.grid_size == 8


def test_quantize_identity_r1(rng):
    xy = rng.integers(0, 500, (100, 2)).astype(float)
    q = quantize_matches(RawMatchPair(0, 1, xy, xy[::-1]), 1)
    np.testing.assert_array_equal(q.xy_a, xy)
    np.testing.assert_array_equal(q.xy_b, xy[::-1])


def test_quantize_dedup_keeps_max_confidence():
    pair = RawMatchPair(0, 1, [[13.7, 4.2], [14.2, 4.9]], [[20.1, 30.6], [20.9, 29.2]], [0.9, 0.7])
    q = quantize_matches(pair, 8)
    assert len(q) == 1
    np.testing.assert_array_equal(q.xy_a, [[16, 8]])
    np.testing.assert_array_equal(q.xy_b, [[24, 32]])
    assert q.confidence[0] == 0.9
    # order of input does not matter
    q2 = quantize_matches(RawMatchPair(0, 1, pair.xy_a[::-1], pair.xy_b[::-1], pair.confidence[::-1]), 8)
    assert len(q2) == 1 and q2.confidence[0] == 0.9


def test_quantize_distinct_cells_both_survive():
    # 19.8 / 8 = 2.475 rounds to 2, so the second match lands in another cell pair
    pair = RawMatchPair(0, 1, [[13.7, 4.2], [14.2, 4.9]], [[20.1, 30.6], [19.8, 30.2]], [0.9, 0.7])
    q = quantize_matches(pair, 8)
    assert len(q) == 2
    np.testing.assert_array_equal(q.xy_b, [[24, 32], [16, 32]])


def test_quantize_clamps_to_bounds():
    pair = RawMatchPair(0, 1, [[99.0, 0.2]], [[0.0, 79.5]])
    q = quantize_matches(pair, 8, size_a=(100, 80), size_b=(100, 80))
    # 99 rounds to 96 (in bounds), 79.5 rounds to 80 which is outside a 80-px image
    np.testing.assert_array_equal(q.xy_a, [[96, 0]])
    np.testing.assert_array_equal(q.xy_b, [[0, 72]])


def test_quantize_empty():
    q = quantize_matches(RawMatchPair(0, 1, np.zeros((0, 2)), np.zeros((0, 2))), 8)
    assert len(q) == 0


def test_quantize_rejects_bad_r():
    with pytest.raises(ValueError):
        quantize_matches(RawMatchPair(0, 1, [[1, 1]], [[1, 1]]), 0.5)


def test_default_verify_threshold():
    assert default_verify_threshold(640, 480) == 4.0
    assert default_verify_threshold(1501, 900) == 8.0
    assert default_verify_threshold(1500, 1500) == 4.0


def _planted_pair(rng, n_in=120, outlier_ratio=0.3, r=8):
    cam = CameraIntrinsics(500, 500, 320, 240, 640, 480)
    pa = Pose.look_at([3, 0, 1.5], [0, 0, 0])
    pb = Pose.look_at([2.5, 1.6, 1.5], [0, 0, 0])
    X = rng.uniform(-0.8, 0.8, (n_in, 3))
    xa, _ = project_points(X, pa, cam)
    xb, _ = project_points(X, pb, cam)
    n_out = int(round(n_in * outlier_ratio / (1 - outlier_ratio)))
    oa = rng.uniform([0, 0], [640, 480], (n_out, 2))
    ob = rng.uniform([0, 0], [640, 480], (n_out, 2))
    pair = RawMatchPair(0, 1, np.vstack([xa, oa]), np.vstack([xb, ob]))
    q = quantize_matches(pair, r)
    return q, cam


def test_verify_keeps_planted_inliers(rng):
    # exact (unquantized) correspondences so the planted set is unambiguous
    cam = CameraIntrinsics(500, 500, 320, 240, 640, 480)
    pa = Pose.look_at([3, 0, 1.5], [0, 0, 0])
    pb = Pose.look_at([2.5, 1.6, 1.5], [0, 0, 0])
    X = rng.uniform(-0.8, 0.8, (140, 3))
    xa, _ = project_points(X, pa, cam)
    xb, _ = project_points(X, pb, cam)
    n_out = 60
    oa = rng.uniform([0, 0], [640, 480], (n_out, 2))
    ob = rng.uniform([0, 0], [640, 480], (n_out, 2))
    pair = QuantizedMatchPair(0, 1, np.vstack([xa, oa]), np.vstack([xb, ob]), grid_size=1)
    # outliers that happen to sit near their epipolar line are not separable by any method
    from dfsfm.geometry import sampson_distance
    K = cam.K
    E_rel = pb @ pa.inverse()
    tx = np.array([[0, -E_rel.translation[2], E_rel.translation[1]],
                   [E_rel.translation[2], 0, -E_rel.translation[0]],
                   [-E_rel.translation[1], E_rel.translation[0], 0]])
    F = np.linalg.inv(K).T @ tx @ E_rel.rotation @ np.linalg.inv(K)
    planted = np.r_[np.ones(140, bool), sampson_distance(F, oa, ob) < 1.0]
    out = verify_pair_geometric(pair, threshold_px=1.0, min_inliers=20, seed=0)
    assert out is not None
    got = {tuple(v) for v in np.column_stack([out.xy_a, out.xy_b])}
    want = {tuple(v) for v in np.column_stack([pair.xy_a, pair.xy_b])[planted]}
    assert got == want


def test_verify_subset_of_input(rng):
    q, _ = _planted_pair(rng)
    out = verify_pair_geometric(q, 4.0, 20)
    assert out is not None and isinstance(out, QuantizedMatchPair)
    inp = {tuple(v) for v in np.column_stack([q.xy_a, q.xy_b])}
    assert {tuple(v) for v in np.column_stack([out.xy_a, out.xy_b])} <= inp
    # quantization noise near the 4 px threshold costs some inliers
    assert len(out) >= 0.7 * 120


@pytest.mark.parametrize("seed", range(5))
def test_verify_rejects_random(seed):
    rng = np.random.default_rng(seed)
    pair = quantize_matches(RawMatchPair(0, 1, rng.uniform(0, 640, (60, 2)) * [1, 0.75],
                                         rng.uniform(0, 640, (60, 2)) * [1, 0.75]), 8)
    assert verify_pair_geometric(pair, 1.0, 20, seed=seed) is None


def test_verify_rejects_too_few():
    pair = QuantizedMatchPair(0, 1, np.arange(14.0).reshape(7, 2), np.arange(14.0).reshape(7, 2))
    assert verify_pair_geometric(pair, 4.0, min_inliers=5) is None


def test_build_tracks_chain():
    pairs = [RawMatchPair(0, 1, [[8, 8]], [[16, 16]]), RawMatchPair(1, 2, [[16, 16]], [[24, 0]])]
    tracks = build_tracks(pairs)
    assert len(tracks) == 1
    assert tracks[0].image_ids == [0, 1, 2]


def test_build_tracks_conflict_dropped():
    pairs = [RawMatchPair(0, 1, [[8, 8]], [[16, 16]]),
             RawMatchPair(1, 2, [[16, 16]], [[24, 0]]),
             RawMatchPair(0, 2, [[32, 32]], [[24, 0]])]
    assert build_tracks(pairs) == []
    dropped = dropped_nodes(pairs, [])
    assert {tuple(v) for v in dropped[0]} == {(8.0, 8.0), (32.0, 32.0)}


def test_build_tracks_against_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(200):
        pairs = random_match_graph(rng)
        tracks = build_tracks(pairs)
        assert track_sets(tracks) == brute_force_tracks(pairs)
        for t in tracks:
            assert not t.has_duplicate_images()
        flat = [(o.image_id, *o.xy) for t in tracks for o in t]
        assert len(flat) == len(set(flat))


def test_build_tracks_keeps_confidence():
    pairs = [RawMatchPair(0, 1, [[8, 8]], [[16, 16]], [0.4]), RawMatchPair(1, 2, [[16, 16]], [[0, 0]], [0.6])]
    t = build_tracks(pairs)[0]
    assert t.get(1).confidence == 0.6 and t.get(0).confidence == 0.4


def _texture(seed=0, size=200):
    tex = _make_texture(np.random.default_rng(seed), size)
    return (255 * (tex - tex.min()) / (tex.max() - tex.min())).astype(np.float32)


def test_grid_match_self():
    img = _texture()
    pair = coarse_grid_match(img, img, r=8)
    assert len(pair) > 100
    np.testing.assert_array_equal(pair.xy_a, pair.xy_b)
    np.testing.assert_allclose(pair.confidence, 1.0, atol=1e-5)


def test_grid_match_homography():
    img = _texture(1, 260)
    H = np.array([[1.02, 0.03, 4.0], [-0.02, 0.99, 8.0], [0.0, 0.0, 1.0]])
    warped = cv2.warpPerspective(img, H, (260, 260), flags=cv2.INTER_LINEAR)
    pair = coarse_grid_match(img, warped, r=8, min_confidence=0.8)
    assert len(pair) > 50
    pred = cv2.perspectiveTransform(pair.xy_a[None].astype(np.float64), H)[0]
    err = np.linalg.norm(pred - pair.xy_b, axis=1)
    assert np.mean(err <= 8.0) >= 0.9


def test_grid_match_textureless():
    img = np.full((120, 120), 77.0, np.float32)
    assert len(coarse_grid_match(img, img, r=8)) == 0


def test_grid_match_rejects_small_r():
    with pytest.raises(ValueError):
        coarse_grid_match(np.zeros((50, 50)), np.zeros((50, 50)), r=2)


def test_match_file_round_trip(tmp_path, rng):
    pairs = [RawMatchPair("a.png", "b.png", np.round(rng.uniform(0, 640, (30, 2)), 6),
                          np.round(rng.uniform(0, 480, (30, 2)), 6), np.round(rng.uniform(0, 1, 30), 6)),
             RawMatchPair("b.png", "c.png", np.zeros((0, 2)), np.zeros((0, 2)))]
    path = tmp_path / "m.txt"
    write_match_file(path, pairs)
    back = read_match_file(path)
    assert [(p.image_a, p.image_b) for p in back] == [("a.png", "b.png"), ("b.png", "c.png")]
    for p, q in zip(pairs, back):
        np.testing.assert_array_equal(p.xy_a, q.xy_a)
        np.testing.assert_array_equal(p.xy_b, q.xy_b)
        np.testing.assert_array_equal(p.confidence, q.confidence)
    write_match_file(tmp_path / "m2.txt", back)
    assert (tmp_path / "m2.txt").read_text() == path.read_text()


def test_match_file_names_mapping(tmp_path):
    write_match_file(tmp_path / "m.txt", [RawMatchPair(0, 1, [[1, 2]], [[3, 4]], [0.5])], {0: "x.png", 1: "y.png"})
    assert (tmp_path / "m.txt").read_text().splitlines()[0] == "PAIR x.png y.png 1"


def test_match_file_missing(tmp_path):
    with pytest.raises(InputMissingError):
        read_match_file(tmp_path / "nope.txt")


def test_match_file_truncated(tmp_path):
    (tmp_path / "m.txt").write_text("PAIR a b 3\n1 2 3 4 1\n")
    with pytest.raises(ValueError):
        read_match_file(tmp_path / "m.txt")


def test_quantization_speed():
    rng = np.random.default_rng(0)
    pair = RawMatchPair(0, 1, rng.uniform(0, 640, (10000, 2)), rng.uniform(0, 640, (10000, 2)), rng.uniform(0, 1, 10000))
    t = time.perf_counter()
    for r in (2, 4, 8):
        quantize_matches(pair, r)
    assert time.perf_counter() - t < 1.0
