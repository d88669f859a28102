import numpy as np
import pytest

from lidar_sfm.correspondence import (
    FeatureSet,
    PairRejected,
    VerifiedMatchSet,
    build_tracks,
    fundamental_eight_point,
    image_id,
    match_all,
    match_pair,
    station_side,
    symmetric_epipolar_distance,
    verify_epipolar,
)
from lidar_sfm.geom import CameraModel, hat, look_at, project_points
from lidar_sfm.harness import generate, planted_tracks

K = np.array([[800.0, 0, 640], [0, 800, 480], [0, 0, 1]])


def test_image_ids():
    assert image_id(7, 1) == 15 and station_side(15) == (7, 1)


def test_identical_sets_match_identity(rng):
    fs = FeatureSet(0, rng.uniform(0, 100, (50, 2)), rng.normal(size=(50, 32)))
    m = match_pair(fs, FeatureSet(1, fs.xy, fs.descriptors))
    assert np.array_equal(m, np.column_stack([np.arange(50), np.arange(50)]))


def test_ambiguous_descriptors_give_no_matches(rng):
    d = rng.normal(size=(20, 16))
    a = FeatureSet(0, np.zeros((20, 2)), d)
    # every descriptor of a has two equally close twins in b
    b = FeatureSet(1, np.zeros((40, 2)), np.vstack([d + 1e-3, d - 1e-3]))
    assert len(match_pair(a, b)) == 0


def test_planted_pairs_among_distractors(rng):
    n, dim = 60, 32
    base = rng.normal(size=(n, dim))
    perm = rng.permutation(n)
    a = FeatureSet(0, np.zeros((n + 30, 2)), np.vstack([base, rng.normal(size=(30, dim)) * 3 + 5]))
    b = FeatureSet(1, np.zeros((n + 25, 2)),
                   np.vstack([base[perm] + rng.normal(scale=0.01, size=(n, dim)), rng.normal(size=(25, dim)) * 3 - 5]))
    m = match_pair(a, b)
    expected = sorted((int(perm[k]), k) for k in range(n))
    assert sorted(map(tuple, m.tolist())) == expected


def _two_views(rng, n=120):
    Ta = look_at([0, 0, 0], [0, 10, 0])
    Tb = look_at([1.2, 0.3, 0.2], [0.5, 10, 0.3])
    X = np.column_stack([rng.uniform(-4, 4, n), rng.uniform(6, 14, n), rng.uniform(-3, 3, n)])
    cam = CameraModel(K, width=1280, height=960)
    ua, _ = project_points(X, Ta, cam)
    ub, _ = project_points(X, Tb, cam)
    # oracle: x_b^T F x_a = 0 with F = K^-T [t]x R K^-1 for b-from-a
    Tba = Tb.inverse() @ Ta
    F = np.linalg.inv(K).T @ hat(Tba.t) @ Tba.R @ np.linalg.inv(K)
    return ua, ub, F / np.linalg.norm(F)


def test_eight_point_noiseless_matches_pose_oracle(rng):
    ua, ub, F_true = _two_views(rng)
    F = fundamental_eight_point(ua, ub)
    assert min(np.linalg.norm(F - F_true), np.linalg.norm(F + F_true)) < 1e-6
    hb = np.column_stack([ub, np.ones(len(ub))])
    ha = np.column_stack([ua, np.ones(len(ua))])
    assert np.max(np.abs(np.sum(hb * (ha @ F.T), axis=1))) < 1e-6
    assert np.max(symmetric_epipolar_distance(F, ua, ub)) < 1e-6


def test_ransac_recovers_planted_inliers(rng):
    ua, ub, _ = _two_views(rng, 100)
    n_bad = 50
    ub_bad = ub.copy()
    ub_bad[:n_bad] = rng.uniform([0, 0], [1280, 960], size=(n_bad, 2))
    a, b = FeatureSet(0, ua, np.zeros((100, 1))), FeatureSet(1, ub_bad, np.zeros((100, 1)))
    pairs = np.column_stack([np.arange(100), np.arange(100)])
    v = verify_epipolar(pairs, a, b, threshold_px=1.0, iterations=2048, seed=3)
    # a random pixel can land on its epipolar line by chance
    kept = set(v.pairs[:, 0].tolist())
    assert set(range(n_bad, 100)) <= kept
    lucky = {k for k in range(n_bad) if symmetric_epipolar_distance(v.F, ua[k:k + 1], ub_bad[k:k + 1])[0] <= 1.0}
    assert kept == set(range(n_bad, 100)) | lucky


def test_seven_matches_rejected(rng):
    ua, ub, _ = _two_views(rng, 7)
    a, b = FeatureSet(0, ua, np.zeros((7, 1))), FeatureSet(1, ub, np.zeros((7, 1)))
    with pytest.raises(PairRejected):
        verify_epipolar(np.column_stack([np.arange(7)] * 2), a, b)


def _feats(n_per_image, images):
    return {i: FeatureSet(i, np.arange(2 * n_per_image, dtype=float).reshape(-1, 2), np.zeros((n_per_image, 1)))
            for i in images}


def test_chain_makes_one_track():
    feats = _feats(3, [0, 2, 4])
    v = [VerifiedMatchSet(0, 2, np.array([[1, 2]]), np.eye(3)), VerifiedMatchSet(2, 4, np.array([[2, 0]]), np.eye(3))]
    (t,) = build_tracks(v, feats)
    assert list(t.images) == [0, 2, 4] and list(t.feature_idx) == [1, 2, 0]


def test_conflicting_component_dropped():
    feats = _feats(3, [0, 2, 4])
    v = [
        VerifiedMatchSet(0, 2, np.array([[0, 0], [2, 2]]), np.eye(3)),
        VerifiedMatchSet(2, 4, np.array([[0, 1]]), np.eye(3)),
        # links feature 0 and feature 1 of image 0 through image 4
        VerifiedMatchSet(0, 4, np.array([[1, 1]]), np.eye(3)),
    ]
    tracks = build_tracks(v, feats)
    assert [list(t.images) for t in tracks] == [[0, 2]]
    assert list(tracks[0].feature_idx) == [2, 2]


def test_scene_tracks_equal_planted_identities():
    scene = generate({"n_stations": 6, "layout": "line", "lidar_points": 500, "distractors": 20}, seed=2)
    verified, _ = match_all(scene.features, seed=2)
    got = {tuple(zip(t.images.tolist(), t.feature_idx.tolist())) for t in build_tracks(verified, scene.features)}
    want = {tuple(zip(t.images.tolist(), t.feature_idx.tolist())) for t in planted_tracks(scene)}
    assert got == want


def test_match_all_skips_stereo_pairs():
    scene = generate({"n_stations": 3, "layout": "line", "lidar_points": 500}, seed=0)
    verified, rep = match_all(scene.features)
    assert all(v.image_a // 2 != v.image_b // 2 for v in verified)
    assert rep["pairs_tested"] == 12
