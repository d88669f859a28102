import numpy as np
import pytest

from lidar_sfm.geom import RigidTransform, so3_exp
from lidar_sfm.harness import ate, generate, planted_tracks, track_planted_id
from lidar_sfm.jointrefine import (
    CameraObs,
    CloudIndex,
    JointConfig,
    JointObs,
    LidarObs,
    alternate,
    associate,
    camera_observations,
    filter_observations,
    fit_patch,
    sample_keypoints,
)


def plane_cloud(rng, n=2000, z=2.0, thickness=0.0):
    xy = rng.uniform(-2, 2, (n, 2))
    return np.column_stack([xy, z + rng.normal(scale=thickness, size=n) if thickness else np.full(n, z)])


def test_keypoints_exhaustion_and_determinism(rng):
    cloud = rng.normal(size=(50, 3))
    assert np.array_equal(sample_keypoints(cloud, 100), cloud)
    big = rng.normal(size=(5000, 3))
    a, b = sample_keypoints(big, 300, seed=4), sample_keypoints(big, 300, seed=4)
    assert len(a) == 300 and np.array_equal(a, b)
    assert len(np.unique(a, axis=0)) == 300
    assert not np.array_equal(a, sample_keypoints(big, 300, seed=5))


def test_keypoints_are_uniform_over_points(rng):
    # a dense cluster keeps its share of the samples
    cloud = np.vstack([rng.normal(size=(1000, 3)), rng.normal(size=(3000, 3)) + 50])
    kp = sample_keypoints(cloud, 800, seed=0)
    share = np.mean(kp[:, 0] < 25)
    # sampling without replacement is tighter than binomial, so 3 sigma is conservative
    assert abs(share - 0.25) <= 3 * np.sqrt(0.25 * 0.75 / 800)


def test_fit_patch_plane(rng):
    idx = CloudIndex(plane_cloud(rng))
    p = fit_patch(idx, [0.3, -0.2, 2.05])
    assert p is not None
    # oriented toward the sensor at the origin
    assert np.allclose(p.n, [0, 0, -1], atol=1e-9)
    assert abs(p.y[2] - 2.0) < 1e-12 and np.linalg.norm(p.y[:2] - [0.3, -0.2]) < 0.2
    near = fit_patch(idx, [0.3, -0.2, 2.05], anchor="nearest")
    assert np.any(np.all(idx.points == near.y, axis=1))
    with pytest.raises(ValueError):
        fit_patch(idx, [0, 0, 2], anchor="middle")


def test_fit_patch_gates(rng):
    idx = CloudIndex(plane_cloud(rng))
    assert fit_patch(idx, [0, 0, 3.0], max_dist=0.5) is None
    assert fit_patch(CloudIndex(rng.normal(size=(5, 3))), [0, 0, 0], k=8) is None
    blob = CloudIndex(rng.normal(scale=0.05, size=(3000, 3)))
    # eight random neighbours can look planar by chance; many cannot
    assert fit_patch(blob, [0, 0, 0], k=200, max_dist=1.0, planarity=3.0) is None
    line = CloudIndex(np.column_stack([np.linspace(0, 1, 50), np.zeros(50), np.full(50, 2.0)]))
    assert fit_patch(line, [0.5, 0, 2.0]) is None
    thick = CloudIndex(plane_cloud(rng, 500, thickness=0.1))
    assert fit_patch(thick, [0, 0, 2], max_dist=2.0, max_rms=0.01) is None


def two_station_lidar(rng, offset):
    cloud = plane_cloud(rng, 3000)
    R = np.stack([np.eye(3)] * 2)
    t = np.array([[0.0, 0, 0], [offset, 0, 0]])
    # station 1's cloud is the same plane seen from its own position
    clouds = [cloud, cloud - [offset, 0, 0]]
    idx = [CloudIndex(c) for c in clouds]
    kps = [sample_keypoints(c, 300, seed=k) for k, c in enumerate(clouds)]
    return R, t, idx, kps


def test_association_at_truth_has_zero_distance(rng):
    R, t, idx, kps = two_station_lidar(rng, 1.0)
    cfg = JointConfig(use_joint=False, max_normal_angle_deg=None)
    L, J = associate(R, t, RigidTransform(), idx, kps, [None, None], np.zeros((0, 3)), [], cfg)
    assert len(L) > 300 and len(J) == 0
    assert set(zip(L.src.tolist(), L.dst.tolist())) == {(0, 1), (1, 0)}
    d = np.einsum("mi,mi->m", L.p + np.where(L.src[:, None] == 0, -1.0, 1.0) * [1.0, 0, 0] - L.y, L.n)
    assert np.max(np.abs(d)) < 1e-12


def test_association_range_gate(rng):
    R, t, idx, kps = two_station_lidar(rng, 6.0)
    cfg = JointConfig(use_joint=False, max_normal_angle_deg=None, max_dist=10.0)
    L, _ = associate(R, t, RigidTransform(), idx, kps, [None, None], np.zeros((0, 3)), [], cfg)
    assert len(L) == 0


def test_filter_drops_outlier_and_short_tracks():
    # three points, three views each; point 1 has one 10 px view, point 2 one view of 12 px
    st = np.tile([0, 1, 2], 3)
    pt = np.repeat([0, 1, 2], 3)
    C = CameraObs(st, pt, np.zeros(9, np.int64), np.zeros((9, 2)), np.column_stack([pt, st]))
    cam = np.full(9, 0.5)
    cam[4] = 10.0
    cam[8] = 12.0
    J = JointObs(np.array([0, 0]), np.array([0, 1]), np.zeros((2, 3)), np.zeros((2, 3)))
    L = LidarObs(np.array([0, 1]), np.array([1, 0]), np.zeros((2, 3)), np.zeros((2, 3)), np.zeros((2, 3)))
    cfg = JointConfig(thresh_c=4.0, min_views=2)
    C2, L2, J2, alive = filter_observations(C, L, J, (cam, np.array([0.01, 0.5]), np.array([0.0, 0.0])), cfg, 3)
    assert len(C2) == 7 and 4 not in C2.track_obs[:, 1] + 3 * C2.track_obs[:, 0]
    assert alive.tolist() == [True, True, True] and len(L2) == 1 and len(J2) == 2
    cfg3 = JointConfig(thresh_c=4.0, min_views=3)
    C3, _, J3, alive3 = filter_observations(C, L, J, (cam, np.zeros(2), np.zeros(2)), cfg3, 3)
    assert alive3.tolist() == [True, False, False] and len(C3) == 3 and J3.point.tolist() == [0]
    # filtering the survivors again changes nothing
    keep = np.ones(len(C3), bool)
    C4, _, _, alive4 = filter_observations(C3, L, J3, (np.full(len(C3), 0.5), np.zeros(2), np.zeros(1)), cfg3, 3)
    assert len(C4) == len(C3) and alive4[0] and keep.all()


@pytest.fixture(scope="module")
def line_scene():
    sc = generate(dict(layout="line", n_stations=5, lidar_points=8000), 0)
    tracks = []
    for tr in planted_tracks(sc):
        if len(tr) >= 3:
            tr.point = sc.points[track_planted_id(tr, sc)].copy()
            tr.inliers = np.ones(len(tr), bool)
            tracks.append(tr)
    return sc, tracks


def test_camera_only_fixed_point(line_scene):
    sc, tracks = line_scene
    cfg = JointConfig(use_lidar=False, use_joint=False)
    res = alternate(sc.poses, tracks, sc.clouds, sc.calib, cfg)
    assert res.report["iterations"] == 1 and res.report["converged"]
    assert res.report["final_cost"] < 1e-16
    assert ate(res.poses, sc.poses)[1] < 1e-9


def test_camera_only_recovers_perturbed_poses(line_scene, rng):
    sc, tracks = line_scene
    noisy = {s: (T if s == 0 else T @ RigidTransform(so3_exp(rng.normal(scale=2e-3, size=3)),
                                                       rng.normal(scale=0.02, size=3)))
             for s, T in sc.poses.items()}
    res = alternate(noisy, tracks, sc.clouds, sc.calib, JointConfig(use_lidar=False, use_joint=False))
    for s in sc.poses:
        assert np.linalg.norm(res.poses[s].t - sc.poses[s].t) < 1e-4


def test_camera_observations_respect_inliers(line_scene):
    _, tracks = line_scene
    tr = tracks[0].subset(np.arange(len(tracks[0])))
    tr.inliers = np.zeros(len(tr), bool)
    tr.inliers[:2] = True
    C = camera_observations([tr], {s: s for s in range(5)})
    assert len(C) == 2 and C.track_obs.tolist() == [[0, 0], [0, 1]]
