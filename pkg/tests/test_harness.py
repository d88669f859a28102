import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from lidar_sfm.geom import RigidTransform, so3_exp
from lidar_sfm.harness import (
    GroundTruth,
    SceneConfig,
    SceneError,
    align_poses,
    ate,
    evaluate,
    generate,
    make_poses,
)

from conftest import random_transform


@pytest.fixture
def truth():
    return make_poses(SceneConfig(n_stations=12))


def test_ate_is_gauge_invariant(truth, rng):
    G = random_transform(rng, scale=5.0)
    moved = {s: G @ T for s, T in truth.items()}
    rot, tr = ate(moved, truth)
    assert rot < 1e-6 and tr < 1e-12


def test_single_station_offset_gives_d_over_root_n(truth):
    est = dict(truth)
    est[3] = RigidTransform(truth[3].R, truth[3].t + [0.3, 0, 0])
    _, tr = ate(est, truth, G=RigidTransform())
    assert tr == pytest.approx(0.3 / np.sqrt(len(truth)), rel=1e-12)
    # alignment can only lower it
    assert ate(est, truth)[1] <= tr


def test_alignment_matches_scipy(truth, rng):
    G = random_transform(rng, scale=3.0)
    est = {s: G.inverse() @ T @ RigidTransform(so3_exp(rng.normal(scale=0.01, size=3)), rng.normal(scale=0.05, size=3))
           for s, T in truth.items()}
    A = align_poses(est, truth)
    ids = sorted(truth)
    src = np.vstack([[est[s].t, est[s].t + est[s].R[:, 0], est[s].t + est[s].R[:, 1], est[s].t + est[s].R[:, 2]]
                     for s in ids])
    dst = np.vstack([[truth[s].t, truth[s].t + truth[s].R[:, 0], truth[s].t + truth[s].R[:, 1],
                      truth[s].t + truth[s].R[:, 2]] for s in ids])
    R, _ = Rotation.align_vectors(dst - dst.mean(0), src - src.mean(0))
    assert np.allclose(A.R, R.as_matrix(), atol=1e-10)
    assert np.allclose(A.t, dst.mean(0) - R.apply(src.mean(0)), atol=1e-10)


def test_unknown_station_rejected(truth):
    with pytest.raises(SceneError):
        ate({99: RigidTransform()}, truth)


def test_scene_is_deterministic():
    cfg = dict(n_stations=6, layout="line", lidar_points=2000)
    a, b = generate(cfg, 5), generate(cfg, 5)
    for img in a.features:
        assert np.array_equal(a.features[img].xy, b.features[img].xy)
        assert np.array_equal(a.features[img].descriptors, b.features[img].descriptors)
    assert all(np.array_equal(a.clouds[s], b.clouds[s]) for s in a.clouds)
    assert not np.array_equal(generate(cfg, 6).clouds[0], a.clouds[0])


def test_scene_config_rejects_unknown_keys():
    with pytest.raises(SceneError):
        SceneConfig.from_dict({"n_station": 4})


def test_planted_structure_projects_onto_features():
    sc = generate(dict(n_stations=6, layout="line", lidar_points=2000), 1)
    for img, ids in sc.feature_ids.items():
        st, side = divmod(img, 2)
        for f in np.nonzero(ids >= 0)[0][:10]:
            X = sc.poses[st].inverse().apply(sc.points[int(ids[f])])
            c = sc.calib.R_cs[side] @ X + sc.calib.t_cs[side]
            uv = (sc.calib.K[side] @ c)[:2] / c[2]
            assert np.linalg.norm(uv - sc.features[img].xy[f]) < 1e-9


def test_evaluate_accepts_ground_truth_tables(truth):
    gt = GroundTruth(truth, RigidTransform(), {}, {})
    rep = evaluate(gt, truth, extrinsic=RigidTransform(np.eye(3), [0.0, 0.02, 0.0]))
    assert rep["ate_trans_m"] < 1e-12 and rep["extrinsic_trans_m"] == pytest.approx(0.02)
