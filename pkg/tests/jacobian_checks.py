"""Analytic-vs-central-difference comparisons shared by the residual tests."""
import numpy as np

from lidar_sfm.geom import RigidTransform, so3_exp
from lidar_sfm.residuals import camera_residual, joint_residual, lidar_residual, pose_graph_residual

from conftest import central_diff, perturb, random_transform

H = 1e-6


def rel_err(analytic, numeric):
    return float(np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-8))


def _one(a):
    return np.asarray(a)[None]


def camera_state(rng):
    T = random_transform(rng, scale=3.0)
    R_cs = so3_exp(rng.normal(scale=0.05, size=3))
    t_cs = np.array([-0.4, 0.0, 0.0]) + rng.normal(scale=0.01, size=3)
    K = np.array([[900.0 + rng.uniform(0, 200), rng.uniform(-1, 1), 640], [0, 950.0, 480], [0, 0, 1]])
    # keep the point in front of the camera
    c = np.array([rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(2, 12)])
    X = T.apply(R_cs.T @ (c - t_cs))
    uv = rng.uniform(0, 1000, size=2)
    return T, X, K, R_cs, t_cs, uv


def camera_errors(rng):
    T, X, K, R_cs, t_cs, uv = camera_state(rng)

    def f(R, t, x):
        return camera_residual(_one(R), _one(t), _one(x), _one(K), _one(R_cs), _one(t_cs), _one(uv))[0][0]

    _, Jp, Jx, _ = camera_residual(_one(T.R), _one(T.t), _one(X), _one(K), _one(R_cs), _one(t_cs), _one(uv))
    num_p = central_diff(lambda d: f(*perturb(T.R, T.t, d), X), 6, H)
    num_x = central_diff(lambda d: f(T.R, T.t, X + d), 3, H)
    return {"pose": rel_err(Jp[0], num_p), "point": rel_err(Jx[0], num_x)}


def lidar_errors(rng):
    Ti, Tj, Te = random_transform(rng, scale=3.0), random_transform(rng, scale=3.0), random_transform(rng, 0.3, 0.3)
    p, y = rng.normal(scale=4.0, size=3), rng.normal(scale=4.0, size=3)
    n = rng.normal(size=3)
    n /= np.linalg.norm(n)

    def f(i, j, e):
        return lidar_residual(_one(i.R), _one(i.t), _one(j.R), _one(j.t), e.R, e.t, _one(p), _one(y), _one(n))[0][0]

    def moved(T, d):
        return RigidTransform(*perturb(T.R, T.t, d), check=False)

    _, Ji, Jj, Je = lidar_residual(_one(Ti.R), _one(Ti.t), _one(Tj.R), _one(Tj.t), Te.R, Te.t, _one(p), _one(y), _one(n))
    return {
        "T_i": rel_err(Ji[0], central_diff(lambda d: f(moved(Ti, d), Tj, Te), 6, H)),
        "T_j": rel_err(Jj[0], central_diff(lambda d: f(Ti, moved(Tj, d), Te), 6, H)),
        "T_e": rel_err(Je[0], central_diff(lambda d: f(Ti, Tj, moved(Te, d)), 6, H)),
    }


def joint_errors(rng):
    Ti, Te = random_transform(rng, scale=3.0), random_transform(rng, 0.3, 0.3)
    X, y = rng.normal(scale=4.0, size=3), rng.normal(scale=4.0, size=3)
    n = rng.normal(size=3)
    n /= np.linalg.norm(n)

    def f(i, e, x):
        return joint_residual(_one(i.R), _one(i.t), e.R, e.t, _one(x), _one(y), _one(n))[0][0]

    def moved(T, d):
        return RigidTransform(*perturb(T.R, T.t, d), check=False)

    _, Ji, Je, Jx = joint_residual(_one(Ti.R), _one(Ti.t), Te.R, Te.t, _one(X), _one(y), _one(n))
    return {
        "T_i": rel_err(Ji[0], central_diff(lambda d: f(moved(Ti, d), Te, X), 6, H)),
        "T_e": rel_err(Je[0], central_diff(lambda d: f(Ti, moved(Te, d), X), 6, H)),
        "point": rel_err(Jx[0], central_diff(lambda d: f(Ti, Te, X + d), 3, H)),
    }


def pose_graph_errors(rng):
    Ti = random_transform(rng, scale=3.0)
    Tj = random_transform(rng, scale=3.0)
    # measurement near the true relative motion keeps the residual well inside the log's domain
    Tij = Ti.inverse() @ Tj @ random_transform(rng, angle=0.5, scale=0.3)

    def f(Ri, ti, Rj, tj):
        return pose_graph_residual(_one(Ri), _one(ti), _one(Rj), _one(tj), _one(Tij.R), _one(Tij.t))[0][0]

    _, Ji, Jj = pose_graph_residual(_one(Ti.R), _one(Ti.t), _one(Tj.R), _one(Tj.t), _one(Tij.R), _one(Tij.t))
    return {
        "T_i": rel_err(Ji[0], central_diff(lambda d: f(*perturb(Ti.R, Ti.t, d), Tj.R, Tj.t), 6, H)),
        "T_j": rel_err(Jj[0], central_diff(lambda d: f(Ti.R, Ti.t, *perturb(Tj.R, Tj.t, d)), 6, H)),
    }


CHECKS = {"camera": camera_errors, "lidar": lidar_errors, "joint": joint_errors, "pose_graph": pose_graph_errors}


def worst_errors(name, n_states=100, seed=0):
    """Largest relative error per Jacobian block over ``n_states`` random states."""
    rng = np.random.default_rng(seed)
    worst = {}
    for _ in range(n_states):
        for k, v in CHECKS[name](rng).items():
            worst[k] = max(worst.get(k, 0.0), v)
    return worst
