"""Observation residuals with analytic Jacobians.

Poses are world-from-station ``(R, t)`` perturbed on the right,
``T <- T Exp(delta)``, with ``delta = (omega, v)``. The LiDAR extrinsic ``T_e``
maps LiDAR coordinates into the left camera and is perturbed the same way.
Every function takes stacked per-observation arrays and returns the residuals
followed by Jacobian blocks.
"""
import numpy as np

from . import kernels
from .geom import adjoint, se3_left_jacobian_inv, se3_log, se3_right_jacobian_inv
from .solver import ResidualTerm


def _mv(R, v):
    """Stacked ``R @ v``."""
    return np.matmul(R, v[..., None])[..., 0]


def _mtv(R, v):
    """Stacked ``R^T @ v``."""
    return np.matmul(v[..., None, :], R)[..., 0, :]


def camera_residual(R, t, X, K, R_cs, t_cs, uv):
    """Reprojection error ``pi(x; T, P) - u``.

    Returns ``e (m, 2)``, ``J_pose (m, 2, 6)``, ``J_point (m, 2, 3)`` and the
    camera-frame depth ``z (m,)``.
    """
    cs = _mtv(R, X - t)
    c = _mv(R_cs, cs) + t_cs
    z = c[:, 2]
    zs = np.where(np.abs(z) < 1e-12, 1e-12, z)
    num0 = K[:, 0, 0] * c[:, 0] + K[:, 0, 1] * c[:, 1]
    num1 = K[:, 1, 1] * c[:, 1]
    e = np.column_stack([num0 / zs + K[:, 0, 2], num1 / zs + K[:, 1, 2]]) - uv
    D = np.zeros((len(X), 2, 3))
    D[:, 0, 0] = K[:, 0, 0] / zs
    D[:, 0, 1] = K[:, 0, 1] / zs
    D[:, 0, 2] = -num0 / (zs * zs)
    D[:, 1, 1] = K[:, 1, 1] / zs
    D[:, 1, 2] = -num1 / (zs * zs)
    DR = D @ R_cs
    # a^T hat(s) == (a x s)^T, row by row
    J_pose = np.concatenate([np.cross(DR, cs[:, None, :]), -DR], axis=2)
    J_point = DR @ np.swapaxes(R, 1, 2)
    return e, J_pose, J_point, z


def lidar_residual(Ri, ti, Rj, tj, Re, te, p, y, n):
    """Point-to-patch distance ``n^T (T_e^-1 T_j^-1 T_i T_e p - y)``.

    Returns ``e (m, 1)`` and Jacobians ``(m, 1, 6)`` w.r.t. ``T_i``, ``T_j`` and ``T_e``.
    """
    Re = np.asarray(Re)
    te = np.asarray(te)
    s = p @ Re.T + te
    w = _mv(Ri, s) + ti
    cj = _mtv(Rj, w - tj)
    q = (cj - te) @ Re
    e = np.sum(n * (q - y), axis=1)[:, None]

    b = n @ Re.T                # Re n
    a = _mtv(Ri, _mv(Rj, b))    # Ri^T Rj Re n
    ae = a @ Re                 # Re^T a
    Ji = np.concatenate([-np.cross(a, s), a], axis=1)[:, None, :]
    Jj = np.concatenate([np.cross(b, cj), -b], axis=1)[:, None, :]
    Je = np.concatenate([np.cross(n, q) - np.cross(ae, p), ae - n], axis=1)[:, None, :]
    return e, Ji, Jj, Je


def joint_residual(Ri, ti, Re, te, X, y, n):
    """Structure-point-to-patch distance ``n^T (T_e^-1 T_i^-1 x - y)``.

    Returns ``e (m, 1)`` and Jacobians w.r.t. ``T_i (m,1,6)``, ``T_e (m,1,6)``, ``x (m,1,3)``.
    """
    Re = np.asarray(Re)
    te = np.asarray(te)
    c = _mtv(Ri, X - ti)
    q = (c - te) @ Re
    e = np.sum(n * (q - y), axis=1)[:, None]
    b = n @ Re.T
    Ji = np.concatenate([np.cross(b, c), -b], axis=1)[:, None, :]
    Je = np.concatenate([np.cross(n, q), -n], axis=1)[:, None, :]
    Jx = _mv(Ri, b)[:, None, :]
    return e, Ji, Je, Jx


def pose_graph_residual(Ri, ti, Rj, tj, Rij, tij):
    """``log(T_ij^-1 T_i^-1 T_j)`` and its Jacobians w.r.t. ``T_i`` and ``T_j``."""
    RijT = np.swapaxes(Rij, 1, 2)
    RiT = np.swapaxes(Ri, 1, 2)
    # T_ij^-1 T_i^-1 T_j
    R_a = RijT @ RiT
    t_a = -np.einsum("mij,mj->mi", RijT, tij) - np.einsum("mij,mj->mi", R_a, ti)
    RE = R_a @ Rj
    tE = np.einsum("mij,mj->mi", R_a, tj) + t_a
    r = se3_log(RE, tE)
    Ji = -se3_left_jacobian_inv(r) @ adjoint(RijT, -np.einsum("mij,mj->mi", RijT, tij))
    Jj = se3_right_jacobian_inv(r)
    return r, Ji, Jj


# ---------------------------------------------------------------------------
# solver terms


def camera_term(obs_pose, obs_point, obs_side, uv, calib, huber=None, weight=1.0,
                pose_group="poses", point_group="points", name="camera"):
    """Reprojection residual term over stacked observations."""
    K = calib.K[obs_side]
    R_cs = calib.R_cs[obs_side]
    t_cs = calib.t_cs[obs_side]

    def evaluate(params, with_jac):
        poses = params[pose_group]
        X = params[point_group].values[obs_point]
        e, Jp, Jx, _ = camera_residual(poses.R[obs_pose], poses.t[obs_pose], X, K, R_cs, t_cs, uv)
        if not with_jac:
            return e, None
        return e, [(pose_group, obs_pose, Jp), (point_group, obs_point, Jx)]

    return ResidualTerm(name, evaluate, weight, huber)


def lidar_term(src, dst, p, y, n, huber=None, weight=1.0, name="lidar"):
    """Point-to-patch term between key points of station ``src`` and patches of ``dst``."""
    src = np.ascontiguousarray(src, dtype=np.int64)
    dst = np.ascontiguousarray(dst, dtype=np.int64)
    p, y, n = (np.ascontiguousarray(a, dtype=np.float64) for a in (p, y, n))
    zero = np.zeros(len(p), dtype=np.int64)

    def evaluate(params, with_jac):
        P, E = params["poses"], params["extrinsic"]
        e, J = kernels.point_to_plane(P.R, P.t, src, dst, E.R[0], E.t[0], p, y, n, with_jac)
        if not with_jac:
            return e[:, None], None
        J = J[:, None, :]
        return e[:, None], [("poses", src, J[:, :, :6]), ("poses", dst, J[:, :, 6:12]), ("extrinsic", zero, J[:, :, 12:])]

    return ResidualTerm(name, evaluate, weight, huber)


def joint_term(station, point, y, n, huber=None, weight=1.0, name="joint"):
    """Structure-point-to-patch term in the LiDAR frame of ``station``."""
    zero = np.zeros(len(point), dtype=np.int64)

    def evaluate(params, with_jac):
        P, E = params["poses"], params["extrinsic"]
        X = params["points"].values[point]
        e, Ji, Je, Jx = joint_residual(P.R[station], P.t[station], E.R[0], E.t[0], X, y, n)
        if not with_jac:
            return e, None
        return e, [("poses", station, Ji), ("extrinsic", zero, Je), ("points", point, Jx)]

    return ResidualTerm(name, evaluate, weight, huber)
