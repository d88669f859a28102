"""SE(3)/SO(3) algebra, pinhole projection and DLT triangulation.

Twists are ordered ``(omega, v)``: rotation first, translation second.
All batch helpers accept leading dimensions, e.g. ``so3_exp`` maps
``(..., 3) -> (..., 3, 3)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

_SMALL = 1e-6
# below this angle the closed forms lose digits to cancellation; Taylor series are exact to rounding
_SERIES = 1e-2
SINGULAR_ANGLE = np.pi - 1e-6


class GeometryError(ValueError):
    pass


class SingularityError(GeometryError):
    """Rotation too close to pi for a well-defined logarithm."""


class CheiralityError(GeometryError):
    """Point at or behind the camera."""


class DegenerateError(GeometryError):
    """Configuration does not determine a unique solution."""


# ---------------------------------------------------------------------------
# SO(3)


def hat(v):
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def vee(W):
    W = np.asarray(W)
    return np.stack([W[..., 2, 1], W[..., 0, 2], W[..., 1, 0]], axis=-1)


def _coeffs(theta):
    """sin(t)/t, (1-cos t)/t^2, (t-sin t)/t^3 with series fallbacks near zero."""
    t2 = theta * theta
    t4 = t2 * t2
    small = theta < _SERIES
    ts = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - t2 / 6.0 + t4 / 120.0, np.sin(ts) / ts)
    # half-angle form: 1 - cos(t) loses digits to rounding of cos near 1
    half = np.sin(0.5 * ts) / ts
    b = np.where(small, 0.5 - t2 / 24.0 + t4 / 720.0, 2.0 * half * half)
    c = np.where(small, 1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0, (ts - np.sin(ts)) / (ts**3))
    return a, b, c


def so3_exp(w):
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w, axis=-1)
    a, b, _ = _coeffs(theta)
    W = hat(w)
    return np.eye(3) + a[..., None, None] * W + b[..., None, None] * (W @ W)


def rotation_angle(R):
    """Rotation angle in radians, accurate over the whole [0, pi] range."""
    R = np.asarray(R, dtype=np.float64)
    s = 0.5 * np.linalg.norm(vee(R - np.swapaxes(R, -1, -2)), axis=-1)
    c = 0.5 * (np.trace(R, axis1=-2, axis2=-1) - 1.0)
    return np.arctan2(s, c)


def so3_log(R, strict=True):
    R = np.asarray(R, dtype=np.float64)
    theta = rotation_angle(R)
    if strict and np.any(theta >= SINGULAR_ANGLE):
        raise SingularityError("rotation angle too close to pi for so3_log")
    small = theta < _SMALL
    ts = np.where(small, 1.0, theta)
    k = np.where(small, 0.5 + theta * theta / 12.0, 0.5 * ts / np.sin(ts))
    return k[..., None] * vee(R - np.swapaxes(R, -1, -2))


def so3_left_jacobian(w):
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w, axis=-1)
    _, b, c = _coeffs(theta)
    W = hat(w)
    return np.eye(3) + b[..., None, None] * W + c[..., None, None] * (W @ W)


def so3_left_jacobian_inv(w):
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w, axis=-1)
    a, b, _ = _coeffs(theta)
    small = theta < _SERIES
    t2 = theta * theta
    ts2 = np.where(small, 1.0, t2)
    d = np.where(small, 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0, (1.0 - a / (2.0 * b)) / ts2)
    W = hat(w)
    return np.eye(3) - 0.5 * W + d[..., None, None] * (W @ W)


# ---------------------------------------------------------------------------
# SE(3) on (R, t) pairs


def se3_exp(xi):
    xi = np.asarray(xi, dtype=np.float64)
    R = so3_exp(xi[..., :3])
    t = np.einsum("...ij,...j->...i", so3_left_jacobian(xi[..., :3]), xi[..., 3:])
    return R, t


def se3_log(R, t, strict=True):
    w = so3_log(R, strict=strict)
    v = np.einsum("...ij,...j->...i", so3_left_jacobian_inv(w), np.asarray(t, dtype=np.float64))
    return np.concatenate([w, v], axis=-1)


def _q_matrix(w, v):
    """Translational coupling block of the SE(3) left Jacobian."""
    theta = np.linalg.norm(w, axis=-1)
    small = theta < _SERIES
    ts = np.where(small, 1.0, theta)
    t2 = theta * theta
    t4 = t2 * t2
    s, c = np.sin(ts), np.cos(ts)
    c1 = np.where(small, 1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0, (ts - s) / ts**3)
    c2 = np.where(small, 1.0 / 24.0 - t2 / 720.0 + t4 / 40320.0, (ts * ts + 2.0 * c - 2.0) / (2.0 * ts**4))
    c3 = np.where(small, 1.0 / 120.0 - t2 / 2520.0 + t4 / 120960.0, (2.0 * ts - 3.0 * s + ts * c) / (2.0 * ts**5))
    W = hat(w)
    V = hat(v)
    WV = W @ V
    VW = V @ W
    WVW = WV @ W
    WW = W @ W
    return (
        0.5 * V
        + c1[..., None, None] * (WV + VW + WVW)
        + c2[..., None, None] * (WW @ V + V @ WW - 3.0 * WVW)
        + c3[..., None, None] * (WVW @ W + W @ WVW)
    )


def se3_left_jacobian_inv(xi):
    """Inverse left Jacobian of SE(3) for twists ordered (omega, v)."""
    xi = np.asarray(xi, dtype=np.float64)
    w, v = xi[..., :3], xi[..., 3:]
    Jinv = so3_left_jacobian_inv(w)
    Q = _q_matrix(w, v)
    out = np.zeros(xi.shape[:-1] + (6, 6))
    out[..., :3, :3] = Jinv
    out[..., 3:, 3:] = Jinv
    out[..., 3:, :3] = -Jinv @ Q @ Jinv
    return out


def se3_right_jacobian_inv(xi):
    return se3_left_jacobian_inv(-np.asarray(xi, dtype=np.float64))


def adjoint(R, t):
    R = np.asarray(R, dtype=np.float64)
    out = np.zeros(R.shape[:-2] + (6, 6))
    out[..., :3, :3] = R
    out[..., 3:, 3:] = R
    out[..., 3:, :3] = hat(t) @ R
    return out


def compose_rt(Ra, ta, Rb, tb):
    return Ra @ Rb, np.einsum("...ij,...j->...i", Ra, tb) + ta


def invert_rt(R, t):
    Rt = np.swapaxes(R, -1, -2)
    return Rt, -np.einsum("...ij,...j->...i", Rt, t)


# ---------------------------------------------------------------------------
# RigidTransform


class RigidTransform:
    """Immutable rigid transform ``x -> R x + t``."""

    __slots__ = ("R", "t")

    def __init__(self, R=None, t=None, check=True):
        R = np.eye(3) if R is None else np.array(R, dtype=np.float64)
        t = np.zeros(3) if t is None else np.array(t, dtype=np.float64).reshape(3)
        if R.shape != (3, 3):
            raise GeometryError(f"rotation must be 3x3, got {R.shape}")
        if check:
            if not np.allclose(R.T @ R, np.eye(3), atol=1e-9) or abs(np.linalg.det(R) - 1.0) > 1e-9:
                raise GeometryError("rotation matrix is not orthonormal with det +1")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    def __setattr__(self, name, value):
        raise AttributeError("RigidTransform is immutable")

    def __reduce__(self):
        return (RigidTransform, (np.array(self.R), np.array(self.t), False))

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, M):
        M = np.asarray(M, dtype=np.float64)
        return cls(M[:3, :3], M[:3, 3])

    @classmethod
    def from_quaternion(cls, q_wxyz, t):
        q = np.asarray(q_wxyz, dtype=np.float64)
        n = np.linalg.norm(q)
        if n == 0:
            raise GeometryError("zero quaternion")
        q = q / n
        R = Rotation.from_quat([q[1], q[2], q[3], q[0]]).as_matrix()
        return cls(R, t)

    @classmethod
    def exp(cls, xi):
        R, t = se3_exp(xi)
        return cls(R, t, check=False)

    @property
    def matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.t
        return M

    @property
    def quaternion(self):
        """Unit quaternion (w, x, y, z) with w >= 0."""
        x, y, z, w = Rotation.from_matrix(self.R).as_quat()
        q = np.array([w, x, y, z])
        return -q if q[0] < 0 else q

    @property
    def angle(self):
        return float(rotation_angle(self.R))

    def inverse(self):
        R, t = invert_rt(self.R, self.t)
        return RigidTransform(R, t, check=False)

    def __matmul__(self, other):
        if isinstance(other, RigidTransform):
            R, t = compose_rt(self.R, self.t, other.R, other.t)
            return RigidTransform(R, t, check=False)
        return NotImplemented

    def apply(self, points):
        p = np.asarray(points, dtype=np.float64)
        return p @ self.R.T + self.t

    def log(self):
        return se3_log(self.R, self.t)

    def __repr__(self):
        return f"RigidTransform(t={np.array2string(self.t, precision=4)}, angle={np.degrees(self.angle):.4f}deg)"

    def __eq__(self, other):
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return bool(np.array_equal(self.R, other.R) and np.array_equal(self.t, other.t))

    def __hash__(self):
        return hash((self.R.tobytes(), self.t.tobytes()))


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    return a @ b


def transform_error(a: RigidTransform, b: RigidTransform):
    """Angle (deg) and translation (m) of ``a^-1 b``."""
    d = a.inverse() @ b
    return float(np.degrees(d.angle)), float(np.linalg.norm(d.t))


def look_at(position, target, up=(0.0, 0.0, 1.0)):
    """World-from-camera pose for a camera at ``position`` looking at ``target``.

    Camera axes follow the usual vision convention: x right, y down, z forward.
    """
    position = np.asarray(position, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - position
    f /= np.linalg.norm(f)
    r = np.cross(f, up)
    r /= np.linalg.norm(r)
    d = np.cross(f, r)
    return RigidTransform(np.column_stack([r, d, f]), position)


# ---------------------------------------------------------------------------
# Cameras


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera rigidly attached to a station.

    ``cam_from_station`` maps station (left camera) coordinates into this
    camera; it is the identity for the left camera.
    """

    K: np.ndarray
    cam_from_station: RigidTransform = RigidTransform()
    width: int = 0
    height: int = 0

    def __post_init__(self):
        K = np.array(self.K, dtype=np.float64)
        if K.shape != (3, 3) or K[0, 0] <= 0 or K[1, 1] <= 0:
            raise GeometryError("intrinsics must be 3x3 with positive focal lengths")
        if abs(K[1, 0]) + abs(K[2, 0]) + abs(K[2, 1]) > 0 or K[2, 2] != 1.0:
            raise GeometryError("intrinsics must be upper triangular with K[2,2] = 1")
        K.flags.writeable = False
        object.__setattr__(self, "K", K)

    @property
    def K_inv(self):
        return np.linalg.inv(self.K)

    def cam_from_world(self, pose: RigidTransform) -> RigidTransform:
        return self.cam_from_station @ pose.inverse()

    def projection_matrix(self, pose: RigidTransform):
        T = self.cam_from_world(pose)
        return self.K @ np.hstack([T.R, T.t[:, None]])

    def in_bounds(self, uv, margin=0.0):
        uv = np.asarray(uv)
        return (
            (uv[..., 0] >= margin)
            & (uv[..., 0] <= self.width - 1 - margin)
            & (uv[..., 1] >= margin)
            & (uv[..., 1] <= self.height - 1 - margin)
        )


def project_points(X, pose: RigidTransform, cam: CameraModel):
    """Vectorised projection. Returns (pixels, depths) without cheirality checks."""
    c = cam.cam_from_world(pose).apply(np.atleast_2d(X))
    z = c[:, 2]
    uvw = c @ cam.K.T
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = uvw[:, :2] / uvw[:, 2:3]
    return uv, z


def project(x, pose: RigidTransform, cam: CameraModel):
    """Pixel coordinates of world point ``x`` seen from station ``pose``."""
    uv, z = project_points(np.asarray(x, dtype=np.float64)[None], pose, cam)
    if not z[0] > 0:
        raise CheiralityError(f"point has non-positive depth {z[0]:.3g}")
    return uv[0]


def triangulate_dlt(observations):
    """Linear triangulation from ``[(pixel, pose, camera), ...]``.

    Pixels are mapped through the inverse intrinsics first, so the linear
    system lives in normalised image coordinates.
    """
    if len(observations) < 2:
        raise DegenerateError("need at least two views")
    rows = []
    centers = []
    for uv, pose, cam in observations:
        T = cam.cam_from_world(pose)
        P = np.hstack([T.R, T.t[:, None]])
        x = cam.K_inv @ np.array([uv[0], uv[1], 1.0])
        x = x / x[2]
        rows.append(x[0] * P[2] - P[0])
        rows.append(x[1] * P[2] - P[1])
        centers.append(-T.R.T @ T.t)
    centers = np.array(centers)
    spread = np.max(np.linalg.norm(centers - centers[0], axis=1))
    if spread <= 1e-9 * max(1.0, np.max(np.linalg.norm(centers, axis=1))):
        raise DegenerateError("all camera centres coincide")
    A = np.array(rows)
    _, s, Vt = np.linalg.svd(A)
    if s[-2] < 1e-8 * s[0]:
        raise DegenerateError("rays are parallel or nearly so")
    X = Vt[-1]
    if abs(X[3]) < 1e-12 * np.linalg.norm(X[:3]):
        raise DegenerateError("triangulated point at infinity")
    return X[:3] / X[3]


@dataclass(frozen=True)
class Calibration:
    """Stereo rig plus the LiDAR extrinsic (LiDAR frame w.r.t. the left camera)."""

    left: CameraModel
    right: CameraModel
    extrinsic: RigidTransform = RigidTransform()

    def __post_init__(self):
        if not np.allclose(self.left.cam_from_station.matrix, np.eye(4)):
            raise GeometryError("left camera defines the station frame; its transform must be identity")

    def camera(self, side):
        return self.left if int(side) == 0 else self.right

    @property
    def K(self):
        return np.stack([self.left.K, self.right.K])

    @property
    def K_inv(self):
        return np.linalg.inv(self.K)

    @property
    def R_cs(self):
        return np.stack([self.left.cam_from_station.R, self.right.cam_from_station.R])

    @property
    def t_cs(self):
        return np.stack([self.left.cam_from_station.t, self.right.cam_from_station.t])

    def with_extrinsic(self, T):
        return Calibration(self.left, self.right, T)


def normalize_pixels(uv, K_inv):
    """Pixels ``(..., 2)`` to normalised image coordinates with per-row inverse intrinsics."""
    uv = np.asarray(uv, dtype=np.float64)
    h = np.concatenate([uv, np.ones(uv.shape[:-1] + (1,))], axis=-1)
    x = np.einsum("...ij,...j->...i", K_inv, h)
    return x[..., :2] / x[..., 2:3]


def triangulate_dlt_batch(xn, P, mask):
    """Batched DLT in normalised coordinates.

    ``xn`` is ``(n, V, 2)``, ``P`` the camera-from-world ``[R|t]`` matrices
    ``(n, V, 3, 4)`` or ``(V, 3, 4)``, ``mask`` ``(n, V)`` marks present views.
    Returns ``(points (n, 3), ok (n,))``.
    """
    xn = np.asarray(xn, dtype=np.float64)
    n, V = xn.shape[:2]
    P = np.broadcast_to(P, (n, V, 3, 4))
    w = np.asarray(mask, dtype=np.float64)[..., None]
    r1 = (xn[..., 0:1] * P[..., 2, :] - P[..., 0, :]) * w
    r2 = (xn[..., 1:2] * P[..., 2, :] - P[..., 1, :]) * w
    A = np.concatenate([r1, r2], axis=1)
    _, s, Vt = np.linalg.svd(A)
    X = Vt[:, -1, :]
    ok = (s[:, -2] >= 1e-8 * s[:, 0]) & (np.abs(X[:, 3]) > 1e-12 * np.linalg.norm(X[:, :3], axis=1))
    with np.errstate(divide="ignore", invalid="ignore"):
        pts = X[:, :3] / X[:, 3:4]
    ok &= np.asarray(mask).sum(axis=1) >= 2
    return pts, ok
