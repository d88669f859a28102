import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from lidar_sfm.geom import (
    CameraModel,
    CheiralityError,
    DegenerateError,
    GeometryError,
    RigidTransform,
    SingularityError,
    look_at,
    project,
    se3_exp,
    se3_left_jacobian_inv,
    se3_log,
    se3_right_jacobian_inv,
    so3_exp,
    so3_log,
    triangulate_dlt,
)

from conftest import central_diff, random_transform

vec3 = st.lists(st.floats(-3.0, 3.0), min_size=3, max_size=3).map(np.array)


def test_compose_identity_and_inverse(rng):
    T = random_transform(rng)
    assert RigidTransform() @ T == T
    I = T @ T.inverse()
    assert np.allclose(I.R, np.eye(3), atol=1e-12) and np.allclose(I.t, 0, atol=1e-12)


def test_compose_matches_homogeneous_product(rng):
    a, b = random_transform(rng), random_transform(rng)
    assert np.allclose((a @ b).matrix, a.matrix @ b.matrix, atol=1e-12)


def test_log_special_cases():
    assert np.allclose(RigidTransform().log(), 0)
    assert np.allclose(RigidTransform(np.eye(3), [0, 0, 1]).log(), [0, 0, 0, 0, 0, 1])
    Rz = np.array([[0.0, -1, 0], [1, 0, 0], [0, 0, 1]])
    xi = RigidTransform(Rz, [0, 0, 0]).log()
    # axis-angle from the trace: cos(theta) = (tr R - 1) / 2
    assert np.linalg.norm(xi[:3]) == pytest.approx(np.arccos((np.trace(Rz) - 1) / 2), abs=1e-12)


def test_rejects_non_rotation():
    with pytest.raises(GeometryError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(GeometryError):
        RigidTransform(2 * np.eye(3), np.zeros(3))


@settings(max_examples=200, deadline=None)
@given(vec3)
def test_so3_exp_log_roundtrip(w):
    if np.linalg.norm(w) >= np.pi - 1e-6:
        w = w * (np.pi - 1e-3) / np.linalg.norm(w)
    R = so3_exp(w)
    assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.allclose(so3_log(R), w, atol=1e-9)
    assert np.allclose(R, Rotation.from_rotvec(w).as_matrix(), atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(vec3, vec3)
def test_se3_exp_log_roundtrip(w, v):
    if np.linalg.norm(w) >= np.pi - 1e-6:
        w = w * (np.pi - 1e-3) / np.linalg.norm(w)
    xi = np.concatenate([w, v])
    R, t = se3_exp(xi)
    assert np.allclose(se3_log(R, t), xi, atol=1e-9)


def test_so3_log_near_pi():
    R = so3_exp([0.0, 0.0, np.pi - 1e-9])
    with pytest.raises(SingularityError):
        so3_log(R)
    # non-strict mode still returns a rotation vector of the right magnitude
    assert np.linalg.norm(so3_log(R, strict=False)) == pytest.approx(np.pi, abs=1e-6)


def test_se3_jacobians_match_finite_differences(rng):
    for _ in range(20):
        xi = rng.normal(scale=0.7, size=6)
        R0, t0 = se3_exp(xi)

        def right(d):
            dR, dt = se3_exp(d)
            return se3_log(R0 @ dR, t0 + R0 @ dt)

        def left(d):
            dR, dt = se3_exp(d)
            return se3_log(dR @ R0, dR @ t0 + dt)

        assert np.allclose(central_diff(right, 6), se3_right_jacobian_inv(xi), atol=1e-7)
        assert np.allclose(central_diff(left, 6), se3_left_jacobian_inv(xi), atol=1e-7)


def test_quaternion_roundtrip(rng):
    T = random_transform(rng)
    back = RigidTransform.from_quaternion(T.quaternion, T.t)
    assert np.allclose(back.R, T.R, atol=1e-12) and np.allclose(back.t, T.t)


K = np.array([[500.0, 0, 320], [0, 500, 240], [0, 0, 1]])


def test_projection_pinhole():
    cam = CameraModel(K, width=640, height=480)
    assert np.allclose(project([0, 0, 1.0], RigidTransform(), cam), [320, 240])
    x, y, z = 0.3, -0.2, 2.5
    assert np.allclose(project([x, y, z], RigidTransform(), cam), [320 + 500 * x / z, 240 + 500 * y / z])
    with pytest.raises(CheiralityError):
        project([0, 0, -1.0], RigidTransform(), cam)


def test_look_at_axes():
    T = look_at([0, 0, 0], [5, 0, 0])
    assert np.allclose(T.R[:, 2], [1, 0, 0])
    assert np.allclose(T.R[:, 1], [0, 0, -1])  # y down


@pytest.mark.parametrize("views", [2, 4])
def test_triangulate_dlt_noiseless(views, rng):
    cam = CameraModel(K, width=640, height=480)
    X = np.array([0.4, -0.3, 6.0])
    obs = []
    for k in range(views):
        pose = look_at([k * 0.7 - 1.0, 0.2 * k, 0.0], X, up=(0, -1, 0))
        obs.append((project(X, pose, cam), pose, cam))
    assert np.allclose(triangulate_dlt(obs), X, atol=1e-8)


def test_triangulate_dlt_coincident_centres():
    cam = CameraModel(K)
    pose = RigidTransform()
    X = np.array([0.1, 0.1, 4.0])
    uv = project(X, pose, cam)
    with pytest.raises(DegenerateError):
        triangulate_dlt([(uv, pose, cam), (uv, pose, cam)])


@pytest.mark.parametrize("angle", [1e-7, 1e-5, 9.5e-5, 1e-3, 9e-3, 1.1e-2])
def test_log_is_smooth_at_small_angles(angle, rng):
    # closed forms cancel catastrophically here; the log must stay differentiable
    axis = rng.normal(size=3)
    w = axis / np.linalg.norm(axis) * angle
    t = rng.normal(size=3)
    R = so3_exp(w)
    xi = se3_log(R, t)
    R2, t2 = se3_exp(xi)
    assert np.allclose(R2, R, atol=1e-15) and np.allclose(t2, t, atol=1e-14)
    h = 1e-6
    d = np.zeros(6)
    d[0] = h
    num = (se3_log(*se3_exp(xi + d)) - se3_log(*se3_exp(xi - d))) / (2 * h)
    assert np.allclose(num, d / h, atol=1e-7)
