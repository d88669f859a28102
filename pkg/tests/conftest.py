import numpy as np
import pytest

from lidar_sfm.geom import RigidTransform, se3_exp, so3_exp


def random_transform(rng, angle=np.pi, scale=1.0):
    w = rng.normal(size=3)
    w *= rng.uniform(0, angle) / np.linalg.norm(w)
    return RigidTransform(so3_exp(w), rng.normal(scale=scale, size=3))


def perturb(R, t, delta):
    """Right perturbation ``(R, t) Exp(delta)`` on a single pose."""
    dR, dt = se3_exp(np.asarray(delta)[None])
    return R @ dR[0], t + R @ dt[0]


def central_diff(f, dim, h=1e-6):
    """Columns ``(f(+h e_k) - f(-h e_k)) / 2h`` for a function of a tangent vector."""
    cols = []
    for k in range(dim):
        d = np.zeros(dim)
        d[k] = h
        cols.append((f(d) - f(-d)) / (2 * h))
    return np.stack(cols, axis=-1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
