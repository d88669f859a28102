"""Slow, independent reference implementations used as test oracles."""
import itertools

import numpy as np

from lidar_sfm.correspondence import Track
from lidar_sfm.geom import RigidTransform, so3_exp


def projection_matrix(pose, calib, side):
    """3x4 ``K [R | t]`` mapping world points into image ``side`` of a station at ``pose``."""
    M = np.eye(4)
    M[:3, :3], M[:3, 3] = calib.R_cs[side], calib.t_cs[side]
    W = np.linalg.inv(pose.matrix)
    return calib.K[side] @ (M @ W)[:3]


def dlt(P1, P2, x1, x2):
    A = np.stack([x1[0] * P1[2] - P1[0], x1[1] * P1[2] - P1[1], x2[0] * P2[2] - P2[0], x2[1] * P2[2] - P2[1]])
    _, _, Vt = np.linalg.svd(A)
    h = Vt[-1]
    return h[:3] / h[3]


def exhaustive_triangulate(track, poses, calib, thresh=4.0):
    """Inlier mask of the best pair hypothesis over all pairs: most inliers, then lowest RMS, then first pair."""
    Ps = [projection_matrix(poses[s], calib, int(c)) for s, c in zip(track.stations, track.sides)]
    best = None
    for a, b in itertools.combinations(range(len(track)), 2):
        X = dlt(Ps[a], Ps[b], track.pixels[a], track.pixels[b])
        h = np.array([P @ np.append(X, 1.0) for P in Ps])
        err = np.linalg.norm(h[:, :2] / h[:, 2:] - track.pixels, axis=1)
        inl = (err <= thresh) & (h[:, 2] > 0)
        n = int(inl.sum())
        rms = np.sqrt(np.sum(err[inl] ** 2) / max(n, 1))
        key = (-n, rms)
        if best is None or key < best[0]:
            best = (key, inl)
    return best[1]


def random_track(rng, calib, track_id, n_views=(3, 8), n_bad=(0, 3), pixel_noise=0.3):
    """A point seen by stations on a short arc, with some views replaced by far-off pixels."""
    n = int(rng.integers(*n_views, endpoint=True))
    X = rng.uniform([-2, -1, 6], [2, 1, 10])
    poses, stations, sides, pix = {}, [], [], []
    for s in range(n):
        poses[s] = RigidTransform(so3_exp([0, rng.normal(scale=0.05), 0]), [0.5 * s - n / 4, rng.normal(scale=0.1), 0])
        side = int(rng.integers(2))
        h = projection_matrix(poses[s], calib, side) @ np.append(X, 1.0)
        stations.append(s)
        sides.append(side)
        pix.append(h[:2] / h[2] + rng.normal(scale=pixel_noise, size=2))
    pix = np.array(pix)
    bad = rng.choice(n, min(int(rng.integers(*n_bad, endpoint=True)), n - 3), replace=False)
    pix[bad] += rng.uniform(15, 60, (len(bad), 2)) * rng.choice([-1, 1], (len(bad), 2))
    track = Track(track_id, stations, sides, np.arange(n), pix)
    return track, poses, X, np.isin(np.arange(n), bad)
