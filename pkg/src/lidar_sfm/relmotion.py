"""Relative motion between station pairs from 3-view and 4-view shared tracks.

Images of a pair ``(i, j)`` are labelled ``i`` = left of i, ``j`` = right of i,
``k`` = left of j, ``l`` = right of j. A track seen by three of the four images
gives a P3P problem against the station that sees it once; a track seen by all
four gives a 3D-3D registration between the two stereo triangulations.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .geom import (
    Calibration,
    DegenerateError,
    RigidTransform,
    normalize_pixels,
    triangulate_dlt_batch,
)
from .residuals import camera_term
from .solver import PoseParams, SolverOptions, VectorParams, minimize

log = logging.getLogger(__name__)

FOUR_VIEW = "i-j-k-l"
THREE_VIEW_CASES = ("i-j-k", "i-j-l", "i-k-l", "j-k-l")
CASES = THREE_VIEW_CASES + (FOUR_VIEW,)
_MASKS = {
    (True, True, True, False): "i-j-k",
    (True, True, False, True): "i-j-l",
    (True, False, True, True): "i-k-l",
    (False, True, True, True): "j-k-l",
    (True, True, True, True): FOUR_VIEW,
}
# stereo station (0 = i, 1 = j) and the (station, side) of the single image
_THREE_VIEW_LAYOUT = {
    "i-j-k": (0, (1, 0)),
    "i-j-l": (0, (1, 1)),
    "i-k-l": (1, (0, 0)),
    "j-k-l": (1, (0, 1)),
}
VALIDATION_STATES = ("untested", "grid-pass", "grid-fail", "sr-pass", "sr-fail")


class EdgeRejected(Exception):
    """Not enough geometric support to create an edge."""


@dataclass
class Station:
    station_id: int
    cloud: np.ndarray | None = None
    pose: RigidTransform | None = None


@dataclass
class MotionEdge:
    """Relative transform ``T_ij`` mapping station-j coordinates into station i."""

    i: int
    j: int
    transform: RigidTransform
    case: str
    support: int
    state: str = "untested"
    passed: int = 0
    involved: int = 0
    ratios: tuple | None = None
    flags: list = field(default_factory=list)

    @property
    def key(self):
        return (self.i, self.j)

    @property
    def success_rate(self):
        return self.passed / self.involved if self.involved else None

    def reversed(self):
        return MotionEdge(self.j, self.i, self.transform.inverse(), self.case, self.support, self.state,
                          self.passed, self.involved, self.ratios, list(self.flags))


@dataclass
class RelposeConfig:
    allow_3view: bool = True
    threshold_px: float = 4.0
    threshold_m: float = 0.05
    iterations: int = 256
    min_support: int = 15
    refine: bool = True
    seed: int = 0


# ---------------------------------------------------------------------------
# shared-view bookkeeping


def pair_index(tracks):
    """Map ``(i, j)`` with ``i < j`` to the indices of tracks seen by both stations."""
    out = {}
    for t, tr in enumerate(tracks):
        st = np.unique(tr.stations)
        for a in range(len(st)):
            for b in range(a + 1, len(st)):
                out.setdefault((int(st[a]), int(st[b])), []).append(t)
    return out


def shared_observations(tracks, i, j, indices=None):
    """Pixels ``(n, 4, 2)`` and mask ``(n, 4)`` over images (left_i, right_i, left_j, right_j)."""
    if indices is None:
        indices = [t for t, tr in enumerate(tracks) if np.any(tr.stations == i) and np.any(tr.stations == j)]
    n = len(indices)
    uv = np.full((n, 4, 2), np.nan)
    mask = np.zeros((n, 4), dtype=bool)
    for r, t in enumerate(indices):
        tr = tracks[t]
        for s, sd, px in zip(tr.stations, tr.sides, tr.pixels):
            if s == i:
                c = sd
            elif s == j:
                c = 2 + sd
            else:
                continue
            uv[r, c] = px
            mask[r, c] = True
    return uv, mask, np.asarray(indices, dtype=np.int64)


def case_labels(mask):
    """Fig. 4 case tag for each row of a 4-image mask; ``None`` for 2-view rows."""
    return [_MASKS.get(tuple(bool(b) for b in row)) for row in mask]


def classify_shared_views(tracks, i, j, allow_3view=True):
    """Per-case counts and the chosen estimation case (``None`` if nothing usable)."""
    _, mask, _ = shared_observations(tracks, i, j)
    labels = case_labels(mask)
    counts = {c: 0 for c in CASES}
    counts["2-view"] = 0
    for lab in labels:
        counts[lab if lab is not None else "2-view"] += 1
    return counts, choose_case(counts, allow_3view)


def choose_case(counts, allow_3view=True):
    """Most supported case; ties prefer 4-view, then lexicographic order."""
    options = [FOUR_VIEW] + (list(THREE_VIEW_CASES) if allow_3view else [])
    best = min(options, key=lambda c: (-counts[c], c != FOUR_VIEW, c))
    return best if counts[best] > 0 else None


# ---------------------------------------------------------------------------
# minimal solvers


def rigid_align(src, dst):
    """Least-squares ``R, t`` with ``dst ~ R src + t``; batched over leading axes.

    Also returns the singular values of the source cross-covariance, which
    expose rank deficiency (collinear samples).
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    ms = src.mean(axis=-2, keepdims=True)
    md = dst.mean(axis=-2, keepdims=True)
    H = np.swapaxes(src - ms, -1, -2) @ (dst - md)
    U, S, Vt = np.linalg.svd(H)
    V = np.swapaxes(Vt, -1, -2)
    d = np.sign(np.linalg.det(V @ np.swapaxes(U, -1, -2)))
    d = np.where(d == 0, 1.0, d)
    D = np.zeros(H.shape)
    D[..., 0, 0] = 1.0
    D[..., 1, 1] = 1.0
    D[..., 2, 2] = d
    R = V @ D @ np.swapaxes(U, -1, -2)
    t = md[..., 0, :] - np.einsum("...ij,...j->...i", R, ms[..., 0, :])
    return R, t, S


def p3p_grunert(X, f):
    """Grunert's P3P, batched.

    ``X`` world points ``(s, 3, 3)``, ``f`` unit bearings ``(s, 3, 3)``.
    Returns camera-from-world ``R (s, 4, 3, 3)``, ``t (s, 4, 3)`` and a validity
    mask ``(s, 4)``; up to four real solutions per sample.
    """
    X = np.asarray(X, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    s = len(X)
    a2 = np.sum((X[:, 1] - X[:, 2]) ** 2, axis=1)
    b2 = np.sum((X[:, 0] - X[:, 2]) ** 2, axis=1)
    c2 = np.sum((X[:, 0] - X[:, 1]) ** 2, axis=1)
    ca = np.sum(f[:, 1] * f[:, 2], axis=1)
    cb = np.sum(f[:, 0] * f[:, 2], axis=1)
    cg = np.sum(f[:, 0] * f[:, 1], axis=1)
    ok = (b2 > 1e-12) & (a2 > 1e-12) & (c2 > 1e-12)
    b2s = np.where(ok, b2, 1.0)
    q1 = (a2 - c2) / b2s
    q2 = (a2 + c2) / b2s
    A4 = (q1 - 1) ** 2 - 4 * c2 / b2s * ca**2
    A3 = 4 * (q1 * (1 - q1) * cb - (1 - q2) * ca * cg + 2 * c2 / b2s * ca**2 * cb)
    A2 = 2 * (q1**2 - 1 + 2 * q1**2 * cb**2 + 2 * (b2 - c2) / b2s * ca**2
              - 4 * q2 * ca * cb * cg + 2 * (b2 - a2) / b2s * cg**2)
    A1 = 4 * (-q1 * (1 + q1) * cb + 2 * a2 / b2s * cg**2 * cb - (1 - q2) * ca * cg)
    A0 = (1 + q1) ** 2 - 4 * a2 / b2s * cg**2
    ok &= np.abs(A4) > 1e-14
    A4s = np.where(ok, A4, 1.0)
    C = np.zeros((s, 4, 4))
    C[:, 0, 0] = -A3 / A4s
    C[:, 0, 1] = -A2 / A4s
    C[:, 0, 2] = -A1 / A4s
    C[:, 0, 3] = -A0 / A4s
    C[:, 1, 0] = C[:, 2, 1] = C[:, 3, 2] = 1.0
    C[~ok] = np.eye(4)
    roots = np.linalg.eigvals(C)
    real = np.abs(roots.imag) <= 1e-6 * (1.0 + np.abs(roots.real))
    v = roots.real
    coef = np.stack([A4, A3, A2, A1, A0], axis=1)[:, :, None]
    for _ in range(3):
        p = ((coef[:, 0] * v + coef[:, 1]) * v + coef[:, 2]) * v * v + coef[:, 3] * v + coef[:, 4]
        dp = ((4 * coef[:, 0] * v + 3 * coef[:, 1]) * v + 2 * coef[:, 2]) * v + coef[:, 3]
        step = np.where(np.abs(dp) > 1e-300, p / np.where(dp == 0, 1.0, dp), 0.0)
        v = v - step
    den = 2 * (cg[:, None] - v * ca[:, None])
    good = real & ok[:, None] & (np.abs(den) > 1e-12) & (v > 0)
    den = np.where(good, den, 1.0)
    u = ((-1 + q1[:, None]) * v**2 - 2 * q1[:, None] * cb[:, None] * v + 1 + q1[:, None]) / den
    d1sq = c2[:, None] / (1 + u**2 - 2 * u * cg[:, None])
    good &= (u > 0) & (d1sq > 0)
    d1 = np.sqrt(np.where(good, d1sq, 1.0))
    dist = np.stack([d1, u * d1, v * d1], axis=-1)  # (s, 4, 3)
    P_cam = dist[..., None] * f[:, None, :, :]
    Xw = np.broadcast_to(X[:, None], P_cam.shape)
    R, t, _ = rigid_align(Xw, P_cam)
    good &= np.all(np.isfinite(R), axis=(-1, -2)) & np.all(np.isfinite(t), axis=-1)
    return R, t, good


def _sample_indices(rng, n, k, iterations):
    return np.argsort(rng.random((iterations, n)), axis=1)[:, :k]


def triangulate_stereo(uv_left, uv_right, calib: Calibration):
    """Triangulate stereo pairs in the station frame. Returns ``(points, ok)``."""
    n = len(uv_left)
    xn = np.stack([normalize_pixels(uv_left, calib.K_inv[0]), normalize_pixels(uv_right, calib.K_inv[1])], axis=1)
    P = np.zeros((2, 3, 4))
    P[:, :, :3] = calib.R_cs
    P[:, :, 3] = calib.t_cs
    X, ok = triangulate_dlt_batch(xn, P, np.ones((n, 2), bool))
    z_left = X[:, 2]
    z_right = (X @ calib.R_cs[1].T + calib.t_cs[1])[:, 2]
    ok &= (z_left > 0) & (z_right > 0) & np.all(np.isfinite(X), axis=1)
    return X, ok


def estimate_3view(uv, case, calib: Calibration, threshold_px=4.0, iterations=256, seed=0, min_support=15):
    """RANSAC+P3P for one 3-view case. ``uv`` is ``(n, 4, 2)`` in image order i, j, k, l.

    Returns ``(T_ij, inlier mask)``.
    """
    stereo, (single_station, single_side) = _THREE_VIEW_LAYOUT[case]
    uv = np.asarray(uv, dtype=np.float64)
    X, ok = triangulate_stereo(uv[:, 2 * stereo], uv[:, 2 * stereo + 1], calib)
    obs = uv[:, 2 * single_station + single_side]
    idx = np.nonzero(ok)[0]
    if len(idx) < 4:
        raise EdgeRejected(f"{len(idx)} usable 3-view tracks, need 4")
    Xs, u = X[idx], obs[idx]
    K = calib.K[single_side]
    f = np.column_stack([normalize_pixels(u, calib.K_inv[single_side]), np.ones(len(u))])
    f /= np.linalg.norm(f, axis=1, keepdims=True)

    rng = np.random.default_rng(seed)
    samples = _sample_indices(rng, len(idx), 3, iterations)
    R, t, good = p3p_grunert(Xs[samples], f[samples])
    R = R.reshape(-1, 3, 3)
    t = t.reshape(-1, 3)
    good = good.reshape(-1)
    best = (-1, 0.0)
    best_k = None
    best_in = None
    for s in range(0, len(R), 512):
        c = np.einsum("kij,nj->kni", R[s : s + 512], Xs) + t[s : s + 512, None, :]
        z = c[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            px = (c @ K.T)[..., :2] / z[..., None]
        err = np.linalg.norm(px - u[None], axis=2)
        inl = (z > 0) & (err <= threshold_px) & good[s : s + 512, None]
        counts = inl.sum(axis=1)
        tot = np.where(inl, err, 0.0).sum(axis=1)
        k = np.lexsort((tot, -counts))[0]
        score = (int(counts[k]), -float(tot[k]))
        if score > best:
            best, best_k, best_in = score, s + k, inl[k]
    if best_k is None or best[0] < max(min_support, 4):
        raise EdgeRejected(f"{max(best[0], 0)} P3P inliers for case {case}")
    cam_from_stereo = RigidTransform(R[best_k], t[best_k], check=False)
    single_left_from_stereo = calib.camera(single_side).cam_from_station.inverse() @ cam_from_stereo
    T_ij = single_left_from_stereo.inverse() if stereo == 0 else single_left_from_stereo
    inliers = np.zeros(len(uv), dtype=bool)
    inliers[idx[best_in]] = True
    return _orthonormalize(T_ij), inliers


def estimate_4view(uv, calib: Calibration, threshold_m=0.05, iterations=256, seed=0, min_support=15):
    """RANSAC rigid 3D-3D registration between the two stereo triangulations.

    Returns ``(T_ij, inlier mask)``.
    """
    uv = np.asarray(uv, dtype=np.float64)
    Xi, oki = triangulate_stereo(uv[:, 0], uv[:, 1], calib)
    Xj, okj = triangulate_stereo(uv[:, 2], uv[:, 3], calib)
    idx = np.nonzero(oki & okj)[0]
    if len(idx) < 3:
        raise EdgeRejected(f"{len(idx)} usable 4-view tracks, need 3")
    A, B = Xj[idx], Xi[idx]
    rng = np.random.default_rng(seed)
    samples = _sample_indices(rng, len(idx), 3, iterations)
    R, t, S = rigid_align(A[samples], B[samples])
    nondegenerate = S[:, 1] > 1e-6 * np.maximum(S[:, 0], 1e-300)
    if not np.any(nondegenerate):
        raise DegenerateError("all registration samples are collinear")
    res = np.linalg.norm(np.einsum("kij,nj->kni", R, A) + t[:, None, :] - B[None], axis=2)
    inl = (res <= threshold_m) & nondegenerate[:, None]
    counts = inl.sum(axis=1)
    tot = np.where(inl, res, 0.0).sum(axis=1)
    k = np.lexsort((tot, -counts))[0]
    best_in = inl[k]
    if best_in.sum() >= 3:
        R2, t2, S2 = rigid_align(A[best_in], B[best_in])
        if S2[1] > 1e-6 * S2[0]:
            in2 = np.linalg.norm(A @ R2.T + t2 - B, axis=1) <= threshold_m
            if in2.sum() >= best_in.sum():
                R[k], t[k], best_in = R2, t2, in2
    n_in = int(best_in.sum())
    if n_in < max(min_support, 3):
        raise EdgeRejected(f"{n_in} registration inliers")
    inliers = np.zeros(len(uv), dtype=bool)
    inliers[idx[best_in]] = True
    return _orthonormalize(RigidTransform(R[k], t[k], check=False)), inliers


def _orthonormalize(T):
    U, _, Vt = np.linalg.svd(T.R)
    R = U @ Vt
    if np.linalg.det(R) < 0:
        U[:, -1] *= -1
        R = U @ Vt
    return RigidTransform(R, T.t)


# ---------------------------------------------------------------------------
# refinement


def _pair_points(uv, mask, T_ij, calib):
    """Multi-view DLT of each row in the frame of station i."""
    poses = [RigidTransform(), T_ij]
    P = np.zeros((4, 3, 4))
    for c in range(4):
        st, side = divmod(c, 2)
        T = calib.camera(side).cam_from_world(poses[st])
        P[c, :, :3] = T.R
        P[c, :, 3] = T.t
    K_inv = np.stack([calib.K_inv[c % 2] for c in range(4)])
    xn = normalize_pixels(np.nan_to_num(uv), np.broadcast_to(K_inv, uv.shape[:2] + (3, 3)))
    return triangulate_dlt_batch(xn, P, mask)


def reprojection_rms(params, term):
    r, _ = term.evaluate(params, False)
    return float(np.sqrt(np.mean(np.sum(r * r, axis=1)))) if len(r) else 0.0


def refine_relative(T_ij, uv, mask, calib: Calibration, options: SolverOptions | None = None):
    """Bundle adjustment of ``T_ij`` and the inlier points, with station i fixed.

    Returns ``(T_ij, report)``; the initial transform is kept if the solve does
    not reduce the reprojection cost.
    """
    X, ok = _pair_points(uv, mask, T_ij, calib)
    rows = np.nonzero(ok)[0]
    obs_r, obs_c = np.nonzero(mask[rows])
    report = {"points": len(rows), "observations": len(obs_r)}
    if len(rows) == 0:
        report["flag"] = "no_points"
        return T_ij, report
    params = {
        "poses": PoseParams(np.stack([np.eye(3), T_ij.R]), np.stack([np.zeros(3), T_ij.t]), [True, False]),
        "points": VectorParams(X[rows], eliminate=True),
    }
    term = camera_term(obs_c // 2, obs_r, obs_c % 2, uv[rows][obs_r, obs_c], calib)
    res = minimize(params, [term], options or SolverOptions(max_iterations=50))
    report.update(initial_cost=res.initial_cost, final_cost=res.final_cost, termination=res.termination,
                  rms_before=reprojection_rms(params, term), rms_after=reprojection_rms(res.params, term))
    if not res.final_cost <= res.initial_cost:
        report["flag"] = "diverged"
        return T_ij, report
    P = res.params["poses"]
    return _orthonormalize(RigidTransform(P.R[1], P.t[1], check=False)), report


# ---------------------------------------------------------------------------
# all pairs


def estimate_edge(tracks, i, j, calib: Calibration, config: RelposeConfig, indices=None, seed=None):
    """Estimate one edge; raises :class:`EdgeRejected` without enough support."""
    uv, mask, _ = shared_observations(tracks, i, j, indices)
    labels = np.array([lab or "" for lab in case_labels(mask)])
    counts = {c: int(np.sum(labels == c)) for c in CASES}
    case = choose_case(counts, config.allow_3view)
    if case is None:
        raise EdgeRejected("no 3-view or 4-view tracks")
    rows = labels == case
    seed = (config.seed, i, j) if seed is None else seed
    if case == FOUR_VIEW:
        T, inl = estimate_4view(uv[rows], calib, config.threshold_m, config.iterations, seed, config.min_support)
    else:
        T, inl = estimate_3view(uv[rows], case, calib, config.threshold_px, config.iterations, seed, config.min_support)
    edge = MotionEdge(i, j, T, case, int(inl.sum()))
    if config.refine:
        sub_uv, sub_mask = uv[rows][inl], mask[rows][inl]
        T2, rep = refine_relative(T, sub_uv, sub_mask, calib)
        if "flag" in rep:
            edge.flags.append(rep["flag"])
        edge.transform = T2
    return edge


def estimate_all_edges(tracks, calib: Calibration, config: RelposeConfig | None = None, threads=1):
    """Edges for every station pair with usable shared tracks, ordered by ``(i, j)``.

    Returns ``(edges, report)``.
    """
    config = config or RelposeConfig()
    index = pair_index(tracks)
    pairs = sorted(index)

    def work(pair):
        i, j = pair
        try:
            return estimate_edge(tracks, i, j, calib, config, index[pair]), None
        except (EdgeRejected, DegenerateError) as exc:
            return None, str(exc)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(work, pairs))
    else:
        results = [work(p) for p in pairs]
    edges = [e for e, _ in results if e is not None]
    rejected = [{"pair": list(p), "reason": r} for p, (_, r) in zip(pairs, results) if r is not None]
    cases = {c: sum(e.case == c for e in edges) for c in CASES}
    log.info("relpose: %d pairs, %d edges, %d rejected", len(pairs), len(edges), len(rejected))
    return edges, {"pairs": len(pairs), "edges": len(edges), "cases": cases, "rejected": rejected}
