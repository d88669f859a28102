"""Joint refinement of poses, structure and the camera-LiDAR extrinsic.

Three observation sets feed one robust least-squares cost:

* camera: reprojection of triangulated track points,
* LiDAR: key points of one station against local patches of another,
* joint: triangulated points against local patches of their observing stations.

Patches are fixed during each solve and re-associated between solves.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geom import Calibration, RigidTransform
from .residuals import camera_residual, camera_term, joint_residual, joint_term, lidar_residual, lidar_term
from .solver import PoseParams, SolverOptions, VectorParams, evaluate_cost, minimize

log = logging.getLogger(__name__)


class ConfigurationError(RuntimeError):
    pass


@dataclass
class JointConfig:
    n_keypoints: int = 5000
    k_neighbors: int = 8
    max_dist: float = 0.5
    planarity: float = 3.0
    # patch thickness (RMS distance of the neighbours to the fitted plane)
    max_patch_rms: float = 0.05
    # key-point normal vs. target patch normal; None disables the gate
    max_normal_angle_deg: float | None = 30.0
    # "centroid" or "nearest"; a single raw point carries the full range noise
    patch_anchor: str = "centroid"
    range_m: float = 5.0
    lambda_c: float = 1.0
    lambda_l: float | None = None
    lambda_j: float | None = None
    # per-observation cost floors (px, m) for balancing; noiseless data would otherwise zero the weights
    balance_floor_px: float = 1.0
    balance_floor_m: float = 0.01
    huber_c: float = 4.0
    huber_l: float = 0.1
    huber_j: float = 0.1
    thresh_c: float = 4.0
    thresh_l: float = 0.1
    thresh_j: float = 0.1
    min_views: int = 3
    max_iterations: int = 6
    tol: float = 1e-4
    solver_iterations: int = 50
    use_lidar: bool = True
    use_joint: bool = True
    refine_extrinsic: bool = True
    seed: int = 0
    threads: int = 1


# ---------------------------------------------------------------------------
# patches


@dataclass
class LocalPatch:
    y: np.ndarray
    n: np.ndarray
    planarity: float


@dataclass
class CloudIndex:
    """A station's cloud (LiDAR frame) with its kd-tree."""

    points: np.ndarray
    tree: cKDTree = field(init=False)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.tree = cKDTree(self.points)


def sample_keypoints(cloud, n_samples=5000, seed=0):
    """Uniform sample without replacement; the whole cloud if it is smaller."""
    cloud = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    if len(cloud) <= n_samples:
        return cloud.copy()
    rng = np.random.default_rng(seed)
    return cloud[np.sort(rng.choice(len(cloud), n_samples, replace=False))]


def fit_patches(index: CloudIndex, queries, k=8, max_dist=0.5, planarity=3.0, max_rms=np.inf, workers=1,
                anchor="centroid"):
    """Batched patch fit. Returns ``(y, n, score, ok)``.

    The nearest cloud point to each query (within ``max_dist``) selects the
    patch; ``n`` is the least-variance direction of that point's ``k``
    neighbours, oriented toward the sensor origin. ``y`` is the neighbours'
    centroid, or the nearest point itself with ``anchor="nearest"``.
    ``ok`` is false where any gate fails.
    """
    if anchor not in ("centroid", "nearest"):
        raise ValueError(f"unknown patch anchor {anchor!r}")
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    m = len(q)
    y = np.zeros((m, 3))
    nrm = np.zeros((m, 3))
    score = np.zeros(m)
    ok = np.zeros(m, dtype=bool)
    if m == 0 or len(index.points) < k:
        return y, nrm, score, ok
    d, nn = index.tree.query(q, k=1, distance_upper_bound=max_dist, workers=workers)
    hit = np.isfinite(d)
    if not hit.any():
        return y, nrm, score, ok
    hidx = np.nonzero(hit)[0]
    y[hidx] = index.points[nn[hidx]]
    dk, nk = index.tree.query(y[hidx], k=k, distance_upper_bound=max_dist, workers=workers)
    full = np.all(np.isfinite(dk), axis=1)
    hidx, nk = hidx[full], nk[full]
    nb = index.points[nk]
    c = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("mki,mkj->mij", c, c) / k
    w, V = np.linalg.eigh(cov)
    n = V[:, :, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(w[:, 0] > 0, w[:, 1] / w[:, 0], np.inf)
    rms = np.sqrt(np.maximum(w[:, 0], 0.0))
    flip = np.einsum("mi,mi->m", n, -y[hidx]) < 0
    n[flip] *= -1
    nrm[hidx] = n
    if anchor == "centroid":
        y[hidx] = nb.mean(axis=1)
    score[hidx] = s
    ok[hidx] = (s >= planarity) & (rms <= max_rms) & (w[:, 1] > 0)
    return y, nrm, score, ok


def fit_patch(index: CloudIndex, query, k=8, max_dist=0.5, planarity=3.0, max_rms=np.inf, anchor="centroid"):
    """Single-query version of :func:`fit_patches`; ``None`` when a gate fails."""
    y, n, s, ok = fit_patches(index, np.asarray(query)[None], k, max_dist, planarity, max_rms, anchor=anchor)
    return LocalPatch(y[0], n[0], float(s[0])) if ok[0] else None


# ---------------------------------------------------------------------------
# observation sets


@dataclass
class CameraObs:
    station: np.ndarray
    point: np.ndarray
    side: np.ndarray
    uv: np.ndarray
    track_obs: np.ndarray  # (track index, observation index) pairs

    def __len__(self):
        return len(self.station)


@dataclass
class LidarObs:
    src: np.ndarray
    dst: np.ndarray
    p: np.ndarray
    y: np.ndarray
    n: np.ndarray

    def __len__(self):
        return len(self.src)

    def subset(self, keep):
        return LidarObs(self.src[keep], self.dst[keep], self.p[keep], self.y[keep], self.n[keep])

    @classmethod
    def empty(cls):
        z = np.zeros((0, 3))
        return cls(np.zeros(0, np.int64), np.zeros(0, np.int64), z, z, z)


@dataclass
class JointObs:
    station: np.ndarray
    point: np.ndarray
    y: np.ndarray
    n: np.ndarray

    def __len__(self):
        return len(self.station)

    def subset(self, keep):
        return JointObs(self.station[keep], self.point[keep], self.y[keep], self.n[keep])

    @classmethod
    def empty(cls):
        z = np.zeros((0, 3))
        return cls(np.zeros(0, np.int64), np.zeros(0, np.int64), z, z)


def camera_observations(tracks, station_pos):
    """Inlier observations of every track; ``station_pos`` maps station id to pose index."""
    st, pt, sd, uv, to = [], [], [], [], []
    for k, tr in enumerate(tracks):
        sel = np.nonzero(tr.inliers if tr.inliers is not None else np.ones(len(tr), bool))[0]
        for o in sel:
            st.append(station_pos[int(tr.stations[o])])
            pt.append(k)
            sd.append(int(tr.sides[o]))
            uv.append(tr.pixels[o])
            to.append((k, o))
    return CameraObs(
        np.array(st, np.int64), np.array(pt, np.int64), np.array(sd, np.int64),
        np.array(uv, np.float64).reshape(-1, 2), np.array(to, np.int64).reshape(-1, 2),
    )


def _keypoint_normals(index, keypoints, cfg):
    _, n, _, ok = fit_patches(index, keypoints, cfg.k_neighbors, cfg.max_dist, cfg.planarity,
                              cfg.max_patch_rms, cfg.threads)
    return n, ok


def associate(R, t, T_e: RigidTransform, indices, keypoints, kp_normals, points, point_stations, cfg: JointConfig):
    """Build the LiDAR and joint observation sets at the current estimate.

    ``R, t`` are stacked poses; ``indices`` / ``keypoints`` / ``kp_normals`` are
    lists aligned with them. ``point_stations[k]`` lists pose indices observing
    structure point ``k``.
    """
    nst = len(R)
    Re, te = T_e.R, T_e.t
    lid = []
    if cfg.use_lidar:
        centers = t
        cos_gate = None if cfg.max_normal_angle_deg is None else np.cos(np.radians(cfg.max_normal_angle_deg))
        for i in range(nst):
            if keypoints[i] is None or len(keypoints[i]) == 0:
                continue
            s = keypoints[i] @ Re.T + te
            w = s @ R[i].T + t[i]
            for j in range(nst):
                if j == i or indices[j] is None:
                    continue
                if np.linalg.norm(centers[i] - centers[j]) > cfg.range_m:
                    continue
                cj = (w - t[j]) @ R[j]
                q = (cj - te) @ Re
                y, n, _, ok = fit_patches(indices[j], q, cfg.k_neighbors, cfg.max_dist, cfg.planarity,
                                          cfg.max_patch_rms, cfg.threads, cfg.patch_anchor)
                if cos_gate is not None:
                    # key-point normal rotated into the target LiDAR frame
                    M = Re.T @ R[j].T @ R[i] @ Re
                    nk = kp_normals[i][0] @ M.T
                    ok &= kp_normals[i][1] & (np.abs(np.einsum("mi,mi->m", nk, n)) >= cos_gate)
                if ok.any():
                    sel = np.nonzero(ok)[0]
                    lid.append((np.full(len(sel), i), np.full(len(sel), j), keypoints[i][sel], y[sel], n[sel]))
    L = LidarObs(*(np.concatenate(c) for c in zip(*lid))) if lid else LidarObs.empty()
    L.src = L.src.astype(np.int64)
    L.dst = L.dst.astype(np.int64)

    jnt = []
    if cfg.use_joint and len(points):
        by_station = {}
        for k, sts in enumerate(point_stations):
            for s in sts:
                by_station.setdefault(int(s), []).append(k)
        for i in sorted(by_station):
            if indices[i] is None:
                continue
            pk = np.array(by_station[i], dtype=np.int64)
            c = (points[pk] - t[i]) @ R[i]
            q = (c - te) @ Re
            y, n, _, ok = fit_patches(indices[i], q, cfg.k_neighbors, cfg.max_dist, cfg.planarity,
                                      cfg.max_patch_rms, cfg.threads, cfg.patch_anchor)
            if ok.any():
                sel = np.nonzero(ok)[0]
                jnt.append((np.full(len(sel), i), pk[sel], y[sel], n[sel]))
    J = JointObs(*(np.concatenate(c) for c in zip(*jnt))) if jnt else JointObs.empty()
    J.station = J.station.astype(np.int64)
    J.point = J.point.astype(np.int64)
    return L, J


# ---------------------------------------------------------------------------
# optimisation


def build_terms(C: CameraObs, L: LidarObs, J: JointObs, calib: Calibration, weights, cfg: JointConfig):
    terms = [camera_term(C.station, C.point, C.side, C.uv, calib, cfg.huber_c, weights[0])]
    if len(L):
        terms.append(lidar_term(L.src, L.dst, L.p, L.y, L.n, cfg.huber_l, weights[1]))
    if len(J):
        terms.append(joint_term(J.station, J.point, J.y, J.n, cfg.huber_j, weights[2]))
    return terms


def joint_optimize(params, C, L, J, calib, weights, cfg: JointConfig):
    """One robust solve of the weighted three-term cost. Returns the solver result."""
    if len(C) == 0:
        raise ConfigurationError("camera observation set is empty")
    params = dict(params)
    E = params["extrinsic"]
    fixed_e = not cfg.refine_extrinsic or (len(L) == 0 and len(J) == 0)
    params["extrinsic"] = PoseParams(E.R, E.t, [fixed_e])
    terms = build_terms(C, L, J, calib, weights, cfg)
    res = minimize(params, terms, SolverOptions(max_iterations=cfg.solver_iterations))
    res.params["extrinsic"] = PoseParams(res.params["extrinsic"].R, res.params["extrinsic"].t, [False])
    return res


def residuals_at(params, C, L, J, calib):
    """Raw residual magnitudes: camera pixel norms, LiDAR and joint signed distances."""
    P, E, X = params["poses"], params["extrinsic"], params["points"].values
    ec, _, _, z = camera_residual(P.R[C.station], P.t[C.station], X[C.point],
                                  calib.K[C.side], calib.R_cs[C.side], calib.t_cs[C.side], C.uv)
    cam = np.where(z > 0, np.linalg.norm(ec, axis=1), np.inf)
    lid = lidar_residual(P.R[L.src], P.t[L.src], P.R[L.dst], P.t[L.dst], E.R[0], E.t[0], L.p, L.y, L.n)[0][:, 0] \
        if len(L) else np.zeros(0)
    jnt = joint_residual(P.R[J.station], P.t[J.station], E.R[0], E.t[0], X[J.point], J.y, J.n)[0][:, 0] \
        if len(J) else np.zeros(0)
    return cam, lid, jnt


def filter_observations(C: CameraObs, L: LidarObs, J: JointObs, residuals, cfg: JointConfig, n_points):
    """Drop observations over threshold and tracks left with too few camera views.

    Returns ``(C, L, J, alive_points)``.
    """
    cam, lid, jnt = residuals
    keep_c = cam <= cfg.thresh_c
    counts = np.bincount(C.point[keep_c], minlength=n_points)
    alive = counts >= cfg.min_views
    keep_c &= alive[C.point]
    if not keep_c.any():
        raise ConfigurationError("every camera observation was filtered out")
    C2 = CameraObs(C.station[keep_c], C.point[keep_c], C.side[keep_c], C.uv[keep_c], C.track_obs[keep_c])
    L2 = L.subset(np.abs(lid) <= cfg.thresh_l) if len(L) else L
    J2 = J.subset((np.abs(jnt) <= cfg.thresh_j) & alive[J.point]) if len(J) else J
    return C2, L2, J2, alive


def _balance(params, C, L, J, calib, cfg):
    """Weights so the LiDAR and joint robust costs start level with the camera cost.

    Each cost is floored at its observation count times the squared nominal
    noise, so a term that is already exact is balanced as if it were at the
    noise level instead of getting a zero or unbounded weight.
    """
    unit = build_terms(C, L, J, calib, (1.0, 1.0, 1.0), cfg)
    _, costs = evaluate_cost(params, unit)
    cc = cfg.lambda_c * max(costs.get("camera", 0.0), len(C) * cfg.balance_floor_px**2)
    wl, wj = cfg.lambda_l, cfg.lambda_j
    if wl is None:
        cl = max(costs.get("lidar", 0.0), len(L) * cfg.balance_floor_m**2)
        wl = cc / cl if cl > 0 and cc > 0 else 1.0
    if wj is None:
        cj = max(costs.get("joint", 0.0), len(J) * cfg.balance_floor_m**2)
        wj = cc / cj if cj > 0 and cc > 0 else 1.0
    return (cfg.lambda_c, float(wl), float(wj))


@dataclass
class RefineResult:
    poses: dict
    tracks: list
    extrinsic: RigidTransform
    report: dict


def alternate(poses, tracks, clouds, calib: Calibration, config: JointConfig | None = None, gauge=None):
    """Associate, solve, filter, solve; repeated until the cost settles.

    ``poses`` maps station id to world-from-station; ``tracks`` carry points and
    inlier masks; ``clouds`` map station id to LiDAR-frame points.
    """
    cfg = config or JointConfig()
    ids = sorted(poses)
    pos = {s: k for k, s in enumerate(ids)}
    gauge = ids[0] if gauge is None else gauge
    tracks = [t for t in tracks if t.point is not None]
    R0 = np.stack([poses[s].R for s in ids])
    t0 = np.stack([poses[s].t for s in ids])
    X0 = np.stack([t.point for t in tracks]) if tracks else np.zeros((0, 3))
    params = {
        "poses": PoseParams(R0, t0, [s == gauge for s in ids]),
        "points": VectorParams(X0, eliminate=True),
        "extrinsic": PoseParams(calib.extrinsic.R[None], calib.extrinsic.t[None]),
    }
    C = camera_observations(tracks, pos)
    if len(C) == 0:
        raise ConfigurationError("no camera observations to refine")

    need_lidar = cfg.use_lidar or cfg.use_joint
    indices = [CloudIndex(clouds[s]) if need_lidar and clouds.get(s) is not None and len(clouds[s]) else None
               for s in ids]
    keypoints, kp_normals = [], []
    for k, s in enumerate(ids):
        if cfg.use_lidar and indices[k] is not None:
            kp = sample_keypoints(clouds[s], cfg.n_keypoints, (cfg.seed, int(s)))
            keypoints.append(kp)
            kp_normals.append(_keypoint_normals(indices[k], kp, cfg) if cfg.max_normal_angle_deg is not None else None)
        else:
            keypoints.append(None)
            kp_normals.append(None)

    weights = None
    history = []
    alive = np.ones(len(tracks), dtype=bool)
    converged = False
    for it in range(1, cfg.max_iterations + 1):
        T_e = RigidTransform(params["extrinsic"].R[0], params["extrinsic"].t[0], check=False)
        point_stations = [[] for _ in tracks]
        for k_pt, o in C.track_obs:
            sid = pos[int(tracks[k_pt].stations[o])]
            if sid not in point_stations[k_pt]:
                point_stations[k_pt].append(sid)
        pts = params["points"].values
        L, J = associate(params["poses"].R, params["poses"].t, T_e, indices, keypoints, kp_normals,
                         pts, point_stations, cfg)
        if weights is None:
            weights = _balance(params, C, L, J, calib, cfg)
        r1 = joint_optimize(params, C, L, J, calib, weights, cfg)
        C, L, J, alive_now = filter_observations(C, L, J, residuals_at(r1.params, C, L, J, calib), cfg, len(tracks))
        alive &= alive_now
        r1.params["points"] = VectorParams(r1.params["points"].values, ~alive, eliminate=True)
        r2 = joint_optimize(r1.params, C, L, J, calib, weights, cfg)
        # final observation sets at this iteration's starting estimate
        held = dict(params)
        held["points"] = VectorParams(params["points"].values, ~alive, eliminate=True)
        fixed_start, _ = evaluate_cost(held, build_terms(C, L, J, calib, weights, cfg))
        dpose = float(np.max(np.linalg.norm(r2.params["poses"].t - params["poses"].t, axis=1)))
        E_prev = params["extrinsic"]
        params = r2.params
        dE = RigidTransform(E_prev.R[0], E_prev.t[0], check=False).inverse() @ RigidTransform(
            params["extrinsic"].R[0], params["extrinsic"].t[0], check=False)
        start, end = r1.initial_cost, r2.final_cost
        history.append({
            "iteration": it,
            "observations": {"camera": len(C), "lidar": len(L), "joint": len(J)},
            "cost_start": start,
            "cost_after_first_solve": r1.final_cost,
            "cost_end": end,
            "cost_fixed_start": fixed_start,
            "max_translation_step": dpose,
            "terms": r2.term_costs,
            "traces": [r1.cost_trace, r2.cost_trace],
            "terminations": [r1.termination, r2.termination],
            "extrinsic_step": float(np.linalg.norm(dE.log())),
        })
        log.info("refine iteration %d: cost %.6g -> %.6g (C=%d L=%d J=%d)", it, start, end, len(C), len(L), len(J))
        # re-association reintroduces observations the filter dropped, so the
        # end-of-iteration costs are compared as well as each iteration's own drop
        prev = history[-2]["cost_end"] if len(history) > 1 else None
        if start <= 0.0 or abs(start - end) <= cfg.tol * start or (
                prev is not None and abs(prev - end) <= cfg.tol * prev):
            converged = True
            break

    P = params["poses"]
    out_poses = {}
    for k, s in enumerate(ids):
        U, _, Vt = np.linalg.svd(P.R[k])
        out_poses[s] = RigidTransform(U @ Vt, P.t[k])
    Ee = params["extrinsic"]
    U, _, Vt = np.linalg.svd(Ee.R[0])
    T_e = RigidTransform(U @ Vt, Ee.t[0])

    # carry the surviving observations back onto the tracks
    keep = {}
    for k_pt, o in C.track_obs:
        keep.setdefault(int(k_pt), []).append(int(o))
    out_tracks = []
    for k_pt, tr in enumerate(tracks):
        if not alive[k_pt] or k_pt not in keep:
            continue
        mask = np.zeros(len(tr), dtype=bool)
        mask[keep[k_pt]] = True
        out = tr.subset(np.arange(len(tr)))
        out.point = params["points"].values[k_pt].copy()
        out.inliers = mask
        out_tracks.append(out)
    report = {
        "iterations": len(history),
        "converged": converged,
        "weights": list(weights) if weights else None,
        "final_cost": history[-1]["cost_end"] if history else 0.0,
        "history": history,
        "structure_points": len(out_tracks),
    }
    return RefineResult(out_poses, out_tracks, T_e, report)
