"""Edge validation: LiDAR occupancy consistency and triplet success rates.

Also hosts the rotation-only (RC) and rotation+translation (TC) cycle checks
used as baselines, and the confusion-matrix bookkeeping for comparing them.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .geom import RigidTransform, transform_error

log = logging.getLogger(__name__)

OCCUPIED, FREE, UNKNOWN = 1, 0, -1


@dataclass
class OccupancyGrid:
    """Dense ternary voxel grid. ``states[ix, iy, iz]`` covers ``origin + voxel * [i, i+1)``."""

    voxel: float
    origin: np.ndarray
    states: np.ndarray
    sensor_origin: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.states = np.asarray(self.states, dtype=np.int8)
        if self.states.ndim != 3:
            raise ValueError("grid states must be a 3D array")

    @property
    def shape(self):
        return self.states.shape

    def state_at(self, points):
        return kernels.lookup_states(self.states, self.origin, float(self.voxel), np.atleast_2d(points))

    def cell_centers(self, state=OCCUPIED):
        idx = np.argwhere(self.states == state)
        return self.origin + (idx + 0.5) * self.voxel

    def counts(self):
        return {name: int(np.sum(self.states == s)) for name, s in (("occupied", 1), ("free", 0), ("unknown", -1))}


def build_grid(cloud, voxel_size=0.2, max_range=20.0, sensor_origin=(0.0, 0.0, 0.0), carve_margin=0.0) -> OccupancyGrid:
    """Occupied cells from points, free cells carved by rays from the sensor origin.

    Carving stops ``carve_margin`` metres short of each hit so that rays grazing
    a surface do not clear the cells the surface passes through.
    """
    pts = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    s = np.asarray(sensor_origin, dtype=np.float64)
    if len(pts) == 0:
        raise ValueError("cannot build an occupancy grid from an empty cloud")
    rng = np.linalg.norm(pts - s, axis=1)
    pts = pts[(rng <= max_range) & np.all(np.isfinite(pts), axis=1)]
    if len(pts) == 0:
        raise ValueError(f"no points within max_range={max_range}")
    v = float(voxel_size)
    allp = np.vstack([pts, s[None]])
    origin = np.floor(allp.min(axis=0) / v) * v - v
    shape = tuple(int(n) for n in np.floor((allp.max(axis=0) - origin) / v).astype(np.int64) + 2)

    start = np.floor((s - origin) / v).astype(np.int64)
    end_occ = np.floor((pts - origin) / v).astype(np.int64)
    rng = np.linalg.norm(pts - s, axis=1)
    stop = pts - (pts - s) * (np.minimum(carve_margin, rng) / np.maximum(rng, 1e-300))[:, None]
    end = np.floor((stop - origin) / v).astype(np.int64)
    d = stop - s
    step = np.sign(d).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_delta = np.where(d != 0, v / np.abs(d), np.inf)
        nxt = origin + (start + (step > 0)) * v
        t_max = np.where(d != 0, (nxt - s) / d, np.inf)
    remaining = np.abs(end - start)
    starts = np.broadcast_to(start, end.shape)
    free = kernels.carve_free(
        np.ascontiguousarray(starts), t_max, t_delta, remaining, np.ascontiguousarray(step), shape
    ).reshape(shape)
    states = np.full(shape, UNKNOWN, dtype=np.int8)
    states[free] = FREE
    states[end_occ[:, 0], end_occ[:, 1], end_occ[:, 2]] = OCCUPIED
    return OccupancyGrid(v, origin, states, s)


def consistency_counts(source: OccupancyGrid, target: OccupancyGrid, T: RigidTransform):
    """(confirmed, known) over occupied source cells mapped by ``T`` into the target."""
    if not np.isclose(source.voxel, target.voxel):
        raise ValueError(f"voxel size mismatch: {source.voxel} vs {target.voxel}")
    centers = source.cell_centers(OCCUPIED)
    if len(centers) == 0:
        return 0, 0
    st = target.state_at(T.apply(centers))
    return int(np.sum(st == OCCUPIED)), int(np.sum(st != UNKNOWN))


def consistency_ratio(source: OccupancyGrid, target: OccupancyGrid, T: RigidTransform) -> float:
    """Share of occupied source cells landing on occupied target cells among those landing on known cells.

    ``T`` maps source coordinates into target coordinates. Returns 1.0 when no
    source cell lands on a known target cell.
    """
    num, den = consistency_counts(source, target, T)
    return num / den if den else 1.0


def lidar_relative(T_ij: RigidTransform, T_e: RigidTransform) -> RigidTransform:
    """Camera-frame edge ``T_ij`` expressed between the two LiDAR frames."""
    return T_e.inverse() @ T_ij @ T_e


def grid_check(edge, grid_i, grid_j, T_e: RigidTransform, ratio_threshold=0.6):
    """Cross-checked consistency test. Returns ``(passed, (r_ij, r_ji))``.

    ``r_ij`` uses station i as the source. Missing grids pass with a warning.
    """
    if grid_i is None or grid_j is None:
        log.warning("edge %s: missing point cloud, grid check skipped", edge.key)
        return True, (None, None)
    L = lidar_relative(edge.transform, T_e)
    r_ij = consistency_ratio(grid_i, grid_j, L.inverse())
    r_ji = consistency_ratio(grid_j, grid_i, L)
    return bool(r_ij > ratio_threshold and r_ji > ratio_threshold), (r_ij, r_ji)


def build_grids(clouds, voxel_size=0.2, max_range=20.0, carve_margin=0.0, threads=1):
    """Grids keyed like ``clouds``; ``None`` entries stay ``None``."""
    keys = sorted(clouds)

    def work(k):
        c = clouds[k]
        return None if c is None or len(c) == 0 else build_grid(c, voxel_size, max_range, carve_margin=carve_margin)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            grids = list(pool.map(work, keys))
    else:
        grids = [work(k) for k in keys]
    return dict(zip(keys, grids))


# ---------------------------------------------------------------------------
# triplets


@dataclass
class TripletCheck:
    stations: tuple
    composite: RigidTransform
    angle_deg: float
    translation_m: float
    passed: bool


def _edge_lookup(edges):
    table = {}
    for e in edges:
        table[(e.i, e.j)] = e.transform
        table[(e.j, e.i)] = e.transform.inverse()
    return table


def enumerate_triplets(edges):
    """All 3-cycles ``(i, j, k)`` with ``i < j < k``, in lexicographic order."""
    adj = {}
    for e in edges:
        adj.setdefault(e.i, set()).add(e.j)
        adj.setdefault(e.j, set()).add(e.i)
    out = []
    for i in sorted(adj):
        for j in sorted(n for n in adj[i] if n > i):
            for k in sorted(n for n in adj[i] & adj[j] if n > j):
                out.append((i, j, k))
    return out


def triplet_checks(edges, angle_thresh_deg=2.0, trans_thresh_m=0.1, rotation_only=False):
    """Cycle composite ``T_ij T_jk T_ki`` for every triangle of the edge graph."""
    table = _edge_lookup(edges)
    checks = []
    for i, j, k in enumerate_triplets(edges):
        C = table[(i, j)] @ table[(j, k)] @ table[(k, i)]
        ang = float(np.degrees(C.angle))
        tr = float(np.linalg.norm(C.t))
        ok = ang <= angle_thresh_deg and (rotation_only or tr <= trans_thresh_m)
        checks.append(TripletCheck((i, j, k), C, ang, tr, ok))
    return checks


def edge_statistics(checks):
    """``{(i, j): (passed, involved)}`` keyed with ``i < j``."""
    stats = {}
    for c in checks:
        i, j, k = c.stations
        for key in ((i, j), (j, k), (i, k)):
            p, n = stats.get(key, (0, 0))
            stats[key] = (p + int(c.passed), n + 1)
    return stats


def _ukey(e):
    return (min(e.i, e.j), max(e.i, e.j))


def success_rate_filter(edges, checks, rs_threshold=0.6):
    """Drop edges whose success rate is below ``rs_threshold``.

    Edges in no triplet are kept (with a warning). Updates the edges'
    counters and validation state in place and returns the survivors.
    """
    stats = edge_statistics(checks)
    survivors = []
    isolated = 0
    for e in edges:
        e.passed, e.involved = stats.get(_ukey(e), (0, 0))
        if e.involved == 0:
            isolated += 1
            e.state = "sr-pass"
            survivors.append(e)
        elif e.passed / e.involved >= rs_threshold:
            e.state = "sr-pass"
            survivors.append(e)
        else:
            e.state = "sr-fail"
    if isolated:
        log.warning("%d edges are in no triplet and were kept unchecked", isolated)
    return survivors


def baseline_checks(edges, mode="tc", angle_thresh_deg=2.0, trans_thresh_m=0.1):
    """Cycle-only filter: an edge is removed if any triplet containing it fails."""
    mode = mode.lower()
    if mode not in ("rc", "tc"):
        raise ValueError(f"unknown baseline mode {mode!r}")
    checks = triplet_checks(edges, angle_thresh_deg, trans_thresh_m, rotation_only=(mode == "rc"))
    stats = edge_statistics(checks)
    return [e for e in edges if stats.get(_ukey(e), (0, 0))[0] == stats.get(_ukey(e), (0, 0))[1]]


# ---------------------------------------------------------------------------
# full validation


@dataclass
class ValidationConfig:
    voxel_size: float = 0.2
    max_range: float = 20.0
    # grazing rays otherwise clear cells the surface passes through
    carve_margin: float = 0.6
    ratio_threshold: float = 0.6
    sr_threshold: float = 0.6
    angle_thresh_deg: float = 2.0
    trans_thresh_m: float = 0.1
    max_escalations: int = 3
    escalation_step: float = 0.1
    use_grid: bool = True
    use_sr: bool = True


def validate_edges(edges, grids, T_e: RigidTransform, config: ValidationConfig | None = None,
                   residual_check=None, threads=1):
    """Grid check, then triplet success-rate filtering.

    ``residual_check(survivors) -> bool`` may report that a downstream pose
    graph still has an edge beyond the angle/translation bounds; the
    success-rate threshold is then raised and the filter rerun.
    Returns ``(survivors, report)``.
    """
    cfg = config or ValidationConfig()
    per_edge = {}
    if cfg.use_grid:
        def work(e):
            return grid_check(e, grids.get(e.i), grids.get(e.j), T_e, cfg.ratio_threshold)

        if threads > 1:
            with ThreadPoolExecutor(threads) as pool:
                results = list(pool.map(work, edges))
        else:
            results = [work(e) for e in edges]
        grid_ok = []
        for e, (ok, ratios) in zip(edges, results):
            e.ratios = ratios
            e.state = "grid-pass" if ok else "grid-fail"
            if ok:
                grid_ok.append(e)
    else:
        grid_ok = list(edges)

    threshold = cfg.sr_threshold
    escalations = 0
    checks = triplet_checks(grid_ok, cfg.angle_thresh_deg, cfg.trans_thresh_m)
    survivors = success_rate_filter(grid_ok, checks, threshold) if cfg.use_sr else list(grid_ok)
    while cfg.use_sr and residual_check is not None and escalations < cfg.max_escalations:
        if not residual_check(survivors):
            break
        escalations += 1
        threshold += cfg.escalation_step
        log.info("escalating success-rate threshold to %.2f", threshold)
        survivors = success_rate_filter(grid_ok, checks, threshold)

    for e in edges:
        per_edge[f"{e.i}-{e.j}"] = {
            "ratios": None if e.ratios is None else [None if r is None else float(r) for r in e.ratios],
            "passed": e.passed,
            "involved": e.involved,
            "success_rate": e.success_rate,
            "state": e.state,
        }
    report = {
        "edges_in": len(edges),
        "grid_survivors": len(grid_ok),
        "survivors": len(survivors),
        "triplets": len(checks),
        "sr_threshold": threshold,
        "escalations": escalations,
        "edges": per_edge,
    }
    return survivors, report


# ---------------------------------------------------------------------------
# evaluation against ground truth


def label_outliers(edges, gt_poses, angle_thresh_deg=2.0, trans_thresh_m=0.1):
    """``{(i, j): True}`` for edges that disagree with ground truth beyond the bounds."""
    out = {}
    for e in edges:
        truth = gt_poses[e.i].inverse() @ gt_poses[e.j]
        ang, tr = transform_error(truth, e.transform)
        out[e.key] = ang > angle_thresh_deg or tr > trans_thresh_m
    return out


def confusion_report(edges, survivors, labels):
    """2x2 matrix ``[[TN, FP], [FN, TP]]`` with "outlier" as the positive class."""
    kept = {e.key for e in survivors}
    tn = fp = fn = tp = 0
    for e in edges:
        removed = e.key not in kept
        if labels[e.key]:
            tp += removed
            fn += not removed
        else:
            fp += removed
            tn += not removed
    predicted = tp + fp
    positives = tp + fn
    return {
        "matrix": [[tn, fp], [fn, tp]],
        "recall": tp / positives if positives else 1.0,
        "precision": tp / predicted if predicted else 1.0,
        "no_predictions": predicted == 0,
        "no_outliers": positives == 0,
    }
