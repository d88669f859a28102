"""Per-track RANSAC triangulation over posed observations."""
from __future__ import annotations

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .geom import Calibration, normalize_pixels, triangulate_dlt_batch
from .residuals import camera_residual

log = logging.getLogger(__name__)


class TriangulationRejected(Exception):
    pass


@dataclass
class TriangulationConfig:
    reproj_thresh_px: float = 4.0
    max_pairs: int = 64
    min_views: int = 3
    refine_iterations: int = 10
    seed: int = 0


def candidate_pairs(n, max_pairs=64, rng=None):
    """All view pairs when there are at most ``max_pairs``, otherwise a random subset."""
    allp = np.array(list(itertools.combinations(range(n), 2)), dtype=np.int64).reshape(-1, 2)
    if len(allp) <= max_pairs:
        return allp
    rng = rng or np.random.default_rng(0)
    pick = np.sort(rng.choice(len(allp), max_pairs, replace=False))
    return allp[pick]


def _view_arrays(track, poses, calib):
    R = np.stack([poses[s].R for s in track.stations])
    t = np.stack([poses[s].t for s in track.stations])
    sides = track.sides
    R_cs, t_cs = calib.R_cs[sides], calib.t_cs[sides]
    R_cw = R_cs @ np.swapaxes(R, 1, 2)
    t_cw = t_cs - np.einsum("nij,nj->ni", R_cw, t)
    return R, t, R_cw, t_cw


def reprojection_errors(X, track, poses, calib):
    """Pixel error and depth of point(s) ``X`` in every view of ``track``: ``(p, n)`` each."""
    _, _, R_cw, t_cw = _view_arrays(track, poses, calib)
    X = np.atleast_2d(X)
    c = np.einsum("nij,pj->pni", R_cw, X) + t_cw[None]
    z = c[..., 2]
    K = calib.K[track.sides]
    with np.errstate(divide="ignore", invalid="ignore"):
        h = np.einsum("nij,pnj->pni", K, c)
        px = h[..., :2] / h[..., 2:3]
        err = np.linalg.norm(px - track.pixels[None], axis=2)
    err = np.where(np.isfinite(err), err, np.inf)
    return err, z


def score_pairs(track, poses, calib, pairs, thresh):
    """DLT from each pair and its inlier set. Returns ``(points, inliers (p, n), rms (p,), ok (p,))``."""
    _, _, R_cw, t_cw = _view_arrays(track, poses, calib)
    xn_all = normalize_pixels(track.pixels, calib.K_inv[track.sides])
    P_all = np.concatenate([R_cw, t_cw[:, :, None]], axis=2)
    X, ok = triangulate_dlt_batch(xn_all[pairs], P_all[pairs], np.ones(pairs.shape, bool))
    X = np.where(ok[:, None], X, 0.0)
    err, z = reprojection_errors(X, track, poses, calib)
    inl = (err <= thresh) & (z > 0) & ok[:, None]
    cnt = inl.sum(axis=1)
    sq = np.where(inl, err * err, 0.0).sum(axis=1)
    rms = np.sqrt(sq / np.maximum(cnt, 1))
    return X, inl, rms, ok


def select_best(inl, rms):
    """Index of the largest inlier set, ties to the lower RMS, then the earlier pair."""
    cnt = inl.sum(axis=1)
    return int(np.lexsort((np.arange(len(cnt)), rms, -cnt))[0])


def refine_point(X, track, poses, calib, inliers, iterations=10):
    """Damped Gauss-Newton on the point alone; never increases inlier RMS."""
    R, t, _, _ = _view_arrays(track, poses, calib)
    sel = np.nonzero(inliers)[0]
    sides = track.sides[sel]
    args = (R[sel], t[sel])
    K, R_cs, t_cs, uv = calib.K[sides], calib.R_cs[sides], calib.t_cs[sides], track.pixels[sel]

    def evaluate(x):
        e, _, Jx, z = camera_residual(*args, np.broadcast_to(x, (len(sel), 3)), K, R_cs, t_cs, uv)
        return e, Jx, z

    x = np.asarray(X, dtype=np.float64)
    e, Jx, _ = evaluate(x)
    cost = float(np.sum(e * e))
    lam = 1e-6
    for _ in range(iterations):
        A = np.einsum("mki,mkj->ij", Jx, Jx)
        g = np.einsum("mki,mk->i", Jx, e)
        try:
            dx = np.linalg.solve(A + lam * np.diag(np.diag(A)), -g)
        except np.linalg.LinAlgError:
            break
        x2 = x + dx
        e2, J2, z2 = evaluate(x2)
        c2 = float(np.sum(e2 * e2))
        if np.all(z2 > 0) and c2 < cost:
            done = cost - c2 <= 1e-14 * cost
            x, e, Jx, cost = x2, e2, J2, c2
            lam = max(lam / 10, 1e-12)
            if done:
                break
        else:
            lam *= 10
            if lam > 1e8:
                break
    return x, float(np.sqrt(cost / len(sel)))


def ransac_triangulate(track, poses, calib: Calibration, config: TriangulationConfig | None = None):
    """Best-supported 2-view DLT hypothesis, refined over its inliers.

    Only observations from posed stations take part. Returns
    ``(point, inlier mask over the track's observations)``.
    """
    cfg = config or TriangulationConfig()
    posed = np.array([s in poses for s in track.stations], dtype=bool)
    if posed.sum() < cfg.min_views:
        raise TriangulationRejected(f"track {track.track_id}: {int(posed.sum())} posed views")
    sub = track.subset(posed) if not posed.all() else track
    rng = np.random.default_rng((cfg.seed, int(track.track_id)))
    pairs = candidate_pairs(len(sub), cfg.max_pairs, rng)
    X, inl, rms, ok = score_pairs(sub, poses, calib, pairs, cfg.reproj_thresh_px)
    if not ok.any():
        raise TriangulationRejected(f"track {track.track_id}: all view pairs degenerate")
    k = select_best(inl, rms)
    best = inl[k]
    if best.sum() < cfg.min_views:
        raise TriangulationRejected(f"track {track.track_id}: {int(best.sum())} inlier views")
    x, r1 = refine_point(X[k], sub, poses, calib, best, cfg.refine_iterations)
    if not r1 <= rms[k]:
        x = X[k]
    _, z = reprojection_errors(x, sub, poses, calib)
    if np.any(z[0][best] <= 0):
        raise TriangulationRejected(f"track {track.track_id}: point behind an inlier view")
    mask = np.zeros(len(track), dtype=bool)
    mask[np.nonzero(posed)[0][best]] = True
    return x, mask


def triangulate_tracks(tracks, poses, calib: Calibration, config: TriangulationConfig | None = None, threads=1):
    """Triangulate every track. Returns ``(kept tracks with point/inliers set, report)``."""
    cfg = config or TriangulationConfig()

    def work(tr):
        try:
            x, mask = ransac_triangulate(tr, poses, calib, cfg)
            return replace(tr, point=x, inliers=mask), None
        except TriangulationRejected as exc:
            return None, str(exc)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(work, tracks))
    else:
        results = [work(t) for t in tracks]
    kept = [t for t, _ in results if t is not None]
    rejected = sum(1 for t, _ in results if t is None)
    log.info("triangulation: %d of %d tracks kept", len(kept), len(tracks))
    return kept, {"tracks_in": len(tracks), "triangulated": len(kept), "rejected": rejected}
