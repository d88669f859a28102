"""Descriptor matching, epipolar verification and track assembly.

Image ids encode the station and camera side: ``image = 2 * station + side``
with side 0 for the left camera and 1 for the right camera.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

log = logging.getLogger(__name__)

LEFT, RIGHT = 0, 1


class FormatError(ValueError):
    pass


class PairRejected(Exception):
    """An image pair failed geometric verification. Not fatal for the pipeline."""


def image_id(station, side):
    return 2 * int(station) + int(side)


def station_side(image):
    return int(image) // 2, int(image) % 2


@dataclass
class FeatureSet:
    image_id: int
    xy: np.ndarray
    descriptors: np.ndarray

    def __post_init__(self):
        self.xy = np.asarray(self.xy, dtype=np.float64).reshape(-1, 2)
        self.descriptors = np.asarray(self.descriptors, dtype=np.float64)
        if self.descriptors.ndim == 1:
            self.descriptors = self.descriptors.reshape(len(self.xy), -1)
        if len(self.descriptors) != len(self.xy):
            raise FormatError("one descriptor per feature required")

    def __len__(self):
        return len(self.xy)

    @property
    def dim(self):
        return self.descriptors.shape[1]


@dataclass
class VerifiedMatchSet:
    image_a: int
    image_b: int
    pairs: np.ndarray
    F: np.ndarray

    def swapped(self):
        return VerifiedMatchSet(self.image_b, self.image_a, self.pairs[:, ::-1].copy(), self.F.T.copy())


@dataclass
class Track:
    """Observations of one scene feature; ``point`` is set once triangulated."""

    track_id: int
    stations: np.ndarray
    sides: np.ndarray
    feature_idx: np.ndarray
    pixels: np.ndarray
    point: np.ndarray | None = None
    inliers: np.ndarray | None = None

    def __post_init__(self):
        self.stations = np.asarray(self.stations, dtype=np.int64)
        self.sides = np.asarray(self.sides, dtype=np.int64)
        self.feature_idx = np.asarray(self.feature_idx, dtype=np.int64)
        self.pixels = np.asarray(self.pixels, dtype=np.float64).reshape(-1, 2)

    def __len__(self):
        return len(self.stations)

    @property
    def images(self):
        return 2 * self.stations + self.sides

    def observation_indices(self, station):
        return np.nonzero(self.stations == station)[0]

    def subset(self, keep):
        keep = np.asarray(keep)
        return Track(
            self.track_id,
            self.stations[keep],
            self.sides[keep],
            self.feature_idx[keep],
            self.pixels[keep],
            self.point,
            None if self.inliers is None else self.inliers[keep],
        )


# ---------------------------------------------------------------------------
# matching


def match_pair(a: FeatureSet, b: FeatureSet, ratio: float = 0.8):
    """Mutual nearest neighbours that pass the ratio test in both directions.

    Returns an ``(n, 2)`` int array of ``(index_in_a, index_in_b)``.
    """
    if len(a) and len(b) and a.dim != b.dim:
        raise FormatError(f"descriptor length mismatch: {a.dim} vs {b.dim}")
    if len(a) == 0 or len(b) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    da, db = a.descriptors, b.descriptors
    d2 = np.sum(da * da, 1)[:, None] + np.sum(db * db, 1)[None, :] - 2.0 * da @ db.T
    np.maximum(d2, 0.0, out=d2)
    nn_ab = np.argmin(d2, axis=1)
    nn_ba = np.argmin(d2, axis=0)
    ia = np.arange(len(a))
    mutual = nn_ba[nn_ab] == ia

    def passes(dist, axis):
        if dist.shape[axis] < 2:
            return np.ones(dist.shape[1 - axis], dtype=bool)
        part = np.partition(dist, 1, axis=axis)
        first = np.take(part, 0, axis=axis)
        second = np.take(part, 1, axis=axis)
        return np.sqrt(first) < ratio * np.sqrt(second)

    ok_a = passes(d2, 1)
    ok_b = passes(d2, 0)
    keep = mutual & ok_a & ok_b[nn_ab]
    return np.column_stack([ia[keep], nn_ab[keep]]).astype(np.int64)


# ---------------------------------------------------------------------------
# fundamental matrix


def _hartley(pts):
    c = pts.mean(axis=0)
    d = np.mean(np.linalg.norm(pts - c, axis=1))
    s = np.sqrt(2.0) / d if d > 0 else 1.0
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])


def _eight_point_normalized(xa, xb):
    """Rank-2 F (batched) from normalised correspondences ``(..., n, 2)``, with x_b^T F x_a = 0."""
    xa0, ya0 = xa[..., 0], xa[..., 1]
    xb0, yb0 = xb[..., 0], xb[..., 1]
    one = np.ones_like(xa0)
    A = np.stack([xb0 * xa0, xb0 * ya0, xb0, yb0 * xa0, yb0 * ya0, yb0, xa0, ya0, one], axis=-1)
    if A.shape[-2] == 8:
        # minimal sample: the last column of a complete QR of A^T spans the null space
        Q, _ = np.linalg.qr(np.swapaxes(A, -1, -2), mode="complete")
        f = Q[..., :, -1]
    else:
        f = np.linalg.svd(A)[2][..., -1, :]
    F = f.reshape(A.shape[:-2] + (3, 3))
    U, s, Vt = np.linalg.svd(F)
    s[..., 2] = 0.0
    return U @ (s[..., :, None] * Vt)


def fundamental_eight_point(xa, xb):
    """Normalised 8-point estimate from >= 8 pixel correspondences."""
    xa = np.asarray(xa, dtype=np.float64)
    xb = np.asarray(xb, dtype=np.float64)
    if len(xa) < 8:
        raise PairRejected("need at least 8 correspondences")
    Ta, Tb = _hartley(xa), _hartley(xb)
    na = xa @ Ta[:2, :2].T + Ta[:2, 2]
    nb = xb @ Tb[:2, :2].T + Tb[:2, 2]
    Fn = _eight_point_normalized(na, nb)
    F = Tb.T @ Fn @ Ta
    return F / np.linalg.norm(F)


def symmetric_epipolar_distance(F, xa, xb):
    """RMS of the two point-to-epipolar-line distances, in pixels. Batched over F."""
    ha = np.column_stack([xa, np.ones(len(xa))])
    hb = np.column_stack([xb, np.ones(len(xb))])
    lb = ha @ np.swapaxes(F, -1, -2)
    la = hb @ F
    e = np.sum(hb * lb, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        db2 = e * e / (lb[..., 0] ** 2 + lb[..., 1] ** 2)
        da2 = e * e / (la[..., 0] ** 2 + la[..., 1] ** 2)
    d = np.sqrt(0.5 * (da2 + db2))
    return np.where(np.isfinite(d), d, np.inf)


def verify_epipolar(
    matches,
    a: FeatureSet,
    b: FeatureSet,
    threshold_px: float = 4.0,
    iterations: int = 2048,
    seed=0,
    min_inliers: int = 15,
) -> VerifiedMatchSet:
    """RANSAC fundamental matrix with a fixed iteration budget."""
    matches = np.asarray(matches, dtype=np.int64).reshape(-1, 2)
    m = len(matches)
    if m < 8:
        raise PairRejected(f"only {m} matches between images {a.image_id} and {b.image_id}")
    xa = a.xy[matches[:, 0]]
    xb = b.xy[matches[:, 1]]
    Ta, Tb = _hartley(xa), _hartley(xb)
    na = xa @ Ta[:2, :2].T + Ta[:2, 2]
    nb = xb @ Tb[:2, :2].T + Tb[:2, 2]

    rng = np.random.default_rng(seed)
    samples = np.argsort(rng.random((iterations, m)), axis=1)[:, :8]
    Fn = _eight_point_normalized(na[samples], nb[samples])
    F = Tb.T @ Fn @ Ta
    F /= np.linalg.norm(F, axis=(1, 2))[:, None, None]
    best_F, best_in, best_score = None, None, (-1, 0.0)
    chunk = 256
    for s in range(0, iterations, chunk):
        d = symmetric_epipolar_distance(F[s : s + chunk], xa, xb)
        inl = d <= threshold_px
        counts = inl.sum(axis=1)
        err = np.where(inl, d, 0.0).sum(axis=1)
        k = np.lexsort((err, -counts))[0]
        score = (int(counts[k]), -float(err[k]))
        if score > best_score:
            best_score, best_F, best_in = score, F[s + k], inl[k]

    if best_in.sum() >= 8:
        refit = fundamental_eight_point(xa[best_in], xb[best_in])
        refit_in = symmetric_epipolar_distance(refit, xa, xb) <= threshold_px
        if refit_in.sum() >= best_in.sum():
            best_F, best_in = refit, refit_in
    n_in = int(best_in.sum())
    if n_in < min_inliers:
        raise PairRejected(f"{n_in} epipolar inliers between images {a.image_id} and {b.image_id}")
    return VerifiedMatchSet(a.image_id, b.image_id, matches[best_in], best_F)


def match_all(features, ratio=0.8, threshold_px=4.0, iterations=2048, seed=0, min_inliers=15, threads=1):
    """Exhaustive matching over all non-stereo image pairs.

    Returns ``(verified, report)`` where ``verified`` is ordered by image pair and
    ``report`` lists rejected pairs with reasons.
    """
    ids = sorted(features)
    pairs = [(i, j) for ii, i in enumerate(ids) for j in ids[ii + 1 :] if i // 2 != j // 2]

    def work(pair):
        i, j = pair
        m = match_pair(features[i], features[j], ratio)
        if len(m) == 0:
            return None, None
        try:
            return verify_epipolar(m, features[i], features[j], threshold_px, iterations, (seed, i, j), min_inliers), None
        except PairRejected as exc:
            return None, str(exc)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(work, pairs))
    else:
        results = [work(p) for p in pairs]
    verified = [v for v, _ in results if v is not None]
    rejected = [{"images": list(p), "reason": r} for p, (_, r) in zip(pairs, results) if r is not None]
    return verified, {"pairs_tested": len(pairs), "verified": len(verified), "rejected": rejected}


# ---------------------------------------------------------------------------
# tracks


def build_tracks(verified, features) -> list[Track]:
    """Connected components of the match graph.

    Components that contain two different features of the same image are
    dropped as inconsistent.
    """
    ids = sorted(features)
    offset = {}
    total = 0
    for i in ids:
        offset[i] = total
        total += len(features[i])
    node_image = np.concatenate([np.full(len(features[i]), i, dtype=np.int64) for i in ids]) if ids else np.zeros(0, np.int64)
    node_feat = np.concatenate([np.arange(len(features[i])) for i in ids]) if ids else np.zeros(0, np.int64)
    rows, cols = [], []
    for v in verified:
        rows.append(offset[v.image_a] + v.pairs[:, 0])
        cols.append(offset[v.image_b] + v.pairs[:, 1])
    if not rows:
        return []
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    g = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(total, total))
    _, labels = connected_components(g, directed=False)
    used = np.zeros(total, dtype=bool)
    used[rows] = True
    used[cols] = True
    nodes = np.nonzero(used)[0]
    order = np.lexsort((nodes, labels[nodes]))
    nodes = nodes[order]
    lab = labels[nodes]
    starts = np.flatnonzero(np.r_[True, lab[1:] != lab[:-1]])
    ends = np.r_[starts[1:], len(nodes)]
    groups = [nodes[s:e] for s, e in zip(starts, ends)]
    groups.sort(key=lambda g: int(g[0]))
    tracks = []
    for grp in groups:
        imgs = node_image[grp]
        if len(np.unique(imgs)) != len(imgs) or len(grp) < 2:
            continue
        o = np.argsort(imgs, kind="stable")
        grp, imgs = grp[o], imgs[o]
        feats = node_feat[grp]
        pix = np.array([features[i].xy[f] for i, f in zip(imgs, feats)])
        tracks.append(Track(len(tracks), imgs // 2, imgs % 2, feats, pix))
    return tracks
