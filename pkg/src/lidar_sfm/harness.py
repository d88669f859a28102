"""Synthetic stereo + LiDAR scenes with planted ground truth, and their evaluation.

A scene is a ring ("loop") or a row ("line") of stations looking at boxes
standing on a ground plane. Features are planted per window of consecutive
stations, per designated 3-view-only pair, and per ambiguity twin; twins make
one station observe a displaced copy of what another sees, which produces a
false edge with consistent image geometry.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .correspondence import FeatureSet, Track, image_id
from .geom import Calibration, CameraModel, RigidTransform, look_at, project_points, so3_exp
from .relmotion import THREE_VIEW_CASES, rigid_align
from .validation import confusion_report, label_outliers

log = logging.getLogger(__name__)

_CASE_IMAGES = {  # images (station offset, side) for each 3-view case of a pair (a, b)
    "i-j-k": [(0, 0), (0, 1), (1, 0)],
    "i-j-l": [(0, 0), (0, 1), (1, 1)],
    "i-k-l": [(0, 0), (1, 0), (1, 1)],
    "j-k-l": [(0, 1), (1, 0), (1, 1)],
}


class SceneError(ValueError):
    pass


@dataclass
class SceneConfig:
    layout: str = "loop"
    n_stations: int = 25
    radius: float = 8.0
    spacing: float = 1.0
    camera_height: float = 1.5
    baseline: float = 0.4
    focal: float = 1000.0
    width: int = 1280
    height: int = 960
    window: int = 3
    features_per_window: int = 80
    drop_prob: float = 0.1
    three_view_pairs: int = 0
    three_view_hop: int = 3
    features_per_pair: int = 40
    ambiguity_fraction: float = 0.0
    ambiguity_hop: int = 4
    features_per_twin: int = 40
    distractors: int = 40
    # 32 dims let unrelated unit descriptors pass the ratio test now and then
    descriptor_dim: int = 64
    descriptor_noise: float = 0.01
    pixel_noise: float = 0.0
    range_noise: float = 0.0
    lidar_points: int = 20000
    lidar_max_range: float = 20.0
    lidar_elevation: tuple = (-40.0, 30.0)
    feature_margin: float = 0.5
    image_margin: float = 10.0
    extrinsic_yaw_deg: float = 4.0
    extrinsic_translation: tuple = (0.15, -0.2, 0.05)

    @classmethod
    def from_dict(cls, d):
        known = {k: v for k, v in (d or {}).items() if k in cls.__dataclass_fields__}
        unknown = set(d or {}) - set(known)
        if unknown:
            raise SceneError(f"unknown scene keys: {sorted(unknown)}")
        for k in ("lidar_elevation", "extrinsic_translation"):
            if k in known:
                known[k] = tuple(known[k])
        return cls(**known)

    def to_dict(self):
        d = asdict(self)
        d["lidar_elevation"] = list(self.lidar_elevation)
        d["extrinsic_translation"] = list(self.extrinsic_translation)
        return d


@dataclass
class SyntheticScene:
    config: SceneConfig
    calib: Calibration
    extrinsic: RigidTransform
    poses: dict
    boxes: np.ndarray
    features: dict
    feature_ids: dict
    clouds: dict
    points: dict
    track_images: dict
    twin_pairs: list = field(default_factory=list)
    twin_transforms: dict = field(default_factory=dict)
    three_view_pairs: list = field(default_factory=list)
    window_pairs: list = field(default_factory=list)


@dataclass
class GroundTruth:
    """The parts of a scene that evaluation needs; a :class:`SyntheticScene` also qualifies."""

    poses: dict
    extrinsic: RigidTransform
    points: dict
    feature_ids: dict


# ---------------------------------------------------------------------------
# geometry of the world


def default_boxes(layout):
    """Axis-aligned boxes ``(m, 2, 3)`` as (lower, upper) corners."""
    if layout == "loop":
        boxes = [[(-3.0, -3.0, 0.0), (3.0, 3.0, 4.0)]]
        for a in np.radians([20.0, 110.0, 200.0, 290.0]):
            c = 13.0 * np.array([np.cos(a), np.sin(a)])
            boxes.append([(c[0] - 0.6, c[1] - 0.6, 0.0), (c[0] + 0.6, c[1] + 0.6, 3.0)])
        return np.array(boxes)
    if layout == "line":
        boxes = [[(-30.0, 8.0, 0.0), (30.0, 8.5, 5.0)]]
        for x in np.arange(-15.0, 16.0, 3.0):
            boxes.append([(x - 0.5, 4.0, 0.0), (x + 0.5, 5.0, 3.0)])
        boxes.append([(-30.0, -9.0, 0.0), (30.0, -8.5, 4.0)])
        return np.array(boxes)
    raise SceneError(f"unknown layout {layout!r}")


def raycast(origins, dirs, boxes, max_range=np.inf):
    """First hit against the ground plane ``z = 0`` and the boxes.

    Returns ``(t, surface, normal)``; ``surface`` is -1 for misses, 0 for the
    ground and ``1 + box index`` for boxes.
    """
    o = np.atleast_2d(origins).astype(np.float64)
    d = np.atleast_2d(dirs).astype(np.float64)
    o, d = np.broadcast_arrays(o, d)
    n = len(d)
    best = np.full(n, np.inf)
    surf = np.full(n, -1, dtype=np.int64)
    normal = np.zeros((n, 3))
    eps = 1e-9
    with np.errstate(divide="ignore", invalid="ignore"):
        tg = np.where(d[:, 2] < 0, -o[:, 2] / d[:, 2], np.inf)
    hit = (tg > eps) & (tg < best)
    best[hit] = tg[hit]
    surf[hit] = 0
    normal[hit] = (0.0, 0.0, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
    for b, (lo, hi) in enumerate(boxes):
        with np.errstate(invalid="ignore"):
            t1 = (lo - o) * inv
            t2 = (hi - o) * inv
        t1 = np.where(np.isnan(t1), -np.inf, t1)
        t2 = np.where(np.isnan(t2), np.inf, t2)
        tl = np.minimum(t1, t2)
        th = np.maximum(t1, t2)
        tmin = tl.max(axis=1)
        tmax = th.min(axis=1)
        axis = tl.argmax(axis=1)
        h = (tmax >= tmin) & (tmin > eps) & (tmin < best)
        best[h] = tmin[h]
        surf[h] = b + 1
        nv = np.zeros((h.sum(), 3))
        nv[np.arange(h.sum()), axis[h]] = -np.sign(d[h, axis[h]])
        normal[h] = nv
    miss = best > max_range
    surf[miss] = -1
    best[miss] = np.inf
    return best, surf, normal


def surface_margin(X, surface, boxes):
    """Distance from points on ``surface`` to the nearest edge of that surface."""
    X = np.atleast_2d(X)
    out = np.full(len(X), np.inf)
    for k in range(len(X)):
        s = surface[k]
        if s < 0:
            out[k] = -np.inf
        elif s == 0:
            m = np.inf
            for lo, hi in boxes:
                dx = max(lo[0] - X[k, 0], 0.0, X[k, 0] - hi[0])
                dy = max(lo[1] - X[k, 1], 0.0, X[k, 1] - hi[1])
                m = min(m, np.hypot(dx, dy))
            out[k] = m
        else:
            lo, hi = boxes[s - 1]
            on_face = np.isclose(X[k], lo, atol=1e-6) | np.isclose(X[k], hi, atol=1e-6)
            dist = np.minimum(X[k] - lo, hi - X[k])
            out[k] = np.min(np.where(on_face, np.inf, dist))
    return out


# ---------------------------------------------------------------------------
# rig and trajectory


def make_calibration(cfg: SceneConfig):
    K = np.array([[cfg.focal, 0.0, (cfg.width - 1) / 2.0], [0.0, cfg.focal, (cfg.height - 1) / 2.0], [0.0, 0.0, 1.0]])
    left = CameraModel(K, RigidTransform(), cfg.width, cfg.height)
    right = CameraModel(K, RigidTransform(np.eye(3), (-cfg.baseline, 0.0, 0.0)), cfg.width, cfg.height)
    # LiDAR axes: x forward, y left, z up, then a yaw about its own z axis
    base = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
    R_e = base @ so3_exp(np.array([0.0, 0.0, np.radians(cfg.extrinsic_yaw_deg)]))
    T_e = RigidTransform(R_e, cfg.extrinsic_translation)
    return Calibration(left, right, T_e), T_e


def make_poses(cfg: SceneConfig):
    poses = {}
    for i in range(cfg.n_stations):
        if cfg.layout == "loop":
            a = 2.0 * np.pi * i / cfg.n_stations
            p = np.array([cfg.radius * np.cos(a), cfg.radius * np.sin(a), cfg.camera_height])
            poses[i] = look_at(p, (0.0, 0.0, cfg.camera_height))
        else:
            x = (i - (cfg.n_stations - 1) / 2.0) * cfg.spacing
            p = np.array([x, 0.0, cfg.camera_height])
            poses[i] = look_at(p, p + np.array([0.0, 1.0, 0.0]))
    return poses


# ---------------------------------------------------------------------------
# LiDAR


def simulate_cloud(pose, T_e, boxes, cfg: SceneConfig, rng):
    """Ray-cast LiDAR sweep in the station's LiDAR frame."""
    world_from_lidar = pose @ T_e
    origin = world_from_lidar.t
    lo, hi = np.radians(cfg.lidar_elevation)
    out = []
    total = 0
    for _ in range(50):
        m = max(2 * (cfg.lidar_points - total), 1000)
        az = rng.uniform(0.0, 2.0 * np.pi, m)
        el = np.arcsin(rng.uniform(np.sin(lo), np.sin(hi), m))
        # elevation measured against world up, azimuth in the horizontal plane
        d = np.column_stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        t, surf, _ = raycast(origin[None], d, boxes, cfg.lidar_max_range)
        keep = (surf >= 0) & (t > 0.3)
        rng_m = t[keep] + (rng.normal(0.0, cfg.range_noise, keep.sum()) if cfg.range_noise > 0 else 0.0)
        pts = origin + d[keep] * rng_m[:, None]
        out.append(pts)
        total += len(pts)
        if total >= cfg.lidar_points:
            break
    pts = np.vstack(out)[: cfg.lidar_points]
    return world_from_lidar.inverse().apply(pts)


# ---------------------------------------------------------------------------
# features


class _Planter:
    def __init__(self, cfg, calib, poses, boxes, rng):
        self.cfg, self.calib, self.poses, self.boxes, self.rng = cfg, calib, poses, boxes, rng
        self.obs = {}  # image id -> list of (pixel, planted id)
        self.points = {}
        self.track_images = {}
        self.next_id = 0

    def camera_center(self, station, side, pose=None):
        pose = self.poses[station] if pose is None else pose
        cam = self.calib.camera(side)
        return cam.cam_from_world(pose).inverse().t

    def sample_surface_points(self, station, n):
        """Rays through random pixels of the left image of ``station``."""
        cfg = self.cfg
        cam = self.calib.left
        uv = np.column_stack([
            self.rng.uniform(cfg.image_margin, cfg.width - 1 - cfg.image_margin, n),
            self.rng.uniform(cfg.image_margin, cfg.height - 1 - cfg.image_margin, n),
        ])
        rays = np.column_stack([uv, np.ones(n)]) @ cam.K_inv.T
        pose = self.poses[station]
        d = rays @ pose.R.T
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        t, surf, _ = raycast(pose.t[None], d, self.boxes, 25.0)
        ok = surf >= 0
        X = pose.t + d * t[:, None]
        X, surf = X[ok], surf[ok]
        keep = surface_margin(X, surf, self.boxes) >= cfg.feature_margin
        return X[keep]

    def visible(self, X, station, side, pose=None, check_occlusion=True):
        cfg = self.cfg
        pose = self.poses[station] if pose is None else pose
        cam = self.calib.camera(side)
        uv, z = project_points(X, pose, cam)
        ok = (z > 0.5) & cam.in_bounds(uv, cfg.image_margin)
        if check_occlusion and ok.any():
            c = self.camera_center(station, side, pose)
            v = X - c
            dist = np.linalg.norm(v, axis=1)
            t, _, _ = raycast(c[None], v / dist[:, None], self.boxes)
            ok &= t >= dist - 1e-6
        return ok, uv

    def plant(self, X, views):
        """Record one planted track. ``views`` is a list of (station, side, pixel)."""
        tid = self.next_id
        self.next_id += 1
        self.points[tid] = X
        self.track_images[tid] = []
        for station, side, uv in views:
            img = image_id(station, side)
            self.obs.setdefault(img, []).append((uv, tid))
            self.track_images[tid].append(img)
        return tid

    def plant_group(self, anchor, images, n, false_pose=None, drop_prob=0.0, min_keep=2):
        """Plant ``n`` features seen by ``images`` (list of (station, side)).

        With ``false_pose = (station, pose)`` that station's pixels come from the
        given pose instead of its true one, without an occlusion test.
        """
        planted = 0
        for _ in range(40):
            if planted >= n:
                break
            X = self.sample_surface_points(anchor, 4 * (n - planted) + 16)
            if len(X) == 0:
                continue
            ok = np.ones(len(X), dtype=bool)
            pix = {}
            for st, sd in images:
                if false_pose is not None and st == false_pose[0]:
                    v, uv = self.visible(X, st, sd, false_pose[1], check_occlusion=False)
                else:
                    v, uv = self.visible(X, st, sd)
                ok &= v
                pix[(st, sd)] = uv
            for k in np.nonzero(ok)[0]:
                if planted >= n:
                    break
                views = [(st, sd, pix[(st, sd)][k]) for st, sd in images]
                if drop_prob > 0:
                    keep = self.rng.random(len(views)) >= drop_prob
                    if keep.sum() < min_keep:
                        continue
                    views = [v for v, kk in zip(views, keep) if kk]
                self.plant(X[k], views)
                planted += 1
        return planted


def _window_members(cfg, start):
    return [(start + o) % cfg.n_stations for o in range(cfg.window)]


def _choose_pairs(cfg, hop, count, taken, rng):
    """``count`` station pairs ``(a, a + hop)`` not overlapping earlier choices."""
    n = cfg.n_stations
    cand = list(range(n)) if cfg.layout == "loop" else list(range(n - hop))
    rng.shuffle(cand)
    out = []
    for a in cand:
        b = (a + hop) % n
        pair = (min(a, b), max(a, b))
        if pair in taken or a in {x for p in out for x in p}:
            continue
        out.append(pair)
        taken.add(pair)
        if len(out) == count:
            break
    if len(out) < count:
        raise SceneError(f"cannot place {count} pairs at hop {hop}")
    return out


def _twin_displacement(rng, small_rotation):
    v = rng.normal(size=3)
    v[2] = 0.0
    v /= np.linalg.norm(v)
    mag = rng.uniform(0.6, 1.5)
    t = v * np.sqrt(max(mag**2 - 0.4**2, 0.0)) * rng.uniform(0.3, 1.0)
    t[2] = rng.choice([-1.0, 1.0]) * rng.uniform(0.4, 0.8)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    ang = np.radians(rng.uniform(0.0, 0.5) if small_rotation else rng.uniform(3.0, 10.0))
    return so3_exp(axis * ang), t


def generate(config: SceneConfig | dict | None = None, seed=0) -> SyntheticScene:
    """Deterministic synthetic scene for ``seed``."""
    cfg = config if isinstance(config, SceneConfig) else SceneConfig.from_dict(config or {})
    if cfg.n_stations < cfg.window:
        raise SceneError("need at least one full window of stations")
    rng = np.random.default_rng(seed)
    calib, T_e = make_calibration(cfg)
    poses = make_poses(cfg)
    boxes = default_boxes(cfg.layout)
    planter = _Planter(cfg, calib, poses, boxes, rng)

    n = cfg.n_stations
    starts = range(n) if cfg.layout == "loop" else range(n - cfg.window + 1)
    window_pairs = set()
    for s in starts:
        members = _window_members(cfg, s)
        anchor = members[len(members) // 2]
        images = [(m, side) for m in members for side in (0, 1)]
        got = planter.plant_group(anchor, images, cfg.features_per_window, drop_prob=cfg.drop_prob)
        if got < cfg.features_per_window // 2:
            raise SceneError(f"window at station {s}: only {got} visible features")
        for a in members:
            for b in members:
                if a < b:
                    window_pairs.add((a, b))

    taken = set(window_pairs)
    three = _choose_pairs(cfg, cfg.three_view_hop, cfg.three_view_pairs, taken, rng) if cfg.three_view_pairs else []
    three_cases = {}
    for a, b in three:
        case = THREE_VIEW_CASES[int(rng.integers(len(THREE_VIEW_CASES)))]
        images = [(a if off == 0 else b, side) for off, side in _CASE_IMAGES[case]]
        got = planter.plant_group(a, images, cfg.features_per_pair)
        if got < cfg.features_per_pair:
            raise SceneError(f"3-view pair {(a, b)}: only {got} visible features")
        three_cases[(a, b)] = case

    n_true = len(window_pairs) + len(three)
    n_twins = int(round(cfg.ambiguity_fraction * n_true))
    twins = _choose_pairs(cfg, cfg.ambiguity_hop, n_twins, taken, rng) if n_twins else []
    twin_T = {}
    for k, (a, b) in enumerate(twins):
        R_d, t_d = _twin_displacement(rng, small_rotation=(k % 2 == 0))
        D = RigidTransform(R_d, poses[b].R.T @ t_d)  # displacement of b, expressed in b's frame
        false_b = poses[b] @ D
        F = poses[a].inverse() @ false_b
        images = [(a, 0), (a, 1), (b, 0), (b, 1)]
        got = planter.plant_group(a, images, cfg.features_per_twin, false_pose=(b, false_b))
        # the false view rarely sees all of them; half still makes a well-supported false edge
        if got < cfg.features_per_twin // 2:
            raise SceneError(f"twin pair {(a, b)}: only {got} visible features")
        twin_T[(a, b)] = F

    # descriptors and feature files
    dim = cfg.descriptor_dim
    base = rng.normal(size=(planter.next_id, dim))
    base /= np.linalg.norm(base, axis=1, keepdims=True)
    features, feature_ids = {}, {}
    for st in range(n):
        for side in (0, 1):
            img = image_id(st, side)
            obs = planter.obs.get(img, [])
            uv = np.array([o[0] for o in obs]).reshape(-1, 2)
            ids = np.array([o[1] for o in obs], dtype=np.int64)
            if cfg.pixel_noise > 0 and len(uv):
                uv = uv + rng.normal(0.0, cfg.pixel_noise, uv.shape)
            desc = base[ids] + rng.normal(0.0, cfg.descriptor_noise, (len(ids), dim)) if len(ids) else np.zeros((0, dim))
            nd = cfg.distractors
            d_uv = np.column_stack([rng.uniform(0, cfg.width - 1, nd), rng.uniform(0, cfg.height - 1, nd)])
            d_desc = rng.normal(size=(nd, dim))
            d_desc /= np.linalg.norm(d_desc, axis=1, keepdims=True)
            order = rng.permutation(len(ids) + nd)
            xy = np.vstack([uv, d_uv])[order]
            de = np.vstack([desc, d_desc])[order]
            fid = np.concatenate([ids, np.full(nd, -1, dtype=np.int64)])[order]
            features[img] = FeatureSet(img, xy, de)
            feature_ids[img] = fid

    clouds = {st: simulate_cloud(poses[st], T_e, boxes, cfg, rng) for st in range(n)}
    return SyntheticScene(
        cfg, calib, T_e, poses, boxes, features, feature_ids, clouds, planter.points, planter.track_images,
        twin_pairs=twins, twin_transforms=twin_T, three_view_pairs=[(a, b, three_cases[(a, b)]) for a, b in three],
        window_pairs=sorted(window_pairs),
    )


def planted_tracks(scene: SyntheticScene):
    """Tracks exactly as perfect matching would assemble them from the feature files."""
    where = {}
    for img in sorted(scene.feature_ids):
        for f, tid in enumerate(scene.feature_ids[img]):
            if tid >= 0:
                where.setdefault(int(tid), []).append((img, f))
    tracks = []
    for tid in sorted(where):
        obs = sorted(where[tid])
        if len(obs) < 2:
            continue
        imgs = np.array([o[0] for o in obs])
        feats = np.array([o[1] for o in obs])
        pix = np.array([scene.features[i].xy[f] for i, f in obs])
        tracks.append(Track(len(tracks), imgs // 2, imgs % 2, feats, pix))
    return tracks


def track_planted_id(track, scene: SyntheticScene):
    """Majority planted id of a track's inlier observations (all of them if unset; -1 if none)."""
    sel = track.inliers if track.inliers is not None else np.ones(len(track), dtype=bool)
    ids = [int(scene.feature_ids[int(img)][int(f)])
           for img, f, keep in zip(track.images, track.feature_idx, sel) if keep]
    ids = [i for i in ids if i >= 0]
    if not ids:
        return -1
    vals, counts = np.unique(ids, return_counts=True)
    return int(vals[np.argmax(counts)])


# ---------------------------------------------------------------------------
# evaluation


def _pose_points(poses, ids):
    pts = []
    for s in ids:
        T = poses[s]
        pts.append(np.vstack([T.t, T.t + T.R[:, 0], T.t + T.R[:, 1], T.t + T.R[:, 2]]))
    return np.vstack(pts)


def align_poses(estimated, truth):
    """Rigid transform ``G`` minimising the spread between ``G T_est`` and ``T_gt``.

    Fitted on each pose's origin and unit axis tips.
    """
    ids = sorted(estimated)
    if sorted(truth) != ids and not set(ids) <= set(truth):
        raise SceneError("estimated station ids are not a subset of ground truth")
    src = _pose_points(estimated, ids)
    dst = _pose_points(truth, ids)
    R, t, _ = rigid_align(src, dst)
    return RigidTransform(R, t)


def ate(estimated, truth, G=None):
    """(rotation RMS deg, translation RMS m) after gauge alignment."""
    ids = sorted(estimated)
    missing = set(ids) - set(truth)
    if missing:
        raise SceneError(f"unknown station ids {sorted(missing)}")
    G = align_poses(estimated, truth) if G is None else G
    rot, tr = [], []
    for s in ids:
        A = G @ estimated[s]
        d = truth[s].inverse() @ A
        rot.append(np.degrees(d.angle))
        tr.append(np.linalg.norm(A.t - truth[s].t))
    return float(np.sqrt(np.mean(np.square(rot)))), float(np.sqrt(np.mean(np.square(tr))))


def evaluate(scene: SyntheticScene, poses, tracks=None, extrinsic=None, edges=None, survivors=None):
    """Metrics of an estimate against the scene's ground truth."""
    G = align_poses(poses, scene.poses)
    rot, tr = ate(poses, scene.poses, G)
    out = {"stations": len(poses), "ate_rot_deg": rot, "ate_trans_m": tr}
    if extrinsic is not None:
        d = scene.extrinsic.inverse() @ extrinsic
        out["extrinsic_rot_deg"] = float(np.degrees(d.angle))
        out["extrinsic_trans_m"] = float(np.linalg.norm(extrinsic.t - scene.extrinsic.t))
    if tracks:
        errs = []
        for tr_ in tracks:
            pid = track_planted_id(tr_, scene)
            if pid >= 0 and tr_.point is not None:
                errs.append(np.linalg.norm(G.apply(tr_.point) - scene.points[pid]))
        out["structure_rms_m"] = float(np.sqrt(np.mean(np.square(errs)))) if errs else None
        out["structure_points"] = len(errs)
    if edges is not None:
        labels = label_outliers(edges, scene.poses)
        out["edge_outliers"] = int(sum(labels.values()))
        if survivors is not None:
            out["confusion"] = confusion_report(edges, survivors, labels)
    return out
