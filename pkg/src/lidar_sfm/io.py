"""File formats shared by the pipeline stages.

Binary formats are little-endian. Text formats write floats with ``repr`` so
that every value reads back bit-for-bit. Parse failures raise
:class:`ParseError` carrying the byte offset of the offending record.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .correspondence import FeatureSet, Track, VerifiedMatchSet
from .geom import CameraModel, Calibration, RigidTransform
from .relmotion import MotionEdge


class ParseError(ValueError):
    def __init__(self, path, offset, message):
        super().__init__(f"{path}: byte {offset}: {message}")
        self.path = str(path)
        self.offset = offset


def _f(x):
    return repr(float(x))


def _write_atomic(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def _text_records(path):
    """Non-empty, non-comment lines as ``(byte offset, fields)``."""
    data = Path(path).read_bytes()
    offset = 0
    for raw in data.splitlines(keepends=True):
        line = raw.decode("utf-8", errors="replace").strip()
        if line and not line.startswith("#"):
            yield offset, line.split()
        offset += len(raw)


def _floats(path, offset, fields):
    try:
        return [float(v) for v in fields]
    except ValueError as exc:
        raise ParseError(path, offset, str(exc)) from None


def _ints(path, offset, fields):
    try:
        return [int(v) for v in fields]
    except ValueError as exc:
        raise ParseError(path, offset, str(exc)) from None


# ---------------------------------------------------------------------------
# PLY


_PLY_COLOR = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("red", "u1"), ("green", "u1"), ("blue", "u1")])
_PLY_TYPES = {"float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8", "uchar": "u1", "uint8": "u1",
              "int": "<i4", "int32": "<i4", "uint": "<u4", "uint32": "<u4", "short": "<i2", "ushort": "<u2"}


def write_ply(path, points, color=None):
    """Binary little-endian PLY with float32 xyz, plus a uniform uchar colour if given."""
    pts = np.asarray(points, dtype="<f4").reshape(-1, 3)
    head = ["ply", "format binary_little_endian 1.0", f"element vertex {len(pts)}",
            "property float x", "property float y", "property float z"]
    if color is not None:
        head += ["property uchar red", "property uchar green", "property uchar blue"]
        rec = np.zeros(len(pts), dtype=_PLY_COLOR)
        rec["x"], rec["y"], rec["z"] = pts[:, 0], pts[:, 1], pts[:, 2]
        rec["red"], rec["green"], rec["blue"] = color
        body = rec.tobytes()
    else:
        body = np.ascontiguousarray(pts).tobytes()
    head.append("end_header")
    _write_atomic(path, ("\n".join(head) + "\n").encode("ascii") + body)


def read_ply(path):
    """xyz of a binary little-endian PLY vertex element as float32 ``(n, 3)``."""
    data = Path(path).read_bytes()
    if not data.startswith(b"ply\n"):
        raise ParseError(path, 0, "missing 'ply' magic")
    end = data.find(b"end_header\n")
    if end < 0:
        raise ParseError(path, len(data), "header has no end_header line")
    body_start = end + len(b"end_header\n")
    count = None
    props = []
    offset = 0
    in_vertex = False
    for raw in data[:end].splitlines(keepends=True):
        f = raw.decode("ascii", errors="replace").split()
        if not f or f[0] in ("ply", "comment", "obj_info"):
            pass
        elif f[0] == "format":
            if len(f) < 2 or f[1] != "binary_little_endian":
                raise ParseError(path, offset, f"unsupported format {' '.join(f[1:])!r}")
        elif f[0] == "element":
            if count is not None and in_vertex:
                raise ParseError(path, offset, "only a single vertex element is supported")
            in_vertex = len(f) == 3 and f[1] == "vertex"
            if not in_vertex:
                raise ParseError(path, offset, f"unsupported element {' '.join(f[1:])!r}")
            try:
                count = int(f[2])
            except ValueError:
                raise ParseError(path, offset, f"bad vertex count {f[2]!r}") from None
            if count < 0:
                raise ParseError(path, offset, "negative vertex count")
        elif f[0] == "property":
            if len(f) != 3 or f[1] not in _PLY_TYPES:
                raise ParseError(path, offset, f"unsupported property {' '.join(f[1:])!r}")
            props.append((f[2], _PLY_TYPES[f[1]]))
        else:
            raise ParseError(path, offset, f"unexpected header line {f[0]!r}")
        offset += len(raw)
    if count is None:
        raise ParseError(path, end, "no vertex element")
    names = [n for n, _ in props]
    if names[:3] != ["x", "y", "z"]:
        raise ParseError(path, end, "vertex properties must start with x, y, z")
    dtype = np.dtype(props)
    need = count * dtype.itemsize
    have = len(data) - body_start
    if have < need:
        whole = have // dtype.itemsize if dtype.itemsize else 0
        raise ParseError(path, body_start + whole * dtype.itemsize,
                         f"truncated body: {count} vertices declared, {whole} complete")
    if have > need:
        raise ParseError(path, body_start + need, f"{have - need} trailing bytes after the vertex data")
    rec = np.frombuffer(data, dtype=dtype, count=count, offset=body_start)
    out = np.empty((count, 3), dtype=np.float32)
    out[:, 0], out[:, 1], out[:, 2] = rec["x"], rec["y"], rec["z"]
    return out


# ---------------------------------------------------------------------------
# features


_FEAT_MAGIC = b"LSFEAT01"
_FEAT_HEAD = struct.Struct("<8sQQ")


def write_features(path, fs: FeatureSet):
    """Header ``(magic, count, descriptor dim)`` then float64 rows ``x, y, descriptor...``."""
    rows = np.column_stack([fs.xy, fs.descriptors]).astype("<f8") if len(fs) else np.zeros((0, 2 + fs.dim), "<f8")
    _write_atomic(path, _FEAT_HEAD.pack(_FEAT_MAGIC, len(fs), fs.dim) + rows.tobytes())


def read_features(path, image_id: int) -> FeatureSet:
    data = Path(path).read_bytes()
    if len(data) < _FEAT_HEAD.size:
        raise ParseError(path, len(data), "truncated header")
    magic, count, dim = _FEAT_HEAD.unpack_from(data)
    if magic != _FEAT_MAGIC:
        raise ParseError(path, 0, "not a feature file")
    row = (2 + dim) * 8
    need = _FEAT_HEAD.size + count * row
    if len(data) < need:
        done = (len(data) - _FEAT_HEAD.size) // row
        raise ParseError(path, _FEAT_HEAD.size + done * row, f"truncated: {count} features declared, {done} complete")
    if len(data) > need:
        raise ParseError(path, need, "trailing bytes after the last feature")
    rows = np.frombuffer(data, dtype="<f8", count=count * (2 + dim), offset=_FEAT_HEAD.size).reshape(count, 2 + dim)
    return FeatureSet(image_id, rows[:, :2].astype(np.float64), rows[:, 2:].astype(np.float64))


# ---------------------------------------------------------------------------
# calibration


def calibration_to_dict(calib: Calibration):
    def cam(c: CameraModel):
        return {"K": c.K.tolist(), "width": c.width, "height": c.height,
                "cam_from_station": _transform_list(c.cam_from_station)}

    return {"left": cam(calib.left), "right": cam(calib.right), "extrinsic": _transform_list(calib.extrinsic)}


def calibration_from_dict(d) -> Calibration:
    def cam(c):
        return CameraModel(np.array(c["K"], dtype=np.float64), cam_from_station=_transform_from_list(c["cam_from_station"]),
                           width=int(c["width"]), height=int(c["height"]))

    return Calibration(cam(d["left"]), cam(d["right"]), _transform_from_list(d["extrinsic"]))


def _transform_list(T: RigidTransform):
    return [float(v) for v in T.R.ravel()] + [float(v) for v in T.t]


def _transform_from_list(v):
    v = np.asarray(v, dtype=np.float64)
    if v.shape == (7,):  # quaternion (w, x, y, z) + translation
        return RigidTransform.from_quaternion(v[:4], v[4:])
    if v.shape != (12,):
        raise ValueError(f"transform needs 12 (matrix) or 7 (quaternion) numbers, got {v.size}")
    return RigidTransform(v[:9].reshape(3, 3), v[9:], check=False)


def write_calibration(path, calib: Calibration):
    write_json(path, calibration_to_dict(calib))


def read_calibration(path) -> Calibration:
    return calibration_from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# poses


def write_poses(path, poses: dict):
    """``station r00 .. r22 tx ty tz`` per line, world-from-station."""
    lines = ["# station r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz"]
    for s in sorted(poses):
        lines.append(" ".join([str(int(s))] + [_f(v) for v in _transform_list(poses[s])]))
    _write_atomic(path, ("\n".join(lines) + "\n").encode())


def read_poses(path) -> dict:
    """Reads matrix lines (13 fields) or quaternion lines ``station qw qx qy qz tx ty tz`` (8 fields)."""
    out = {}
    for off, f in _text_records(path):
        if len(f) not in (8, 13):
            raise ParseError(path, off, f"pose line has {len(f)} fields, expected 13 or 8")
        s = _ints(path, off, f[:1])[0]
        vals = _floats(path, off, f[1:])
        try:
            T = _transform_from_list(vals)
        except ValueError as exc:
            raise ParseError(path, off, str(exc)) from None
        if s in out:
            raise ParseError(path, off, f"duplicate station {s}")
        out[s] = T
    return out


# ---------------------------------------------------------------------------
# edges


_EDGE_FIELDS = "i j case support state passed involved r_ij r_ji r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz"


def write_edges(path, edges):
    lines = ["# " + _EDGE_FIELDS]
    for e in sorted(edges, key=lambda e: e.key):
        r = e.ratios if e.ratios is not None else (None, None)
        ratio = ["-" if x is None else _f(x) for x in r]
        lines.append(" ".join([str(e.i), str(e.j), e.case, str(e.support), e.state, str(e.passed), str(e.involved)]
                              + ratio + [_f(v) for v in _transform_list(e.transform)]))
    _write_atomic(path, ("\n".join(lines) + "\n").encode())


def read_edges(path) -> list:
    n_fields = len(_EDGE_FIELDS.split())
    out = []
    for off, f in _text_records(path):
        if len(f) != n_fields:
            raise ParseError(path, off, f"edge line has {len(f)} fields, expected {n_fields}")
        i, j, support, passed, involved = _ints(path, off, [f[0], f[1], f[3], f[5], f[6]])
        ratios = tuple(None if x == "-" else _floats(path, off, [x])[0] for x in f[7:9])
        T = _transform_from_list(_floats(path, off, f[9:]))
        out.append(MotionEdge(i, j, T, f[2], support, f[4], passed, involved,
                              None if ratios == (None, None) else ratios))
    return out


# ---------------------------------------------------------------------------
# matches


def write_matches(path, verified):
    """``P pair a b f00..f22`` headers followed by ``M pair idx_a idx_b`` triples."""
    lines = ["# P pair image_a image_b F(row-major); M pair idx_a idx_b"]
    for k, v in enumerate(verified):
        lines.append(" ".join(["P", str(k), str(v.image_a), str(v.image_b)] + [_f(x) for x in v.F.ravel()]))
        lines.extend(f"M {k} {a} {b}" for a, b in v.pairs)
    _write_atomic(path, ("\n".join(lines) + "\n").encode())


def read_matches(path) -> list:
    heads, pairs = {}, {}
    for off, f in _text_records(path):
        if f[0] == "P" and len(f) == 13:
            k, a, b = _ints(path, off, f[1:4])
            heads[k] = (a, b, np.array(_floats(path, off, f[4:])).reshape(3, 3))
            pairs[k] = []
        elif f[0] == "M" and len(f) == 4:
            k, ia, ib = _ints(path, off, f[1:])
            if k not in pairs:
                raise ParseError(path, off, f"match row for undeclared pair {k}")
            pairs[k].append((ia, ib))
        else:
            raise ParseError(path, off, f"unrecognised record {f[0]!r} with {len(f)} fields")
    return [VerifiedMatchSet(heads[k][0], heads[k][1], np.array(pairs[k], dtype=np.int64).reshape(-1, 2), heads[k][2])
            for k in sorted(heads)]


# ---------------------------------------------------------------------------
# tracks


def write_tracks(path, tracks):
    """One line per track: ``id n x y z`` then ``n`` groups of ``station side feature u v inlier``.

    Untriangulated tracks write ``nan`` coordinates; an unset inlier mask writes ``-1`` flags.
    """
    lines = ["# id n x y z {station side feature u v inlier}*n"]
    for t in tracks:
        X = t.point if t.point is not None else (np.nan, np.nan, np.nan)
        head = [str(int(t.track_id)), str(len(t))] + [_f(v) for v in X]
        inl = t.inliers if t.inliers is not None else None
        obs = []
        for o in range(len(t)):
            flag = "-1" if inl is None else str(int(bool(inl[o])))
            obs += [str(int(t.stations[o])), str(int(t.sides[o])), str(int(t.feature_idx[o])),
                    _f(t.pixels[o, 0]), _f(t.pixels[o, 1]), flag]
        lines.append(" ".join(head + obs))
    _write_atomic(path, ("\n".join(lines) + "\n").encode())


def read_tracks(path) -> list:
    out = []
    for off, f in _text_records(path):
        if len(f) < 5:
            raise ParseError(path, off, "track line too short")
        tid, n = _ints(path, off, f[:2])
        if len(f) != 5 + 6 * n:
            raise ParseError(path, off, f"track {tid}: {len(f)} fields for {n} observations")
        X = np.array(_floats(path, off, f[2:5]))
        obs = np.array(f[5:], dtype=object).reshape(n, 6) if n else np.zeros((0, 6), dtype=object)
        st = _ints(path, off, obs[:, 0])
        sd = _ints(path, off, obs[:, 1])
        fi = _ints(path, off, obs[:, 2])
        px = np.array(_floats(path, off, obs[:, 3:5].ravel())).reshape(n, 2)
        flags = _ints(path, off, obs[:, 5])
        inl = None if any(v < 0 for v in flags) else np.array(flags, dtype=bool)
        out.append(Track(tid, st, sd, fi, px, None if np.all(np.isnan(X)) else X, inl))
    return out


# ---------------------------------------------------------------------------
# ground-truth tables


def write_points(path, points: dict):
    """``id x y z`` per line."""
    lines = [f"{int(k)} {' '.join(_f(v) for v in points[k])}" for k in sorted(points)]
    _write_atomic(path, ("\n".join(lines) + "\n" if lines else "").encode())


def read_points(path) -> dict:
    out = {}
    for off, f in _text_records(path):
        if len(f) != 4:
            raise ParseError(path, off, f"expected 4 fields, got {len(f)}")
        out[_ints(path, off, f[:1])[0]] = np.array(_floats(path, off, f[1:]))
    return out


def write_feature_ids(path, ids: dict):
    """``image id0 id1 ...``; ``-1`` marks a feature with no planted point."""
    lines = [" ".join([str(int(k))] + [str(int(v)) for v in ids[k]]) for k in sorted(ids)]
    _write_atomic(path, ("\n".join(lines) + "\n" if lines else "").encode())


def read_feature_ids(path) -> dict:
    out = {}
    for off, f in _text_records(path):
        v = _ints(path, off, f)
        out[v[0]] = np.array(v[1:], dtype=np.int64)
    return out


# ---------------------------------------------------------------------------
# JSON reports


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return v if np.isfinite(v) else None
    return x


def write_json(path, obj):
    _write_atomic(path, (json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n").encode())


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(path, exc.pos, exc.msg) from None


def config_hash(config: dict) -> str:
    """Stable hash of a configuration mapping (key order and whitespace ignored)."""
    blob = json.dumps(_jsonable(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
