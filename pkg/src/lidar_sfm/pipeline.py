"""Stage runners behind the command line.

Every stage reads its inputs from, and writes its outputs to, one data
directory. Stages recompute from scratch, so rerunning a stage on unchanged
inputs rewrites byte-identical files. Reports carry counts and the config
hash, never wall-clock times; those go to the log.
"""
from __future__ import annotations

import logging
import os
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import io
from .correspondence import build_tracks, match_all
from .geom import Calibration
from .globalinit import GraphError, edge_residuals, initialize
from .harness import GroundTruth, SceneConfig, evaluate, generate
from .jointrefine import JointConfig, alternate
from .relmotion import RelposeConfig, estimate_all_edges
from .triangulation import TriangulationConfig, triangulate_tracks
from .validation import ValidationConfig, baseline_checks, build_grids, validate_edges

log = logging.getLogger(__name__)

DATA_ENV = "LIDAR_SFM_DATA"
STAGES = ("synth", "match", "relpose", "validate", "init", "triangulate", "refine", "eval", "run")
RUN_ORDER = ("match", "relpose", "validate", "init", "triangulate", "refine")

# file name -> stage that writes it
FILES = {
    "calibration.json": "synth",
    "features": "synth",
    "clouds": "synth",
    "truth": "synth",
    "matches.txt": "match",
    "tracks_matched.txt": "match",
    "edges_raw.txt": "relpose",
    "edges.txt": "validate",
    "poses_init.txt": "init",
    "tracks.txt": "triangulate",
    "poses.txt": "refine",
    "tracks_refined.txt": "refine",
    "calibration_refined.json": "refine",
}


class MissingInputError(FileNotFoundError):
    pass


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration

SECTIONS = {
    "synth": SceneConfig,
    "relpose": RelposeConfig,
    "validate": ValidationConfig,
    "triangulate": TriangulationConfig,
    "refine": JointConfig,
}
MATCH_DEFAULTS = {"ratio": 0.8, "threshold_px": 4.0, "iterations": 2048, "min_inliers": 15}
VALIDATE_EXTRA = {"baseline": "none"}
INIT_DEFAULTS = {"max_iterations": 100}
# keys the pipeline owns; they are set from the root seed/threads
_OWNED = {"seed", "threads"}


def _section(cls, raw, name):
    known = {f.name for f in fields(cls)} - _OWNED
    extra = {"validate": set(VALIDATE_EXTRA)}.get(name, set())
    bad = set(raw) - known - extra
    if bad:
        raise ConfigError(f"unknown keys in section {name!r}: {sorted(bad)}")
    return raw


def resolve_config(raw: dict | None, seed=None, threads=None, data_dir=None, overrides=None) -> dict:
    """Merge a root config with defaults and command-line overrides.

    The result is a plain nested dict. ``overrides`` maps section name to a
    dict of keys that replace the file's values.
    """
    raw = dict(raw or {})
    unknown = set(raw) - set(SECTIONS) - {"match", "init", "seed", "threads", "data_dir"}
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
    cfg = {
        "seed": int(raw.get("seed", 0) if seed is None else seed),
        "threads": int(raw.get("threads", 0) if threads is None else threads),
        "data_dir": str(data_dir or raw.get("data_dir") or os.environ.get(DATA_ENV) or "lidar_sfm_data"),
    }
    if cfg["threads"] <= 0:
        cfg["threads"] = os.cpu_count() or 1
    for name, cls in SECTIONS.items():
        sec = _section(cls, dict(raw.get(name) or {}), name)
        base = asdict(cls())
        for k in _OWNED:
            base.pop(k, None)
        if name == "validate":
            base.update(VALIDATE_EXTRA)
        base.update(sec)
        cfg[name] = base
    for name, defaults in (("match", MATCH_DEFAULTS), ("init", INIT_DEFAULTS)):
        sec = dict(raw.get(name) or {})
        bad = set(sec) - set(defaults)
        if bad:
            raise ConfigError(f"unknown keys in section {name!r}: {sorted(bad)}")
        cfg[name] = {**defaults, **sec}
    for name, vals in (overrides or {}).items():
        cfg[name].update({k: v for k, v in vals.items() if v is not None})
    if cfg["validate"]["baseline"] not in ("none", "rc", "tc"):
        raise ConfigError(f"baseline must be none, rc or tc, not {cfg['validate']['baseline']!r}")
    return cfg


def config_identity(cfg: dict) -> str:
    """Hash of everything that can change an artifact (not threads or paths)."""
    return io.config_hash({k: v for k, v in cfg.items() if k not in ("threads", "data_dir")})


def _make(cls, cfg, name, **extra):
    sec = {k: v for k, v in cfg[name].items() if k in {f.name for f in fields(cls)}}
    if cls is SceneConfig:
        return SceneConfig.from_dict(sec)
    return cls(**sec, **extra)


# ---------------------------------------------------------------------------
# file access


class Workspace:
    def __init__(self, root):
        self.root = Path(root)

    def path(self, name):
        return self.root / name

    def need(self, name, stage):
        p = self.root / name
        if not p.exists():
            producer = FILES.get(name.split("/")[0], "?")
            raise MissingInputError(
                f"stage {stage!r} needs {p}, which is written by stage {producer!r}; run that stage first")
        return p

    def feature_path(self, img):
        return self.root / "features" / f"image_{img:05d}.feat"

    def cloud_path(self, station):
        return self.root / "clouds" / f"station_{station:04d}.ply"

    def features(self, stage):
        d = self.need("features", stage)
        out = {}
        for p in sorted(d.glob("image_*.feat")):
            img = int(p.stem.split("_")[1])
            out[img] = io.read_features(p, img)
        if not out:
            raise MissingInputError(f"stage {stage!r}: no feature files in {d}")
        return out

    def clouds(self, stations, stage):
        self.need("clouds", stage)
        out = {}
        for s in stations:
            p = self.cloud_path(s)
            out[s] = io.read_ply(p).astype(np.float64) if p.exists() else None
        return out

    def calibration(self, stage) -> Calibration:
        return io.read_calibration(self.need("calibration.json", stage))


def _report(ws: Workspace, name, cfg, stage, body):
    io.write_json(ws.path(name), {"stage": stage, "config_hash": config_identity(cfg), "seed": cfg["seed"], **body})


# ---------------------------------------------------------------------------
# stages


def stage_synth(cfg, ws: Workspace):
    scene = generate(_make(SceneConfig, cfg, "synth"), seed=cfg["seed"])
    ws.root.mkdir(parents=True, exist_ok=True)
    for d in ("features", "clouds", "truth"):
        ws.path(d).mkdir(exist_ok=True)
    io.write_calibration(ws.path("calibration.json"), scene.calib)
    for img in sorted(scene.features):
        io.write_features(ws.feature_path(img), scene.features[img])
    for s in sorted(scene.clouds):
        io.write_ply(ws.cloud_path(s), scene.clouds[s])
    io.write_poses(ws.path("truth/poses.txt"), scene.poses)
    io.write_calibration(ws.path("truth/calibration.json"), scene.calib)
    io.write_points(ws.path("truth/points.txt"), scene.points)
    io.write_feature_ids(ws.path("truth/feature_ids.txt"), scene.feature_ids)
    _report(ws, "truth/scene.json", cfg, "synth", {
        "scene": scene.config.to_dict(),
        "twin_pairs": scene.twin_pairs,
        "three_view_pairs": scene.three_view_pairs,
        "images": len(scene.features),
        "stations": len(scene.poses),
    })
    return {"images": len(scene.features), "stations": len(scene.poses), "points": len(scene.points)}


def stage_match(cfg, ws: Workspace):
    feats = ws.features("match")
    m = cfg["match"]
    verified, rep = match_all(feats, m["ratio"], m["threshold_px"], m["iterations"], cfg["seed"],
                              m["min_inliers"], cfg["threads"])
    tracks = build_tracks(verified, feats)
    io.write_matches(ws.path("matches.txt"), verified)
    io.write_tracks(ws.path("tracks_matched.txt"), tracks)
    _report(ws, "match_report.json", cfg, "match", {**rep, "tracks": len(tracks)})
    return {"verified_pairs": len(verified), "tracks": len(tracks)}


def stage_relpose(cfg, ws: Workspace):
    tracks = io.read_tracks(ws.need("tracks_matched.txt", "relpose"))
    calib = ws.calibration("relpose")
    edges, rep = estimate_all_edges(tracks, calib, _make(RelposeConfig, cfg, "relpose", seed=cfg["seed"]),
                                    cfg["threads"])
    io.write_edges(ws.path("edges_raw.txt"), edges)
    _report(ws, "relpose_report.json", cfg, "relpose", rep)
    return {"edges": len(edges)}


def _residual_check(vcfg: ValidationConfig):
    def check(survivors):
        try:
            poses, _ = initialize(survivors)
        except (GraphError, ValueError):
            return False
        used = [e for e in survivors if e.i in poses and e.j in poses]
        res = edge_residuals(used, poses)
        return any(a > vcfg.angle_thresh_deg or t > vcfg.trans_thresh_m for a, t in res.values())
    return check


def stage_validate(cfg, ws: Workspace):
    edges = io.read_edges(ws.need("edges_raw.txt", "validate"))
    calib = ws.calibration("validate")
    vcfg = _make(ValidationConfig, cfg, "validate")
    mode = cfg["validate"]["baseline"]
    if mode != "none":
        survivors = baseline_checks(edges, mode, vcfg.angle_thresh_deg, vcfg.trans_thresh_m)
        for e in edges:
            e.state = "cycle-fail"
        rep = {"baseline": mode, "edges_in": len(edges), "survivors": len(survivors)}
    else:
        stations = sorted({e.i for e in edges} | {e.j for e in edges})
        clouds = ws.clouds(stations, "validate")
        missing = [s for s, c in clouds.items() if c is None]
        if missing:
            log.warning("no LiDAR scan for stations %s; their grid checks pass by default", missing)
        grids = build_grids({s: c for s, c in clouds.items() if c is not None}, vcfg.voxel_size, vcfg.max_range,
                            vcfg.carve_margin, cfg["threads"])
        survivors, rep = validate_edges(edges, grids, calib.extrinsic, vcfg, _residual_check(vcfg), cfg["threads"])
        rep["baseline"] = "none"
    alive = {e.key for e in survivors}
    for e in edges:
        if e.key in alive:
            e.state = "accepted"
    io.write_edges(ws.path("edges.txt"), survivors)
    io.write_edges(ws.path("edges_labelled.txt"), edges)
    _report(ws, "validation_report.json", cfg, "validate", rep)
    return {"edges_in": len(edges), "survivors": len(survivors)}


def stage_init(cfg, ws: Workspace):
    from .solver import SolverOptions

    edges = io.read_edges(ws.need("edges.txt", "init"))
    if not edges:
        raise GraphError("no validated edges to initialise from")
    poses, rep = initialize(edges, SolverOptions(max_iterations=cfg["init"]["max_iterations"]))
    io.write_poses(ws.path("poses_init.txt"), poses)
    _report(ws, "init_report.json", cfg, "init", rep)
    return {"stations": len(poses)}


def stage_triangulate(cfg, ws: Workspace):
    tracks = io.read_tracks(ws.need("tracks_matched.txt", "triangulate"))
    poses = io.read_poses(ws.need("poses_init.txt", "triangulate"))
    calib = ws.calibration("triangulate")
    usable = [t for t in tracks if sum(int(s) in poses for s in t.stations) >= 2]
    kept, rep = triangulate_tracks(usable, poses, calib, _make(TriangulationConfig, cfg, "triangulate",
                                                              seed=cfg["seed"]), cfg["threads"])
    io.write_tracks(ws.path("tracks.txt"), kept)
    _report(ws, "triangulation_report.json", cfg, "triangulate", {**rep, "tracks_without_poses": len(tracks) - len(usable)})
    return {"triangulated": len(kept)}


def stage_refine(cfg, ws: Workspace):
    tracks = io.read_tracks(ws.need("tracks.txt", "refine"))
    poses = io.read_poses(ws.need("poses_init.txt", "refine"))
    calib = ws.calibration("refine")
    jcfg = _make(JointConfig, cfg, "refine", seed=cfg["seed"], threads=cfg["threads"])
    clouds = ws.clouds(sorted(poses), "refine")
    res = alternate(poses, tracks, clouds, calib, jcfg)
    refined = calib.with_extrinsic(res.extrinsic)
    io.write_poses(ws.path("poses.txt"), res.poses)
    io.write_tracks(ws.path("tracks_refined.txt"), res.tracks)
    io.write_calibration(ws.path("calibration_refined.json"), refined)
    pts = np.array([t.point for t in res.tracks]).reshape(-1, 3)
    io.write_ply(ws.path("structure.ply"), pts, color=(255, 0, 0))
    merged = [(res.poses[s] @ res.extrinsic).apply(c) for s, c in sorted(clouds.items())
              if c is not None and s in res.poses]
    io.write_ply(ws.path("lidar_merged.ply"), np.concatenate(merged) if merged else np.zeros((0, 3)))
    _report(ws, "refine_report.json", cfg, "refine", res.report)
    return {"iterations": res.report["iterations"], "converged": res.report["converged"],
            "structure_points": len(res.tracks)}


def load_truth(ws: Workspace) -> GroundTruth:
    tdir = ws.need("truth", "eval")
    poses = io.read_poses(tdir / "poses.txt")
    calib = io.read_calibration(tdir / "calibration.json")
    return GroundTruth(poses, calib.extrinsic, io.read_points(tdir / "points.txt"),
                       io.read_feature_ids(tdir / "feature_ids.txt"))


def stage_eval(cfg, ws: Workspace):
    truth = load_truth(ws)
    out = {}
    if ws.path("poses_init.txt").exists():
        out["init"] = evaluate(truth, io.read_poses(ws.path("poses_init.txt")),
                               io.read_tracks(ws.path("tracks.txt")) if ws.path("tracks.txt").exists() else None)
    if ws.path("poses.txt").exists():
        out["refined"] = evaluate(truth, io.read_poses(ws.path("poses.txt")),
                                  io.read_tracks(ws.path("tracks_refined.txt")),
                                  io.read_calibration(ws.path("calibration_refined.json")).extrinsic)
    if ws.path("edges_raw.txt").exists() and ws.path("edges.txt").exists():
        raw = io.read_edges(ws.path("edges_raw.txt"))
        kept = {e.key for e in io.read_edges(ws.path("edges.txt"))}
        out["edges"] = evaluate(truth, truth.poses, edges=raw, survivors=[e for e in raw if e.key in kept])
    if not out:
        raise MissingInputError("stage 'eval' found nothing to evaluate; run 'init' or 'refine' first")
    _report(ws, "eval_report.json", cfg, "eval", out)
    return {k: v.get("ate_trans_m") for k, v in out.items() if "ate_trans_m" in v}


RUNNERS = {
    "synth": stage_synth,
    "match": stage_match,
    "relpose": stage_relpose,
    "validate": stage_validate,
    "init": stage_init,
    "triangulate": stage_triangulate,
    "refine": stage_refine,
    "eval": stage_eval,
}


def run_stage(stage: str, cfg: dict):
    """Run one stage (or ``run`` for match through refine, plus eval when truth exists)."""
    ws = Workspace(cfg["data_dir"])
    if stage == "run":
        out = {}
        for s in RUN_ORDER:
            out[s] = run_stage(s, cfg)
        if ws.path("truth").exists():
            out["eval"] = run_stage("eval", cfg)
        return out
    if stage not in RUNNERS:
        raise ConfigError(f"unknown stage {stage!r}; expected one of {', '.join(STAGES)}")
    t0 = time.perf_counter()
    summary = RUNNERS[stage](cfg, ws)
    log.info("stage=%s seconds=%.2f %s", stage, time.perf_counter() - t0,
             " ".join(f"{k}={v}" for k, v in summary.items()))
    return summary
