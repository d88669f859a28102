import filecmp
import json
import subprocess
import sys

import pytest
import yaml

from lidar_sfm import cli
from lidar_sfm.io import read_edges, read_poses, read_ply

CONFIG = {
    "seed": 3,
    "synth": {"n_stations": 8, "layout": "loop", "lidar_points": 6000},
    "refine": {"n_keypoints": 500, "max_iterations": 3},
}

ARTIFACTS = [
    "calibration.json", "matches.txt", "tracks_matched.txt", "match_report.json", "edges_raw.txt",
    "relpose_report.json", "edges.txt", "edges_labelled.txt", "validation_report.json", "poses_init.txt",
    "tracks.txt", "poses.txt", "tracks_refined.txt", "calibration_refined.json", "structure.ply",
    "lidar_merged.ply", "refine_report.json", "eval_report.json",
]


def write_config(path, data_dir, **extra):
    cfg = dict(CONFIG, data_dir=str(data_dir), **extra)
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


def run_all(tmp, name, threads):
    data = tmp / name
    cfg = write_config(tmp / f"{name}.yaml", data)
    for stage in ("synth", "run"):
        assert cli.main([stage, "--config", cfg, "--threads", str(threads)]) == 0
    return data


@pytest.fixture(scope="module")
def two_runs(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("pipeline")
    return run_all(tmp, "a", 1), run_all(tmp, "b", 2)


def test_run_writes_every_artifact(two_runs):
    data, _ = two_runs
    for name in ARTIFACTS:
        assert (data / name).exists(), name
    poses = read_poses(data / "poses.txt")
    assert sorted(poses) == list(range(8))
    assert len(read_edges(data / "edges.txt")) > 0
    assert len(read_ply(data / "structure.ply")) > 0
    ev = json.loads((data / "eval_report.json").read_text())
    assert ev["refined"]["ate_trans_m"] < 0.05


def _tree_files(root):
    return sorted(p.relative_to(root) for p in root.rglob("*") if p.is_file())


def test_outputs_independent_of_threads(two_runs):
    a, b = two_runs
    files = _tree_files(a)
    assert files == _tree_files(b)
    differ = [str(f) for f in files if not filecmp.cmp(a / f, b / f, shallow=False)]
    # reports embed the data directory nowhere, so everything must match
    assert differ == []


def test_missing_dependency_names_the_stage(tmp_path, caplog):
    cfg = write_config(tmp_path / "c.yaml", tmp_path / "empty")
    assert cli.main(["validate", "--config", cfg]) == 2
    assert "relpose" in caplog.text


def test_bad_yaml_reports_offset(tmp_path, caplog):
    bad = tmp_path / "bad.yaml"
    bad.write_text("seed: 1\nsynth: [unclosed\n")
    assert cli.main(["synth", "--config", str(bad), "--data-dir", str(tmp_path / "d")]) == 2
    assert "offset" in caplog.text or "bad.yaml" in caplog.text


def test_unknown_config_key_rejected(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"data_dir": str(tmp_path / "d"), "refine": {"n_keypoint": 5}}))
    assert cli.main(["synth", "--config", str(cfg)]) == 2


def test_console_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "lidar_sfm.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "--threads" in out.stdout
