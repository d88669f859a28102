"""``lidar-sfm <stage> --config <file> [--seed N] [--threads N]``."""
from __future__ import annotations

import argparse
import logging
import sys

import yaml

from . import pipeline
from .io import ParseError

log = logging.getLogger("lidar_sfm")


def build_parser():
    p = argparse.ArgumentParser(prog="lidar-sfm", description="LiDAR-assisted stereo structure from motion")
    p.add_argument("stage", choices=pipeline.STAGES)
    p.add_argument("--config", help="YAML root config with one section per stage")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--threads", type=int, help="worker threads (default: all cores); never changes outputs")
    p.add_argument("--data-dir", help=f"working directory (default: config data_dir, then ${pipeline.DATA_ENV})")
    p.add_argument("-v", "--verbose", action="store_true")

    g = p.add_argument_group("validate")
    g.add_argument("--ratio-threshold", type=float, help="occupancy consistency ratio needed in both directions")
    g.add_argument("--sr-threshold", type=float, help="triplet success-rate threshold")
    g.add_argument("--voxel-size", type=float)
    g.add_argument("--baseline", choices=("rc", "tc", "none"), help="replace validation by a cycle-only check")

    g = p.add_argument_group("refine")
    g.add_argument("--max-iters", type=int, help="alternation iterations")
    g.add_argument("--no-joint-obs", action="store_true", help="drop the point-to-patch terms for image structure")
    g.add_argument("--no-lidar-obs", action="store_true", help="drop the scan-to-scan terms")
    return p


def _overrides(args):
    refine = {"max_iterations": args.max_iters}
    if args.no_joint_obs:
        refine["use_joint"] = False
    if args.no_lidar_obs:
        refine["use_lidar"] = False
    return {
        "validate": {"ratio_threshold": args.ratio_threshold, "sr_threshold": args.sr_threshold,
                     "voxel_size": args.voxel_size, "baseline": args.baseline},
        "refine": refine,
    }


def load_config_file(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ParseError(path, mark.index if mark else 0, str(exc).splitlines()[0]) from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise pipeline.ConfigError(f"{path}: root of the config must be a mapping")
    return data


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = pipeline.resolve_config(load_config_file(args.config), args.seed, args.threads, args.data_dir,
                                      _overrides(args))
        pipeline.run_stage(args.stage, cfg)
    except (pipeline.MissingInputError, pipeline.ConfigError, ParseError, OSError) as exc:
        log.error("%s", exc)
        return 2
    except Exception as exc:  # noqa: BLE001 - surface solver/geometry failures as one line
        log.error("stage %s failed: %s: %s", args.stage, type(exc).__name__, exc)
        if args.verbose:
            raise
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
