"""Command-line entry point: ``lidarsfm {reconstruct,synth,colorize,evaluate,report}``."""
from __future__ import annotations

import argparse
import logging
import os
import sys

from . import pipeline
from .config import PipelineConfig
from .errors import LidarSfmError, ParseError

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "warning": logging.WARNING,
              "info": logging.INFO, "debug": logging.DEBUG}


def setup_logging():
    level = LOG_LEVELS.get(os.environ.get("LAS_LOG", "warn").strip().lower(), logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _add_inputs(p):
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--map", help="LiDAR map PLY")
    p.add_argument("--features", help="directory of <image>.txt keypoint files")
    p.add_argument("--matches", help="pairwise matches file")
    p.add_argument("--known-poses", dest="known_poses", help="pose priors, one image per line")
    p.add_argument("--intrinsics", help='"fx fy cx cy width height"')
    p.add_argument("--init-image", dest="init_image")
    p.add_argument("--init-pose", dest="init_pose", help='"qw qx qy qz tx ty tz"')
    p.add_argument("--images", help="directory of <image>.ppm files for colouring")
    p.add_argument("--truth", help="ground-truth poses for evaluation columns")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any other config key (repeatable)")


def _config(args):
    over = {k: getattr(args, k, None) for k in
            ("map", "features", "matches", "known_poses", "intrinsics", "init_image", "init_pose",
             "images", "truth", "seed", "out")}
    for item in args.set:
        if "=" not in item:
            raise LidarSfmError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        over[k.strip()] = v.strip()
    if args.config:
        return PipelineConfig.load(args.config, over)
    return PipelineConfig.from_mapping(over)


def cmd_reconstruct(args):
    try:
        cfg = _config(args)
    except (LidarSfmError, OSError, ValueError) as exc:
        logging.getLogger("lidarsfm").error("config error: %s", exc)
        return pipeline.EXIT_CONFIG
    res = pipeline.run_pipeline(cfg)
    if res.status == pipeline.EXIT_OK:
        print(f"registered {res.registered}/{len(res.scene.images)} images, "
              f"{len(res.scene.points)} points, {len(res.rows)} BA runs -> {cfg.out}")
    else:
        print(f"failed ({res.status}): {res.message}", file=sys.stderr)
    return res.status


def cmd_synth(args):
    from .synthetic import synth
    scene = synth(args.spec, args.seed, args.out)
    print(f"wrote {len(scene.names)} images, {len(scene.lidar_positions)} map points to {args.out}")
    return 0


def cmd_colorize(args):
    from .lidar_map import load_ply
    from .scene import SceneStore, load_dataset, read_poses
    cfg = _config(args)
    lmap = load_ply(cfg.map, cfg.voxel_size, cfg.normal_k, cfg.estimate_normals)
    scene = load_dataset(SceneStore(), cfg.features, cfg.matches, pipeline._intrinsics(cfg))
    for name, pose in read_poses(args.poses).items():
        if name in scene.names:
            img = scene.images[scene.names[name]]
            img.pose, img.registered = pose, True
    colors, warnings = pipeline.emit_colored_cloud(scene, lmap, cfg.images, cfg.frustum_height,
                                                   cfg.splat_beta, cfg.splat_rmax)
    for w in warnings:
        logging.getLogger("lidarsfm").warning("%s", w)
    os.makedirs(cfg.out, exist_ok=True)
    path = os.path.join(cfg.out, "colored_map.ply")
    pipeline.write_colored_ply(path, lmap, colors)
    print(path)
    return 0


def cmd_evaluate(args):
    from .scene import read_poses
    summary = pipeline.evaluate_against_truth(read_poses(args.poses), read_poses(args.truth), args.init_image)
    print(summary.format())
    return 0


def cmd_report(args):
    from .report import render_figures
    out = args.out or os.path.join(os.path.dirname(os.path.abspath(args.metrics)), "figures")
    for p in render_figures(args.metrics, out):
        print(p)
    return 0


def build_parser():
    ap = argparse.ArgumentParser(prog="lidarsfm", description="Structure from motion against a LiDAR map.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("reconstruct", help="run the incremental pipeline")
    _add_inputs(p)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--spec", default="reference", help="spec file or bundled scene name")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("colorize", help="colour the LiDAR map from posed images")
    _add_inputs(p)
    p.add_argument("--poses", required=True, help="poses.txt of the reconstruction")
    p.set_defaults(func=cmd_colorize)

    p = sub.add_parser("evaluate", help="compare poses against ground truth")
    p.add_argument("--poses", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--init-image", dest="init_image")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="render figures from metrics.csv")
    p.add_argument("--metrics", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None):
    setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return pipeline.EXIT_MAP if args.command == "colorize" else pipeline.EXIT_CONFIG
    except (LidarSfmError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return pipeline.EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
