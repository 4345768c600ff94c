"""End-to-end reconstruction driver and artifact emission."""
from __future__ import annotations

import csv
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from . import bundle, ply
from .config import PipelineConfig, parse_floats
from .errors import (AlignmentError, ConfigError, EmptyProblem, InitializationFailed, NumericalFailure,
                     ParseError, RegistrationFailed)
from .geometry import DEPTH_EPSILON, CameraIntrinsics, CameraPose, rotation_angle
from .lidar_map import load_ply, render_depth
from .scene import SceneStore, load_dataset, load_known_poses, read_poses, write_poses
from .sfm import filter_points, initialize, register_image, select_next_image, triangulate_new

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MAP = 3
EXIT_INIT = 4
EXIT_NO_REGISTRATION = 5

SENTINEL_GRAY = (128, 128, 128)

METRIC_FIELDS = [
    "ba_index", "registration_index", "mode", "anchor", "iterations", "termination",
    "initial_cost", "final_cost", "n_projected", "n_nn", "n_planes", "n_ground",
    "p2p_mean_before", "p2p_mean_after", "reproj_mean_px", "reproj_var_px",
    "n_var_poses", "n_var_points", "pose_err_mean_m", "pose_err_max_m", "rot_err_mean_rad",
]


@dataclass
class MetricRow:
    registration_index: int
    report: bundle.SolveReport
    anchor_name: str
    pose_err_mean: float = float("nan")
    pose_err_max: float = float("nan")
    rot_err_mean: float = float("nan")


@dataclass
class RunResult:
    status: int
    scene: SceneStore | None = None
    lidar_map: object = None
    rows: list = field(default_factory=list)
    lm_iterations: int = 0
    registered: int = 0
    elapsed: float = 0.0
    message: str = ""


def _intrinsics(cfg):
    v = parse_floats(cfg.intrinsics, 6)
    return CameraIntrinsics(v[0], v[1], v[2], v[3], int(v[4]), int(v[5]))


def _pose_from_string(s):
    v = parse_floats(s, 7)
    return CameraPose(np.array(v[:4]), np.array(v[4:]))


def reconstruct(cfg: PipelineConfig):
    """Run the incremental pipeline in memory. Returns a ``RunResult``."""
    t0 = time.perf_counter()
    try:
        cfg.validate()
        cfg.check_paths()
        intr = _intrinsics(cfg)
    except (ConfigError, ValueError) as exc:
        log.error("config error: %s", exc)
        return RunResult(EXIT_CONFIG, message=str(exc))
    try:
        lmap = load_ply(cfg.map, cfg.voxel_size, cfg.normal_k, cfg.estimate_normals)
    except (OSError, ParseError, ValueError) as exc:
        log.error("cannot load map: %s", exc)
        return RunResult(EXIT_MAP, message=str(exc))

    try:
        scene = load_dataset(SceneStore(), cfg.features, cfg.matches, intr)
        if cfg.known_poses:
            n, unknown = load_known_poses(scene, cfg.known_poses)
            log.info("attached %d pose priors (%d unknown names)", n, len(unknown))
        init_name = cfg.init_image or scene.images[0].name
        if init_name not in scene.names:
            raise ConfigError(f"unknown init image {init_name!r}")
        init_id = scene.names[init_name]
        if cfg.init_pose is not None:
            init_pose = _pose_from_string(cfg.init_pose)
        elif scene.images[init_id].prior is not None:
            init_pose = scene.images[init_id].prior
        else:
            raise ConfigError("no initial pose given for the initial image")
        truth = read_poses(cfg.truth) if cfg.truth else None
    except (ConfigError, ParseError, OSError, ValueError) as exc:
        log.error("config error: %s", exc)
        return RunResult(EXIT_CONFIG, message=str(exc))

    sfm_cfg, ba_cfg = cfg.sfm(), cfg.bundle()
    rng = np.random.default_rng(cfg.seed)
    result = RunResult(EXIT_OK, scene, lmap)
    try:
        initialize(scene, lmap, init_id, init_pose, sfm_cfg)
    except InitializationFailed as exc:
        log.error("%s", exc)
        return RunResult(EXIT_INIT, scene, lmap, message=str(exc))

    n_reg = 1
    last_global = 1
    failed = {}

    def run_ba(mode, anchor):
        try:
            pb = bundle.build_problem(scene, lmap, mode, anchor, ba_cfg)
            rep = bundle.solve(pb, ba_cfg)
        except EmptyProblem as exc:
            log.debug("skipping %s BA: %s", mode, exc)
            return
        except NumericalFailure as exc:
            log.warning("%s BA failed: %s", mode, exc)
            return
        filter_points(scene, pb.point_ids, sfm_cfg.filter_px)
        result.lm_iterations += rep.iterations
        row = MetricRow(n_reg, rep, scene.images[anchor].name if anchor is not None else "")
        if truth is not None:
            _attach_pose_error(row, scene, truth)
        result.rows.append(row)
        log.info("%s BA @%d: %d planes (%d proj), p2p %.4f -> %.4f m, reproj %.3f px, %d its",
                 mode, n_reg, rep.n_planes, rep.n_projected, rep.p2p_mean_before, rep.p2p_mean_after,
                 rep.reproj_mean_px, rep.iterations)

    while True:
        skip = {i for i, at in failed.items() if at == n_reg}
        nxt = select_next_image(scene, sfm_cfg, skip)
        if nxt is None:
            break
        try:
            _, its = register_image(scene, nxt, rng, sfm_cfg)
        except RegistrationFailed as exc:
            log.info("%s", exc)
            failed[nxt] = n_reg
            continue
        result.lm_iterations += its
        n_reg += 1
        triangulate_new(scene, nxt, rng, sfm_cfg)
        run_ba(bundle.INCREMENTAL, nxt)
        if n_reg % cfg.batch_every == 0:
            run_ba(bundle.BATCH, nxt)
        if n_reg >= cfg.global_growth * last_global:
            run_ba(bundle.WHOLE, None)
            last_global = n_reg
    if n_reg == 1:
        log.error("no image could be registered after initialisation")
        return RunResult(EXIT_NO_REGISTRATION, scene, lmap, message="no image registrable")
    if last_global != n_reg or not result.rows or result.rows[-1].report.mode != bundle.WHOLE:
        run_ba(bundle.WHOLE, None)
    result.registered = n_reg
    result.elapsed = time.perf_counter() - t0
    log.info("registered %d/%d images, %d points in %.1f s",
             n_reg, len(scene.images), len(scene.points), result.elapsed)
    return result


def _attach_pose_error(row, scene, truth):
    terr, rerr = [], []
    for iid in scene.registered_ids():
        img = scene.images[iid]
        gt = truth.get(img.name)
        if gt is None:
            continue
        terr.append(np.linalg.norm(img.pose.center - gt.center))
        rerr.append(rotation_angle(img.pose.R @ gt.R.T))
    if terr:
        row.pose_err_mean = float(np.mean(terr))
        row.pose_err_max = float(np.max(terr))
        row.rot_err_mean = float(np.mean(rerr))


def run_pipeline(cfg: PipelineConfig):
    """Reconstruct and write every artifact into ``cfg.out``. Returns a ``RunResult``."""
    res = reconstruct(cfg)
    if res.status != EXIT_OK:
        return res
    out = cfg.out
    os.makedirs(out, exist_ok=True)
    scene, lmap = res.scene, res.lidar_map
    write_poses(os.path.join(out, "poses.txt"), registered_poses(scene))
    write_points(os.path.join(out, "points.ply"), scene)
    emit_metrics(res.rows, os.path.join(out, "metrics.csv"))
    if cfg.write_depth:
        os.makedirs(os.path.join(out, "depth"), exist_ok=True)
        for iid in scene.registered_ids():
            img = scene.images[iid]
            render_depth(lmap, img.pose, img.camera, cfg.frustum_height, cfg.splat_beta,
                         cfg.splat_rmax).write_pgm(os.path.join(out, "depth", img.name + ".pgm"))
    if cfg.images:
        colors, warnings = emit_colored_cloud(scene, lmap, cfg.images, cfg.frustum_height,
                                              cfg.splat_beta, cfg.splat_rmax)
        write_colored_ply(os.path.join(out, "colored_map.ply"), lmap, colors)
        for w in warnings:
            log.warning("%s", w)
    if cfg.figures:
        from .report import render_figures
        render_figures(os.path.join(out, "metrics.csv"), os.path.join(out, "figures"))
    return res


def registered_poses(scene):
    return {scene.images[i].name: scene.images[i].pose for i in scene.registered_ids()}


def write_points(path, scene):
    ids = sorted(scene.points)
    X = np.array([scene.points[p].position for p in ids]).reshape(-1, 3)
    ply.write_ply(path, {
        "x": X[:, 0], "y": X[:, 1], "z": X[:, 2],
        "track_length": np.array([len(scene.points[p].track) for p in ids], dtype=np.int32),
        "error": np.array([scene.points[p].error for p in ids], dtype=np.float32),
    }, binary=True)


def emit_metrics(rows, path):
    """One CSV row per BA invocation; an empty list yields a header-only file."""
    def fmt(v):
        if isinstance(v, float):
            return repr(v)
        return v

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for k, row in enumerate(rows):
            r = row.report
            w.writerow([fmt(v) for v in [
                k, row.registration_index, r.mode, row.anchor_name, r.iterations, r.termination,
                float(r.initial_cost), float(r.final_cost), r.n_projected, r.n_nn, r.n_planes, r.n_ground,
                float(r.p2p_mean_before), float(r.p2p_mean_after), float(r.reproj_mean_px),
                float(r.reproj_var_px), r.n_var_poses, r.n_var_points,
                float(row.pose_err_mean), float(row.pose_err_max), float(row.rot_err_mean),
            ]])


def read_metrics(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- colouring ---------------------------------------------------------------


def read_ppm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P6":
        raise ParseError(f"{path}: not a binary PPM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ParseError(f"{path}: only 8-bit PPM supported")
    pix = np.frombuffer(parts[4][: 3 * w * h], dtype=np.uint8)
    if len(pix) != 3 * w * h:
        raise ParseError(f"{path}: truncated pixel data")
    return pix.reshape(h, w, 3)


def emit_colored_cloud(scene, lmap, images_dir, height=30.0, beta=2.0, r_max=8):
    """Colour each LiDAR point from the nearest registered image that sees it.

    Visibility means: inside the image, in front of the camera within the
    frustum height, and not behind the z-buffered depth at its pixel.
    Returns ``(colors (N, 3) uint8, warnings)``.
    """
    n = len(lmap)
    colors = np.empty((n, 3), dtype=np.uint8)
    colors[:] = SENTINEL_GRAY
    best = np.full(n, np.inf)
    warnings = []
    for iid in scene.registered_ids():
        img = scene.images[iid]
        path = os.path.join(images_dir, img.name + ".ppm") if images_dir else None
        if path is None or not os.path.exists(path):
            warnings.append(f"no image data for {img.name}; skipped")
            continue
        try:
            rgb = read_ppm(path)
        except ParseError as exc:
            warnings.append(str(exc))
            continue
        dimg = render_depth(lmap, img.pose, img.camera, height, beta, r_max)
        pc = img.pose.transform(lmap.positions)
        z = pc[:, 2]
        ok = (z > DEPTH_EPSILON) & (z <= height)
        u = np.full(n, -1.0)
        v = np.full(n, -1.0)
        u[ok] = np.floor(img.camera.fx * pc[ok, 0] / z[ok] + img.camera.cx)
        v[ok] = np.floor(img.camera.fy * pc[ok, 1] / z[ok] + img.camera.cy)
        ok &= (u >= 0) & (u < img.camera.width) & (v >= 0) & (v < img.camera.height)
        idx = np.flatnonzero(ok)
        ui, vi = u[idx].astype(np.int64), v[idx].astype(np.int64)
        buf = dimg.depth[vi, ui]
        vis = (buf > 0) & (z[idx] <= buf + np.maximum(0.05, 0.02 * z[idx]))
        idx, ui, vi = idx[vis], ui[vis], vi[vis]
        closer = z[idx] < best[idx]
        idx, ui, vi = idx[closer], ui[closer], vi[closer]
        best[idx] = z[idx]
        colors[idx] = rgb[vi, ui]
    return colors, warnings


def write_colored_ply(path, lmap, colors):
    p = lmap.positions
    ply.write_ply(path, {
        "x": p[:, 0], "y": p[:, 1], "z": p[:, 2],
        "red": colors[:, 0], "green": colors[:, 1], "blue": colors[:, 2],
    }, binary=True)


# -- evaluation --------------------------------------------------------------


@dataclass
class PoseError:
    name: str
    dx: float
    dy: float
    dz: float
    translation: float
    roll: float
    pitch: float
    yaw: float
    rotation: float


@dataclass
class EvalSummary:
    rows: list
    init_name: str | None

    @property
    def mean_translation(self):
        return float(np.mean([r.translation for r in self.rows]))

    @property
    def max_translation(self):
        return float(np.max([r.translation for r in self.rows]))

    @property
    def mean_rotation(self):
        return float(np.mean([r.rotation for r in self.rows]))

    @property
    def max_rotation(self):
        return float(np.max([r.rotation for r in self.rows]))

    def row(self, name):
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def format(self):
        lines = [f"{'image':<16}{'dx(m)':>12}{'dy(m)':>12}{'dz(m)':>12}{'|t|(m)':>12}"
                 f"{'roll(rad)':>12}{'pitch(rad)':>12}{'yaw(rad)':>12}{'angle(rad)':>12}"]
        for r in self.rows:
            mark = "*" if r.name == self.init_name else " "
            lines.append(f"{mark}{r.name:<15}{r.dx:>12.6f}{r.dy:>12.6f}{r.dz:>12.6f}{r.translation:>12.6f}"
                         f"{r.roll:>12.6f}{r.pitch:>12.6f}{r.yaw:>12.6f}{r.rotation:>12.6f}")
        lines.append(f"mean translation {self.mean_translation:.6f} m, max {self.max_translation:.6f} m; "
                     f"mean rotation {self.mean_rotation:.6f} rad, max {self.max_rotation:.6f} rad")
        if self.init_name is not None:
            r = self.row(self.init_name)
            lines.append(f"initial image {r.name}:")
            for label, val in (("x(m)", r.dx), ("y(m)", r.dy), ("z(m)", r.dz), ("roll(rad)", r.roll),
                               ("pitch(rad)", r.pitch), ("yaw(rad)", r.yaw)):
                lines.append(f"  {label:<11}{val: .6g}")
        return "\n".join(lines)


def pose_error(name, est, gt):
    d = est.center - gt.center
    R_err = est.R @ gt.R.T
    yaw, pitch, roll = Rotation.from_matrix(R_err).as_euler("ZYX")
    return PoseError(name, float(d[0]), float(d[1]), float(d[2]), float(np.linalg.norm(d)),
                     float(roll), float(pitch), float(yaw), rotation_angle(R_err))


def evaluate_against_truth(poses_out, truth, init_name=None):
    """Per-image camera-centre and geodesic rotation errors of ``poses_out``."""
    common = [n for n in poses_out if n in truth]
    if not common:
        raise AlignmentError("estimated and ground-truth pose sets share no image names")
    rows = [pose_error(n, poses_out[n], truth[n]) for n in common]
    return EvalSummary(rows, init_name if init_name in common else None)
