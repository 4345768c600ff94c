"""Synthetic plane-world scenes with ground truth for end-to-end verification.

A scene spec is a ``key = value`` file. Either ``room = LX LY LZ`` (floor,
ceiling and four walls of an axis-aligned box with a corner at the origin)
or one ``plane = ox oy oz ux uy uz vx vy vz`` line per rectangle. Cameras
follow a ``circle`` trajectory or are listed as ``camera = cx cy cz tx ty tz``
(centre, look-at target).
"""
from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass
from importlib import resources

import numpy as np

from . import ply
from .config import parse_bool, parse_floats, parse_kv
from .errors import SpecError
from .geometry import CameraIntrinsics, CameraPose
from .scene import write_features, write_matches, write_poses

log = logging.getLogger(__name__)

PALETTE = np.array([
    [200, 60, 60], [60, 170, 70], [70, 90, 210], [220, 190, 60],
    [170, 80, 190], [60, 190, 200], [240, 140, 40], [120, 120, 60],
], dtype=np.uint8)
BACKGROUND = np.array([30, 30, 30], dtype=np.uint8)

DEFAULTS = {
    "lidar_spacing": "0.15",
    "landmark_density": "8",
    "edge_margin": "0.3",
    "num_cameras": "40",
    "trajectory": "circle",
    "trajectory_radius": "3.5",
    "trajectory_center": "",
    "camera_height": "1.5",
    "pitch_deg": "-10",
    "intrinsics": "500 500 320 240 640 480",
    "sigma_px": "0",
    "sigma_map": "0",
    "outlier_rate": "0",
    "max_view_depth": "15",
    "max_incidence_deg": "75",
    "min_pair_matches": "15",
    "render_images": "false",
}


@dataclass
class Plane:
    origin: np.ndarray
    u: np.ndarray
    v: np.ndarray

    @property
    def normal(self):
        n = np.cross(self.u, self.v)
        return n / np.linalg.norm(n)

    @property
    def area(self):
        return float(np.linalg.norm(np.cross(self.u, self.v)))


@dataclass
class SyntheticScene:
    planes: list
    intrinsics: CameraIntrinsics
    lidar_positions: np.ndarray
    lidar_normals: np.ndarray
    lidar_plane: np.ndarray
    landmarks: np.ndarray
    landmark_plane: np.ndarray
    names: list
    poses: list
    features: list  # per image (n, 2) noisy pixels
    exact_features: list  # per image (n, 2) noise-free projections
    feature_landmark: list  # per image (n,) landmark id, -1 for none
    matches: dict  # (name_a, name_b) -> (k, 2)
    sigma_px: float
    sigma_map: float
    outlier_rate: float


def load_spec(spec):
    """Spec from a path, a raw text, or the name of a bundled scene."""
    if os.path.exists(spec):
        with open(spec) as fh:
            text = fh.read()
    elif "=" in spec:
        text = spec
    else:
        try:
            text = resources.files("lidarsfm.scenes").joinpath(f"{spec}.txt").read_text()
        except FileNotFoundError:
            raise SpecError(f"no scene spec {spec!r}") from None
    values = dict(DEFAULTS)
    values.update(parse_kv(text, repeated=("plane", "camera")))
    return values


def _room_planes(lx, ly, lz):
    O = np.zeros(3)
    X, Y, Z = np.array([lx, 0.0, 0.0]), np.array([0.0, ly, 0.0]), np.array([0.0, 0.0, lz])
    # edge order chosen so u x v points into the room
    return [
        Plane(O, X, Y),  # floor
        Plane(Z, Y, X),  # ceiling
        Plane(O, Z, X),  # wall y = 0
        Plane(Y, X, Z),  # wall y = ly
        Plane(O, Y, Z),  # wall x = 0
        Plane(X, Z, Y),  # wall x = lx
    ]


def _planes(values):
    if "room" in values:
        return _room_planes(*parse_floats(values["room"], 3))
    out = []
    for line in values.get("plane", []):
        p = np.array(parse_floats(line, 9))
        pl = Plane(p[:3], p[3:6], p[6:9])
        if pl.area <= 0:
            raise SpecError(f"degenerate plane {line!r}")
        out.append(pl)
    return out


def _cameras(values, planes):
    if "camera" in values:
        poses = []
        for line in values["camera"]:
            c = parse_floats(line, 6)
            poses.append(CameraPose.look_at(c[:3], c[3:]))
        return poses
    if values["trajectory"] != "circle":
        raise SpecError(f"unknown trajectory {values['trajectory']!r}")
    n = int(values["num_cameras"])
    rad = float(values["trajectory_radius"])
    h = float(values["camera_height"])
    pitch = math.radians(float(values["pitch_deg"]))
    if values["trajectory_center"]:
        cx, cy = parse_floats(values["trajectory_center"], 2)
    else:
        lo = np.min([np.minimum(p.origin, p.origin + p.u + p.v) for p in planes], axis=0)
        hi = np.max([np.maximum(p.origin, p.origin + p.u + p.v) for p in planes], axis=0)
        cx, cy = (lo[:2] + hi[:2]) / 2
    poses = []
    for i in range(n):
        a = 2 * math.pi * i / n
        d = np.array([math.cos(a), math.sin(a), 0.0])
        c = np.array([cx, cy, h]) + rad * d
        look = d * math.cos(pitch) + np.array([0.0, 0.0, math.sin(pitch)])
        poses.append(CameraPose.look_at(c, c + look))
    return poses


def _check_gauge(planes, poses):
    if len(planes) < 3:
        raise SpecError(f"need at least 3 planes, got {len(planes)}")
    normals = np.array([p.normal for p in planes])
    if np.linalg.matrix_rank(normals, tol=1e-6) < 3:
        raise SpecError("plane normals do not span 3-D (scale/translation gauge left free)")
    if len(poses) < 2:
        raise SpecError("need at least 2 cameras")


def _grid_on(plane, spacing):
    nu = max(1, int(round(np.linalg.norm(plane.u) / spacing)))
    nv = max(1, int(round(np.linalg.norm(plane.v) / spacing)))
    a = (np.arange(nu) + 0.5) / nu
    b = (np.arange(nv) + 0.5) / nv
    A, B = np.meshgrid(a, b, indexing="ij")
    return plane.origin + A.reshape(-1, 1) * plane.u + B.reshape(-1, 1) * plane.v


def _ray_hits(planes, origins, dirs, skip=None):
    """Smallest positive ray parameter hitting any plane rectangle; (s, plane id)."""
    n = len(dirs)
    best = np.full(n, np.inf)
    who = np.full(n, -1, dtype=np.int64)
    for k, pl in enumerate(planes):
        nrm = np.cross(pl.u, pl.v)
        den = dirs @ nrm
        with np.errstate(divide="ignore", invalid="ignore"):
            s = ((pl.origin - origins) @ nrm) / den
        p = origins + s[:, None] * dirs - pl.origin
        a = p @ pl.u / (pl.u @ pl.u)
        b = p @ pl.v / (pl.v @ pl.v)
        ok = (np.abs(den) > 1e-12) & (s > 1e-9) & (a >= 0) & (a <= 1) & (b >= 0) & (b <= 1)
        if skip is not None:
            ok &= skip != k
        closer = ok & (s < best)
        best[closer] = s[closer]
        who[closer] = k
    return best, who


def generate(spec, seed):
    """Build a ``SyntheticScene`` from a spec (path, text or bundled name)."""
    values = load_spec(spec) if isinstance(spec, str) else {**DEFAULTS, **spec}
    rng = np.random.default_rng(seed)
    planes = _planes(values)
    poses = _cameras(values, planes)
    _check_gauge(planes, poses)
    intr = CameraIntrinsics(*parse_floats(values["intrinsics"], 6)[:4],
                            *[int(v) for v in parse_floats(values["intrinsics"], 6)[4:]])
    spacing = float(values["lidar_spacing"])
    density = float(values["landmark_density"])
    margin = float(values["edge_margin"])
    sigma_px = float(values["sigma_px"])
    sigma_map = float(values["sigma_map"])
    outlier_rate = float(values["outlier_rate"])
    max_depth = float(values["max_view_depth"])
    cos_inc = math.cos(math.radians(float(values["max_incidence_deg"])))
    min_pair = int(values["min_pair_matches"])

    lp, ln, lpl = [], [], []
    for k, pl in enumerate(planes):
        g = _grid_on(pl, spacing)
        lp.append(g)
        ln.append(np.broadcast_to(pl.normal, g.shape))
        lpl.append(np.full(len(g), k))
    lidar_pos = np.vstack(lp)
    lidar_pos = lidar_pos + rng.normal(0.0, sigma_map, lidar_pos.shape) if sigma_map > 0 else lidar_pos
    lidar_nrm = np.vstack(ln).copy()
    lidar_plane = np.concatenate(lpl)

    lm, lm_pl = [], []
    for k, pl in enumerate(planes):
        lu, lv = np.linalg.norm(pl.u), np.linalg.norm(pl.v)
        count = int(round(pl.area * density))
        if lu <= 2 * margin or lv <= 2 * margin or count == 0:
            continue
        a = rng.uniform(margin / lu, 1 - margin / lu, count)
        b = rng.uniform(margin / lv, 1 - margin / lv, count)
        lm.append(pl.origin + a[:, None] * pl.u + b[:, None] * pl.v)
        lm_pl.append(np.full(count, k))
    landmarks = np.vstack(lm)
    landmark_plane = np.concatenate(lm_pl)
    lm_normals = np.array([planes[k].normal for k in landmark_plane])

    names = [f"img_{i:03d}" for i in range(len(poses))]
    features, exact, owners = [], [], []
    for pose in poses:
        pc = pose.transform(landmarks)
        z = pc[:, 2]
        vis = (z > 0.1) & (z < max_depth)
        uv = np.full((len(z), 2), -1.0)
        uv[vis] = np.stack([intr.fx * pc[vis, 0] / z[vis] + intr.cx,
                            intr.fy * pc[vis, 1] / z[vis] + intr.cy], axis=1)
        vis &= (uv[:, 0] >= 1) & (uv[:, 0] <= intr.width - 1) & (uv[:, 1] >= 1) & (uv[:, 1] <= intr.height - 1)
        ray = landmarks - pose.center
        dist = np.linalg.norm(ray, axis=1)
        vis &= np.abs(np.einsum("ij,ij->i", ray, lm_normals)) / dist >= cos_inc
        ids = np.flatnonzero(vis)
        s, _ = _ray_hits(planes, np.broadcast_to(pose.center, (len(ids), 3)), ray[ids],
                         skip=landmark_plane[ids])
        ids = ids[~(s < 1 - 1e-9)]
        ids = ids[rng.permutation(len(ids))]
        ex = uv[ids]
        noisy = ex + rng.normal(0.0, sigma_px, ex.shape) if sigma_px > 0 else ex.copy()
        exact.append(ex)
        features.append(noisy)
        owners.append(ids)

    matches = {}
    for a in range(len(poses)):
        pos_a = {int(l): f for f, l in enumerate(owners[a])}
        for b in range(a + 1, len(poses)):
            pairs = [(pos_a[int(l)], f) for f, l in enumerate(owners[b]) if int(l) in pos_a]
            if len(pairs) < min_pair:
                continue
            pairs.sort()
            arr = np.array(pairs, dtype=np.int64)
            n_out = int(round(outlier_rate * len(arr)))
            if n_out:
                bad = np.stack([rng.integers(0, len(owners[a]), n_out),
                                rng.integers(0, len(owners[b]), n_out)], axis=1)
                arr = np.vstack([arr, bad])
            matches[(names[a], names[b])] = arr

    scene = SyntheticScene(planes, intr, lidar_pos, lidar_nrm, lidar_plane, landmarks, landmark_plane,
                           names, poses, features, exact, owners, matches, sigma_px, sigma_map,
                           outlier_rate)
    validate(scene)
    return scene


def validate(scene, tol=1e-9):
    """Self-check: landmarks on their planes, exact features are true projections."""
    for k, pl in enumerate(scene.planes):
        on = scene.landmarks[scene.landmark_plane == k]
        if len(on) and np.abs((on - pl.origin) @ pl.normal).max() > tol:
            raise SpecError(f"landmark off plane {k}")
    intr = scene.intrinsics
    for pose, ex, own in zip(scene.poses, scene.exact_features, scene.feature_landmark):
        if len(own) == 0:
            continue
        pc = pose.transform(scene.landmarks[own])
        proj = np.stack([intr.fx * pc[:, 0] / pc[:, 2] + intr.cx, intr.fy * pc[:, 1] / pc[:, 2] + intr.cy], 1)
        if np.abs(proj - ex).max() > tol * max(intr.width, intr.height):
            raise SpecError("feature is not the projection of its landmark")


def render_image(scene, pose):
    """Flat-shaded RGB image: each plane in its palette colour."""
    intr = scene.intrinsics
    u, v = np.meshgrid(np.arange(intr.width) + 0.5, np.arange(intr.height) + 0.5)
    rays = np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)], -1).reshape(-1, 3)
    dirs = rays @ pose.R
    _, who = _ray_hits(scene.planes, np.broadcast_to(pose.center, dirs.shape), dirs)
    img = np.empty((len(who), 3), dtype=np.uint8)
    img[:] = BACKGROUND
    img[who >= 0] = PALETTE[who[who >= 0] % len(PALETTE)]
    return img.reshape(intr.height, intr.width, 3)


def write_ppm(path, rgb):
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def write_dataset(scene, out_dir, render_images=False):
    """Write map.ply, features/, matches.txt, poses_gt.txt and reconstruct.cfg."""
    os.makedirs(os.path.join(out_dir, "features"), exist_ok=True)
    p, n = scene.lidar_positions, scene.lidar_normals
    ply.write_ply(os.path.join(out_dir, "map.ply"),
                  {"x": p[:, 0], "y": p[:, 1], "z": p[:, 2], "nx": n[:, 0], "ny": n[:, 1], "nz": n[:, 2]},
                  binary=True)
    for name, feats in zip(scene.names, scene.features):
        write_features(os.path.join(out_dir, "features", name + ".txt"), feats)
    write_matches(os.path.join(out_dir, "matches.txt"), scene.matches)
    write_poses(os.path.join(out_dir, "poses_gt.txt"), dict(zip(scene.names, scene.poses)))
    if render_images:
        os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
        for name, pose in zip(scene.names, scene.poses):
            write_ppm(os.path.join(out_dir, "images", name + ".ppm"), render_image(scene, pose))
    i = scene.intrinsics
    p0 = scene.poses[0]
    lines = [
        "# generated by lidarsfm synth",
        "map = map.ply",
        "features = features",
        "matches = matches.txt",
        "truth = poses_gt.txt",
        "out = out",
        f"intrinsics = {i.fx!r} {i.fy!r} {i.cx!r} {i.cy!r} {i.width} {i.height}",
        f"init_image = {scene.names[0]}",
        "init_pose = " + " ".join(repr(float(v)) for v in list(p0.q) + list(p0.t)),
    ]
    if render_images:
        lines.append("images = images")
    with open(os.path.join(out_dir, "reconstruct.cfg"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def synth(spec, seed, out_dir):
    values = load_spec(spec) if isinstance(spec, str) else {**DEFAULTS, **spec}
    scene = generate(values, seed)
    write_dataset(scene, out_dir, render_images=parse_bool(values["render_images"]))
    log.info("wrote %d images, %d LiDAR points, %d landmarks to %s",
             len(scene.names), len(scene.lidar_positions), len(scene.landmarks), out_dir)
    return scene
