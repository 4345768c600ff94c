"""Flat ``key = value`` configuration files and the pipeline configuration."""
from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, field, fields

from .association import AssociationConfig
from .bundle import BundleConfig
from .errors import ConfigError
from .sfm import SfmConfig


def parse_kv(text, repeated=()):
    """Parse ``key = value`` lines; ``#`` starts a comment.

    Keys listed in ``repeated`` collect every occurrence into a list; any
    other key may appear once.
    """
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in repeated:
            out.setdefault(key, []).append(value)
        elif key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        else:
            out[key] = value
    return out


def read_kv(path, repeated=()):
    with open(path) as fh:
        return parse_kv(fh.read(), repeated)


def parse_bool(value):
    v = str(value).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {value!r}")


def parse_floats(value, n=None):
    try:
        vals = [float(v) for v in str(value).replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"not a list of numbers: {value!r}") from None
    if n is not None and len(vals) != n:
        raise ConfigError(f"expected {n} numbers, got {len(vals)} in {value!r}")
    return vals


@dataclass
class PipelineConfig:
    # inputs / outputs
    map: str | None = None
    features: str | None = None
    matches: str | None = None
    known_poses: str | None = None
    images: str | None = None
    truth: str | None = None
    out: str = "out"
    intrinsics: str | None = None  # "fx fy cx cy width height"
    init_image: str | None = None
    init_pose: str | None = None  # "qw qx qy qz tx ty tz"
    seed: int = 0
    # lidar map
    voxel_size: float = 1.0
    frustum_height: float = 30.0
    splat_beta: float = 2.0
    splat_rmax: int = 8
    normal_k: int = 10
    estimate_normals: bool = True
    # association
    r0: float = 1.0
    delta: float = 0.1
    r_min: float = 0.1
    match_threshold: int = 30
    ground_angle_deg: float = 15.0
    w_p: float = 1.0
    w_n: float = 0.6
    w_g: float = 1.5
    # sfm
    ransac_px: float = 4.0
    min_pnp_inliers: int = 15
    min_tri_angle_deg: float = 1.5
    min_init_points: int = 50
    min_visible: int = 20
    init_depth_mode: str = "ray_plane"
    init_depth_scale: float = 1.0
    filter_px: float = 4.0
    # bundle adjustment
    plane_factors: bool = True
    sphere_radius: float = 5.0
    const_track_threshold: int = 8
    batch_every: int = 5
    global_growth: float = 1.1
    loss_scale_px: float = 1.0
    tol_rel: float = 1e-8
    tol_step: float = 1e-10
    max_iters: int = 100
    # artifacts
    write_depth: bool = True
    figures: bool = True

    _PATHS = ("map", "features", "matches", "known_poses", "images", "truth")

    @classmethod
    def from_mapping(cls, values, base_dir=None):
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if raw is None:
                continue
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(known[key], raw)
        cfg = cls(**kwargs)
        if base_dir:
            for key in cls._PATHS + ("out",):
                if key in values and values[key] is not None:
                    val = getattr(cfg, key)
                    if val and not os.path.isabs(val):
                        setattr(cfg, key, os.path.normpath(os.path.join(base_dir, val)))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, overrides=None):
        base = os.path.dirname(os.path.abspath(path))
        merged = cls.from_mapping(read_kv(path), base_dir=base)
        if overrides:
            upd = {k: v for k, v in overrides.items() if v is not None}
            merged = dataclasses.replace(merged, **{k: _coerce(_field(k), v) for k, v in upd.items()})
            merged.validate()
        return merged

    def validate(self):
        checks = [
            (self.voxel_size > 0, "voxel_size must be positive"),
            (self.frustum_height > 0, "frustum_height must be positive"),
            (self.splat_beta >= 0, "splat_beta must be non-negative"),
            (self.splat_rmax >= 0, "splat_rmax must be non-negative"),
            (self.normal_k >= 3, "normal_k must be >= 3"),
            (self.r0 >= self.r_min > 0, "need r0 >= r_min > 0"),
            (self.delta > 0, "delta must be positive"),
            (self.match_threshold >= 0, "match_threshold must be >= 0"),
            (0 < self.ground_angle_deg < 90, "ground_angle_deg must lie in (0, 90)"),
            (min(self.w_p, self.w_n, self.w_g) > 0, "weights must be positive"),
            (self.ransac_px > 0, "ransac_px must be positive"),
            (self.min_pnp_inliers >= 4, "min_pnp_inliers must be >= 4"),
            (self.min_tri_angle_deg >= 0, "min_tri_angle_deg must be >= 0"),
            (self.min_init_points >= 1, "min_init_points must be >= 1"),
            (self.min_visible >= 4, "min_visible must be >= 4"),
            (self.init_depth_mode in ("ray_plane", "point_depth"), "init_depth_mode must be ray_plane|point_depth"),
            (self.init_depth_scale > 0, "init_depth_scale must be positive"),
            (self.filter_px > 0, "filter_px must be positive"),
            (self.sphere_radius > 0, "sphere_radius must be positive"),
            (self.const_track_threshold >= 2, "const_track_threshold must be >= 2"),
            (self.batch_every >= 1, "batch_every must be >= 1"),
            (self.global_growth > 1, "global_growth must exceed 1"),
            (self.loss_scale_px > 0, "loss_scale_px must be positive"),
            (self.max_iters >= 1, "max_iters must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        if self.intrinsics is not None:
            parse_floats(self.intrinsics, 6)
        if self.init_pose is not None:
            q = parse_floats(self.init_pose, 7)
            if not all(math.isfinite(v) for v in q) or math.sqrt(sum(v * v for v in q[:4])) == 0:
                raise ConfigError("init_pose must be finite with a non-zero quaternion")

    def check_paths(self):
        for key in ("map", "features", "matches"):
            if getattr(self, key) is None:
                raise ConfigError(f"missing required path {key!r}")
        for key in ("features", "matches", "known_poses", "truth"):
            p = getattr(self, key)
            if p is not None and not os.path.exists(p):
                raise ConfigError(f"{key} path does not exist: {p}")
        if self.intrinsics is None:
            raise ConfigError("missing intrinsics")

    def assoc(self):
        return AssociationConfig(
            r0=self.r0, r_min=self.r_min, delta=self.delta,
            ground_cos_threshold=math.cos(math.radians(self.ground_angle_deg)),
            match_threshold=self.match_threshold, w_p=self.w_p, w_n=self.w_n, w_g=self.w_g,
            frustum_height=self.frustum_height, splat_beta=self.splat_beta, splat_rmax=self.splat_rmax,
        )

    def sfm(self):
        return SfmConfig(
            ransac_px=self.ransac_px, min_pnp_inliers=self.min_pnp_inliers,
            min_tri_angle_deg=self.min_tri_angle_deg, min_init_points=self.min_init_points,
            min_visible=self.min_visible, init_depth_mode=self.init_depth_mode,
            init_depth_scale=self.init_depth_scale, filter_px=self.filter_px, assoc=self.assoc(),
        )

    def bundle(self):
        return BundleConfig(
            const_track_threshold=self.const_track_threshold, sphere_radius=self.sphere_radius,
            loss_scale_px=self.loss_scale_px, tol_rel=self.tol_rel, tol_step=self.tol_step,
            max_iters=self.max_iters, plane_factors=self.plane_factors, assoc=self.assoc(),
        )


def _field(name):
    for f in fields(PipelineConfig):
        if f.name == name:
            return f
    raise ConfigError(f"unknown config key {name!r}")


def _coerce(f, raw):
    if not isinstance(raw, str):
        return raw
    t = f.type
    try:
        if t in ("bool",):
            return parse_bool(raw)
        if t in ("int",):
            return int(raw)
        if t in ("float",):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {f.name!r}: {raw!r}") from None
    return raw
