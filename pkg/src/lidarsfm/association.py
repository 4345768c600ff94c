"""Point-to-plane association: depth-projection and nearest-neighbour methods."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .lidar_map import NO_SOURCE, depth_lookup, nearest_within_many


class Kind(enum.Enum):
    PROJECTED = "projected"
    NEAREST_NEIGHBOR = "nn"


@dataclass(frozen=True)
class AssociationConfig:
    r0: float = 1.0
    r_min: float = 0.1
    delta: float = 0.1
    ground_cos_threshold: float = math.cos(math.radians(15.0))
    match_threshold: int = 30
    w_p: float = 1.0
    w_n: float = 0.6
    w_g: float = 1.5
    # depth-rendering knobs used by the projection method
    frustum_height: float = 30.0
    splat_beta: float = 2.0
    splat_rmax: int = 8

    def __post_init__(self):
        if not self.r0 >= self.r_min > 0:
            raise ValueError("need r0 >= r_min > 0")
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if not 0 < self.ground_cos_threshold < 1:
            raise ValueError("ground_cos_threshold must lie in (0, 1)")

    def weight(self, kind, is_ground):
        if is_ground:
            return self.w_g
        return self.w_p if kind is Kind.PROJECTED else self.w_n


@dataclass(frozen=True)
class PlaneCorrespondence:
    scene_point_id: int
    lidar_index: int
    kind: Kind
    is_ground: bool
    weight: float
    search_round: int


def nn_radius(cfg, round_):
    if round_ < 0:
        raise ValueError("round must be non-negative")
    return max(cfg.r_min, cfg.r0 - round_ * cfg.delta)


def classify_ground(normal, cfg):
    return bool(abs(normal[2]) >= cfg.ground_cos_threshold)


def _make(cfg, pid, lidar_index, kind, normal, round_):
    g = classify_ground(normal, cfg)
    return PlaneCorrespondence(pid, int(lidar_index), kind, g, cfg.weight(kind, g), int(round_))


def associate_nn(lmap, X, round_, cfg, pid=-1):
    out = associate_nn_many(lmap, np.asarray(X, dtype=float)[None], [round_], cfg, [pid])
    return out[0]


def associate_nn_many(lmap, X, rounds, cfg, pids):
    """Batch NN association; returns a list aligned with ``X`` (None on miss)."""
    X = np.asarray(X, dtype=float).reshape(-1, 3)
    rounds = np.asarray(rounds, dtype=np.int64)
    radius = np.maximum(cfg.r_min, cfg.r0 - rounds * cfg.delta)
    idx, _ = nearest_within_many(lmap, X, radius)
    out = []
    for k, li in enumerate(idx):
        if li < 0 or lmap.degenerate[li]:
            out.append(None)
        else:
            out.append(_make(cfg, int(pids[k]), li, Kind.NEAREST_NEIGHBOR, lmap.normals[li], rounds[k]))
    return out


def view_angles(lmap, lidar_idx, poses, normalized):
    """Angle between each LiDAR normal and the line from the LiDAR point to the
    feature's unit-depth backprojection (world frame), folded into [0, pi/2]."""
    lidar_idx = np.asarray(lidar_idx, dtype=np.int64)
    out = np.empty(len(lidar_idx))
    for k, (li, pose, xn) in enumerate(zip(lidar_idx, poses, normalized)):
        p_feat = pose.R.T @ (np.array([xn[0], xn[1], 1.0]) - pose.t)
        line = p_feat - lmap.positions[li]
        n = lmap.normals[li]
        c = abs(line @ n) / (np.linalg.norm(line) * np.linalg.norm(n))
        out[k] = math.acos(min(1.0, c))
    return out


def select_by_angle(candidates, scene, lmap):
    """Pick the candidate ``(lidar_index, image_id, feature)`` seen most frontally.

    Ties go to the smaller LiDAR index.
    """
    if not candidates:
        raise ValueError("no candidates")
    if len(candidates) == 1:
        return int(candidates[0][0])
    lidx = [c[0] for c in candidates]
    poses = [scene.images[c[1]].pose for c in candidates]
    xn = [scene.images[c[1]].normalized[c[2]] for c in candidates]
    ang = view_angles(lmap, lidx, poses, xn)
    best = min(range(len(candidates)), key=lambda k: (ang[k], lidx[k]))
    return int(lidx[best])


def projected_candidates(scene, lmap, new_image_id, cfg, point_ids=None):
    """Gather depth-projection candidates per scene point tracked by ``new_image_id``.

    Images sharing at least ``match_threshold`` matches with the new image (and
    the new image itself) are rendered at their current pose; each track
    feature they hold contributes the LiDAR point under its pixel.
    """
    new = scene.images[new_image_id]
    tracked = sorted({int(p) for p in new.point_ids if p >= 0})
    if point_ids is not None:
        allowed = set(point_ids)
        tracked = [p for p in tracked if p in allowed]
    views = [new_image_id] + [
        m for m in scene.neighbors(new_image_id, cfg.match_threshold) if scene.images[m].registered
    ]
    cands = {pid: [] for pid in tracked}
    tracked_set = set(tracked)
    for m in views:
        img = scene.images[m]
        feats = [f for f in range(len(img.keypoints)) if img.point_ids[f] in tracked_set]
        if not feats:
            continue
        feats = np.array(feats, dtype=np.int64)
        src, _ = depth_lookup(
            lmap, img.pose, img.camera, img.keypoints[feats],
            cfg.frustum_height, cfg.splat_beta, cfg.splat_rmax,
        )
        for f, li in zip(feats, src):
            if li != NO_SOURCE and not lmap.degenerate[li]:
                cands[int(img.point_ids[f])].append((int(li), m, int(f)))
    return cands


def associate_projected(scene, lmap, new_image_id, cfg, point_ids=None):
    """Projected correspondences for points tracked by the new image.

    Points without any candidate are absent from the result; callers fall
    back to ``associate_nn``.
    """
    out = []
    for pid, cand in projected_candidates(scene, lmap, new_image_id, cfg, point_ids).items():
        if not cand:
            continue
        li = select_by_angle(cand, scene, lmap)
        out.append(_make(cfg, pid, li, Kind.PROJECTED, lmap.normals[li], scene.points[pid].rounds))
    return out
