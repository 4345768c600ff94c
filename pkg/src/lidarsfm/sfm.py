"""Incremental reconstruction steps: LiDAR-depth initialisation, next-view
selection, PnP registration and multi-view triangulation."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .association import Kind, PlaneCorrespondence, classify_ground, AssociationConfig
from .errors import InitializationFailed, RegistrationFailed
from .geometry import DEPTH_EPSILON
from .lidar_map import NO_SOURCE, depth_lookup
from .solvers import pnp_ransac, reprojection_errors_px, triangulate_ransac

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SfmConfig:
    ransac_px: float = 4.0
    min_pnp_inliers: int = 15
    min_tri_angle_deg: float = 1.5
    min_init_points: int = 50
    min_visible: int = 20
    init_depth_mode: str = "ray_plane"  # or "point_depth"
    init_depth_scale: float = 1.0
    grid_levels: int = 3
    filter_px: float = 4.0
    assoc: AssociationConfig = AssociationConfig()


def initialize(scene, lmap, image_id, pose, cfg=SfmConfig()):
    """Seed the model from one image with depth read off the LiDAR map.

    Each feature covered by a splat takes its depth from intersecting the
    viewing ray with the plane of the splat's LiDAR point (or, in
    ``point_depth`` mode, from that point's camera depth).
    Returns the ids of the created points.
    """
    img = scene.images[image_id]
    ac = cfg.assoc
    src, depth = depth_lookup(lmap, pose, img.camera, img.keypoints,
                              ac.frustum_height, ac.splat_beta, ac.splat_rmax)
    created = []
    for f in np.flatnonzero(src != NO_SOURCE):
        li = int(src[f])
        if lmap.degenerate[li]:
            continue
        ray = np.array([img.normalized[f][0], img.normalized[f][1], 1.0])
        if cfg.init_depth_mode == "point_depth":
            lam = depth[f]
        else:
            n_c = pose.R @ lmap.normals[li]
            l_c = pose.transform(lmap.positions[li])
            den = n_c @ ray
            if abs(den) < 1e-9:
                continue
            lam = (n_c @ l_c) / den
        if not lam > DEPTH_EPSILON:
            continue
        Xc = ray * lam * cfg.init_depth_scale
        Xw = pose.R.T @ (Xc - pose.t)
        if img.point_ids[f] >= 0 or scene.component_point(image_id, f) is not None:
            continue
        pid = scene.add_point(Xw, [(image_id, int(f))], lidar_init=True)
        g = classify_ground(lmap.normals[li], ac)
        scene.points[pid].correspondence = PlaneCorrespondence(
            pid, li, Kind.PROJECTED, g, ac.weight(Kind.PROJECTED, g), 0)
        created.append(pid)
    if len(created) < cfg.min_init_points:
        for pid in created:
            scene.delete_point(pid)
        raise InitializationFailed(
            f"only {len(created)} features of {img.name} received depth (need {cfg.min_init_points})")
    img.pose = pose
    img.registered = True
    log.info("initialised from %s with %d points", img.name, len(created))
    return created


def grid_coverage(px, width, height, levels=3):
    """Mean fraction of occupied cells over grids of 2x2 .. 2^L x 2^L."""
    px = np.asarray(px, dtype=float).reshape(-1, 2)
    if len(px) == 0:
        return 0.0
    total = 0.0
    for lvl in range(1, levels + 1):
        k = 2 ** lvl
        gx = np.clip((px[:, 0] / width * k).astype(np.int64), 0, k - 1)
        gy = np.clip((px[:, 1] / height * k).astype(np.int64), 0, k - 1)
        total += len(np.unique(gy * k + gx)) / (k * k)
    return total / levels


def select_next_image(scene, cfg=SfmConfig(), skip=()):
    """Unregistered image maximising ``visible count * grid coverage``."""
    best, best_score = None, 0.0
    for iid in sorted(scene.images):
        img = scene.images[iid]
        if img.registered or iid in skip:
            continue
        feats, _ = scene.visible_points(iid)
        if len(feats) < cfg.min_visible:
            continue
        cov = grid_coverage(img.keypoints[feats], img.camera.width, img.camera.height, cfg.grid_levels)
        score = len(feats) * cov
        if score > best_score:
            best, best_score = iid, score
    return best


def register_image(scene, image_id, rng, cfg=SfmConfig()):
    """Estimate the pose of ``image_id`` from 2D-3D correspondences.

    Inlier features join the tracks of their points. Returns
    ``(pose, lm_iterations)``.
    """
    img = scene.images[image_id]
    feats, pids = scene.visible_points(image_id)
    if len(feats) < 4:
        raise RegistrationFailed(f"{img.name}: only {len(feats)} 2D-3D correspondences")
    X = np.array([scene.points[p].position for p in pids])
    xy = img.normalized[feats]
    f = np.array([img.camera.fx, img.camera.fy])
    res = pnp_ransac(X, xy, f, rng, threshold_px=cfg.ransac_px, prior=img.prior,
                     min_inliers=cfg.min_pnp_inliers)
    if res is None or res.inliers.sum() < cfg.min_pnp_inliers:
        got = 0 if res is None else int(res.inliers.sum())
        raise RegistrationFailed(f"{img.name}: {got} PnP inliers (need {cfg.min_pnp_inliers})")
    img.pose = res.pose
    img.registered = True
    for fi, pid in zip(feats[res.inliers], pids[res.inliers]):
        scene.add_observation(int(pid), image_id, int(fi))
    log.info("registered %s with %d/%d inliers", img.name, int(res.inliers.sum()), len(feats))
    return res.pose, res.iterations


def triangulate_new(scene, image_id, rng, cfg=SfmConfig()):
    """Triangulate untracked feature tracks of ``image_id`` spanning >= 2 registered views."""
    img = scene.images[image_id]
    created = []
    done = set()
    for f in range(len(img.keypoints)):
        if img.point_ids[f] >= 0:
            continue
        comp = scene.component(image_id, f)
        if comp in done or comp in scene.comp_point:
            continue
        done.add(comp)
        meas = []
        used = set()
        for iid, g in scene.component_members(comp):
            other = scene.images[iid]
            if not other.registered or iid in used or other.point_ids[g] >= 0:
                continue
            used.add(iid)
            meas.append((iid, g))
        if len(meas) < 2:
            continue
        poses = [scene.images[i].pose for i, _ in meas]
        xy = np.array([scene.images[i].normalized[g] for i, g in meas])
        fs = np.array([[scene.images[i].camera.fx, scene.images[i].camera.fy] for i, _ in meas])
        res = triangulate_ransac(poses, xy, fs, rng, cfg.ransac_px, cfg.min_tri_angle_deg)
        if res is None:
            continue
        track = [m for m, ok in zip(meas, res.inliers) if ok]
        created.append(scene.add_point(res.position, track))
    return created


def filter_points(scene, point_ids=None, max_px=4.0):
    """Drop observations with large error or negative depth; delete emptied points."""
    removed_obs, removed_pts = 0, 0
    ids = list(scene.points) if point_ids is None else [p for p in point_ids if p in scene.points]
    for pid in ids:
        pt = scene.points[pid]
        errs = []
        for iid, f in list(pt.track):
            img = scene.images[iid]
            e = reprojection_errors_px(img.pose, pt.position[None], img.normalized[f][None],
                                       np.array([img.camera.fx, img.camera.fy]))[0]
            if e > max_px:
                scene.remove_observation(pid, iid, f)
                removed_obs += 1
            else:
                errs.append(e)
        min_len = 1 if pt.lidar_init else 2
        if len(pt.track) < min_len:
            scene.delete_point(pid)
            removed_pts += 1
        else:
            pt.error = float(np.mean(errs))
    return removed_obs, removed_pts
