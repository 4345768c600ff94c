"""Absolute pose and triangulation solvers used during registration."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .bundle import _reproj_jac
from .geometry import DEPTH_EPSILON, CameraPose


def p3p(bearings, points):
    """Grunert's P3P: all poses mapping three world ``points`` onto unit ``bearings``.

    Returns a list of ``CameraPose`` (at most four).
    """
    j = np.asarray(bearings, dtype=float)
    j = j / np.linalg.norm(j, axis=1, keepdims=True)
    P = np.asarray(points, dtype=float)
    a2 = np.sum((P[1] - P[2]) ** 2)
    b2 = np.sum((P[0] - P[2]) ** 2)
    c2 = np.sum((P[0] - P[1]) ** 2)
    if min(a2, b2, c2) < 1e-18:
        return []
    ca, cb, cg = j[1] @ j[2], j[0] @ j[2], j[0] @ j[1]
    p = (a2 - c2) / b2
    q = (a2 + c2) / b2
    coeffs = [
        (p - 1) ** 2 - 4 * c2 / b2 * ca ** 2,
        4 * (p * (1 - p) * cb - (1 - q) * ca * cg + 2 * c2 / b2 * ca ** 2 * cb),
        2 * (p ** 2 - 1 + 2 * p ** 2 * cb ** 2 + 2 * (b2 - c2) / b2 * ca ** 2
             - 4 * q * ca * cb * cg + 2 * (b2 - a2) / b2 * cg ** 2),
        4 * (-p * (1 + p) * cb + 2 * a2 / b2 * cg ** 2 * cb - (1 - q) * ca * cg),
        (1 + p) ** 2 - 4 * a2 / b2 * cg ** 2,
    ]
    if not np.all(np.isfinite(coeffs)) or abs(coeffs[0]) < 1e-14:
        return []
    out = []
    for v in np.roots(coeffs):
        if abs(v.imag) > 1e-6 * max(1.0, abs(v.real)) or v.real <= 0:
            continue
        v = v.real
        den = 2 * (cg - v * ca)
        if abs(den) < 1e-14:
            continue
        u = ((-1 + p) * v * v - 2 * p * cb * v + 1 + p) / den
        if u <= 0:
            continue
        s1sq = b2 / (1 + v * v - 2 * v * cb)
        if s1sq <= 0:
            continue
        s1 = math.sqrt(s1sq)
        cam = np.array([s1, u * s1, v * s1])[:, None] * j
        pose = absolute_orientation(P, cam)
        if pose is not None:
            out.append(pose)
    return out


def absolute_orientation(world, cam):
    """Rigid ``(R, t)`` with ``cam ~= R @ world + t`` (Kabsch, no scale)."""
    cw, cc = world.mean(axis=0), cam.mean(axis=0)
    H = (world - cw).T @ (cam - cc)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    if not np.all(np.isfinite(R)):
        return None
    return CameraPose.from_matrix(R, cc - R @ cw)


def reprojection_errors_px(pose, X, xy, f):
    """Pixel reprojection errors; ``inf`` where the point is behind the camera."""
    Xc = pose.transform(X)
    z = Xc[:, 2]
    ok = z > DEPTH_EPSILON
    e = np.full(len(X), np.inf)
    d = (Xc[ok, :2] / z[ok, None] - xy[ok]) * f
    e[ok] = np.sqrt((d * d).sum(axis=1))
    return e


def refine_pose(pose, X, xy, max_iters=50, tol=1e-12):
    """Levenberg-Marquardt refinement of one pose on normalised observations.

    Returns ``(pose, iterations)``.
    """
    def cost_of(p):
        Xc = p.transform(X)
        if np.any(Xc[:, 2] <= DEPTH_EPSILON):
            return np.inf, None
        r = Xc[:, :2] / Xc[:, 2:3] - xy
        return float((r * r).sum()), r

    cost, r = cost_of(pose)
    lam = 1e-4
    it = 0
    while it < max_iters and np.isfinite(cost):
        it += 1
        Jp, _, _ = _reproj_jac(np.broadcast_to(pose.R, (len(X), 3, 3)),
                               np.broadcast_to(pose.t, (len(X), 3)), X)
        J = Jp.reshape(-1, 6)
        H = J.T @ J
        g = J.T @ r.ravel()
        if np.abs(g).max() == 0.0:
            break
        improved = False
        while lam < 1e16:
            try:
                delta = np.linalg.solve(H + lam * np.diag(np.maximum(np.diag(H), 1e-12)), -g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            cand = pose.retract(delta)
            c_new, r_new = cost_of(cand)
            if c_new < cost:
                rel = (cost - c_new) / cost
                pose, cost, r = cand, c_new, r_new
                lam = max(lam / 10, 1e-12)
                improved = True
                break
            lam *= 10
        if not improved or rel < tol or np.linalg.norm(delta) < 1e-14:
            break
    return pose, it


@dataclass
class PnPResult:
    pose: CameraPose
    inliers: np.ndarray  # boolean mask
    iterations: int  # LM iterations spent refining


def pnp_ransac(X, xy, f, rng, threshold_px=4.0, max_trials=500, confidence=0.999, prior=None,
               min_inliers=6):
    """P3P inside RANSAC followed by LM refinement on the inliers.

    ``xy`` are normalised-plane observations, ``f`` the per-axis focal
    lengths used to express errors in pixels. When ``prior`` is given and
    already explains at least ``min_inliers`` correspondences, it replaces
    the minimal solver as the starting guess.
    """
    X = np.asarray(X, dtype=float)
    xy = np.asarray(xy, dtype=float)
    n = len(X)
    if n < 4:
        return None
    best_pose, best_in = None, None
    if prior is not None:
        inl = reprojection_errors_px(prior, X, xy, f) < threshold_px
        if inl.sum() >= min_inliers:
            best_pose, best_in = prior, inl
    if best_pose is None:
        bearings = np.concatenate([xy, np.ones((n, 1))], axis=1)
        bearings /= np.linalg.norm(bearings, axis=1, keepdims=True)
        best_count = 0
        trials = max_trials
        k = 0
        while k < trials:
            k += 1
            s = rng.choice(n, size=4, replace=False)
            for pose in p3p(bearings[s[:3]], X[s[:3]]):
                # fourth point disambiguates mirror solutions cheaply
                if reprojection_errors_px(pose, X[s[3:]], xy[s[3:]], f)[0] > threshold_px:
                    continue
                inl = reprojection_errors_px(pose, X, xy, f) < threshold_px
                c = int(inl.sum())
                if c > best_count:
                    best_count, best_pose, best_in = c, pose, inl
                    ratio = c / n
                    if ratio >= 1.0:
                        trials = k
                    else:
                        need = math.log(1 - confidence) / math.log(max(1e-12, 1 - ratio ** 4))
                        trials = min(trials, max(k, int(math.ceil(need))))
        if best_pose is None:
            return None
    pose, its = refine_pose(best_pose, X[best_in], xy[best_in])
    inl = reprojection_errors_px(pose, X, xy, f) < threshold_px
    if inl.sum() > best_in.sum():
        pose, extra = refine_pose(pose, X[inl], xy[inl])
        its += extra
        inl = reprojection_errors_px(pose, X, xy, f) < threshold_px
    return PnPResult(pose, inl, its)


def triangulate_dlt(poses, xy):
    """Linear triangulation from normalised observations in two or more views."""
    rows = []
    for pose, (x, y) in zip(poses, xy):
        P = np.hstack([pose.R, pose.t[:, None]])
        rows.append(x * P[2] - P[0])
        rows.append(y * P[2] - P[1])
    A = np.array(rows)
    # row scaling improves conditioning without changing the solution
    A /= np.linalg.norm(A, axis=1, keepdims=True)
    _, _, Vt = np.linalg.svd(A)
    h = Vt[-1]
    if abs(h[3]) < 1e-15:
        return None
    return h[:3] / h[3]


def triangulation_angle(centers, X):
    """Largest angle (radians) subtended at ``X`` by any pair of camera centres."""
    rays = np.asarray(centers) - X
    rays /= np.linalg.norm(rays, axis=1, keepdims=True)
    c = np.clip(rays @ rays.T, -1.0, 1.0)
    return float(np.arccos(c.min()))


@dataclass
class TriangulationResult:
    position: np.ndarray
    inliers: np.ndarray  # boolean mask over measurements
    angle: float


def triangulate_ransac(poses, xy, f, rng, threshold_px=4.0, min_angle_deg=1.5, max_trials=50):
    """RANSAC over measurement pairs with DLT per sample.

    Consensus requires pixel error below ``threshold_px`` and positive depth.
    Returns None when no pair yields a consensus of two with enough
    triangulation angle.
    """
    m = len(poses)
    if m < 2:
        return None
    xy = np.asarray(xy, dtype=float)
    f = np.asarray(f, dtype=float).reshape(-1, 2)
    pairs = list(itertools.combinations(range(m), 2))
    if len(pairs) > max_trials:
        pick = rng.choice(len(pairs), size=max_trials, replace=False)
        pairs = [pairs[i] for i in sorted(pick)]
    centers = np.array([p.center for p in poses])
    min_angle = math.radians(min_angle_deg)
    best = None
    for i, j in pairs:
        X = triangulate_dlt([poses[i], poses[j]], xy[[i, j]])
        if X is None or not np.all(np.isfinite(X)):
            continue
        err = _errors(poses, X, xy, f)
        inl = err < threshold_px
        if inl.sum() < 2:
            continue
        key = (int(inl.sum()), -float(err[inl].mean()))
        if best is None or key > best[0]:
            best = (key, inl)
    if best is None:
        return None
    inl = best[1]
    X = triangulate_dlt([poses[k] for k in np.flatnonzero(inl)], xy[inl])
    if X is None:
        return None
    err = _errors(poses, X, xy, f)
    inl = inl & (err < threshold_px)
    if inl.sum() < 2:
        return None
    angle = triangulation_angle(centers[inl], X)
    if angle < min_angle:
        return None
    return TriangulationResult(X, inl, angle)


def _errors(poses, X, xy, f):
    e = np.empty(len(poses))
    for k, pose in enumerate(poses):
        Xc = pose.transform(X)
        if Xc[2] <= DEPTH_EPSILON:
            e[k] = np.inf
        else:
            d = (Xc[:2] / Xc[2] - xy[k]) * f[k]
            e[k] = math.hypot(d[0], d[1])
    return e
