"""Bundle adjustment with reprojection and weighted point-to-plane factors.

The solver is Levenberg-Marquardt over pose tangent increments
``(rotvec, dt)`` (``R <- Exp(w) R``, ``t <- t + dt``) and point offsets.
Points are eliminated with a Schur complement; the reduced camera system is
solved with a dense Cholesky factorisation.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .association import AssociationConfig, Kind, associate_nn_many, associate_projected
from .errors import EmptyProblem, NumericalFailure
from .geometry import DEPTH_EPSILON, CameraPose

log = logging.getLogger(__name__)

INCREMENTAL = "incremental"
BATCH = "batch"
WHOLE = "whole"
MODES = (INCREMENTAL, BATCH, WHOLE)


# -- residuals & jacobians -------------------------------------------------


def reprojection_residual(pose: CameraPose, X, obs):
    """Normalised-plane residual ``Xc[:2] / Xc[2] - obs``; None when behind the camera."""
    Xc = pose.transform(X)
    if not Xc[2] > DEPTH_EPSILON:
        return None
    return Xc[:2] / Xc[2] - np.asarray(obs, dtype=float)


def reprojection_jacobians(pose: CameraPose, X):
    """``(J_pose (2x6), J_point (2x3))`` of the reprojection residual."""
    Jp, Jx, _ = _reproj_jac(pose.R[None], pose.t[None], np.asarray(X, dtype=float)[None])
    return Jp[0], Jx[0]


def plane_residual(X, normal, offset, weight):
    return weight * (np.dot(normal, X) - offset)


def plane_jacobian(normal, weight):
    return weight * np.asarray(normal, dtype=float)


def _reproj_jac(R, t, X):
    RX = np.einsum("nij,nj->ni", R, X)
    Xc = RX + t
    z = Xc[:, 2]
    iz = 1.0 / z
    n = len(z)
    D = np.zeros((n, 2, 3))
    D[:, 0, 0] = iz
    D[:, 1, 1] = iz
    D[:, 0, 2] = -Xc[:, 0] * iz * iz
    D[:, 1, 2] = -Xc[:, 1] * iz * iz
    # d(Exp(w) R X)/dw = -[RX]x
    S = np.zeros((n, 3, 3))
    S[:, 0, 1], S[:, 0, 2] = RX[:, 2], -RX[:, 1]
    S[:, 1, 0], S[:, 1, 2] = -RX[:, 2], RX[:, 0]
    S[:, 2, 0], S[:, 2, 1] = RX[:, 1], -RX[:, 0]
    Jpose = np.concatenate([D @ S, D], axis=2)
    Jx = D @ R
    return Jpose, Jx, Xc


# -- problem -----------------------------------------------------------------


@dataclass(frozen=True)
class BundleConfig:
    const_track_threshold: int = 8
    sphere_radius: float = 5.0
    loss_scale_px: float = 1.0
    tol_rel: float = 1e-8
    tol_step: float = 1e-10
    max_iters: int = 100
    plane_factors: bool = True
    assoc: AssociationConfig = field(default_factory=AssociationConfig)


@dataclass
class BaProblem:
    mode: str
    anchor: int | None
    pose_ids: list
    pose_const: np.ndarray
    point_ids: list
    point_const: np.ndarray
    obs_cam: np.ndarray
    obs_pt: np.ndarray
    obs_xy: np.ndarray
    obs_f: np.ndarray  # (n, 2) focal lengths for pixel conversion
    pf_pt: np.ndarray
    pf_lidar: np.ndarray
    pf_normal: np.ndarray
    pf_offset: np.ndarray
    pf_weight: np.ndarray
    pf_kind: list
    pf_ground: np.ndarray
    loss_scale: np.ndarray  # per observation, normalised units
    poses: list = None
    points: np.ndarray = None
    scene: object = None

    @property
    def n_projected(self):
        return sum(1 for k in self.pf_kind if k is Kind.PROJECTED)

    @property
    def n_nn(self):
        return sum(1 for k in self.pf_kind if k is Kind.NEAREST_NEIGHBOR)


@dataclass
class SolveReport:
    mode: str
    anchor: int | None
    iterations: int
    initial_cost: float
    final_cost: float
    cost_history: list
    reproj_mean_px: float
    reproj_var_px: float
    reproj_mean_px_before: float
    p2p_mean_before: float
    p2p_mean_after: float
    n_projected: int
    n_nn: int
    n_ground: int
    n_var_poses: int
    n_var_points: int
    n_cheirality: int
    termination: str

    @property
    def n_planes(self):
        return self.n_projected + self.n_nn


def gauge_pinned(normals, points, fixed_points=None, rcond=0.05):
    """True when plane factors (and fixed points) remove all 7 similarity freedoms.

    Each factor constrains the derivative of ``n . X`` along the translation,
    rotation and scale generators; the stacked rows must have full rank.
    """
    normals = np.asarray(normals, dtype=float).reshape(-1, 3)
    X = np.asarray(points, dtype=float).reshape(-1, 3)
    if fixed_points is not None and len(fixed_points):
        F = np.asarray(fixed_points, dtype=float).reshape(-1, 3)
        normals = np.concatenate([normals, np.tile(np.eye(3), (len(F), 1))])
        X = np.concatenate([X, np.repeat(F, 3, axis=0)])
    if len(X) < 7:
        return False
    Xn = X - X.mean(axis=0)
    Xn /= max(np.sqrt((Xn * Xn).sum(axis=1).mean()), 1e-12)
    rows = np.concatenate([normals, np.cross(Xn, normals), (normals * Xn).sum(axis=1, keepdims=True)], axis=1)
    s = np.linalg.svd(rows / np.sqrt(len(rows)), compute_uv=False)
    return bool(s[-1] > rcond * s[0])


def build_problem(scene, lmap, mode, anchor_image_id=None, cfg=BundleConfig()):
    if mode not in MODES:
        raise ValueError(f"unknown BA mode {mode!r}")
    reg = scene.registered_ids()
    if not reg:
        raise EmptyProblem("no registered images")
    if mode in (INCREMENTAL, BATCH) and anchor_image_id is None:
        raise ValueError(f"{mode} BA needs an anchor image")

    if mode == INCREMENTAL:
        near = scene.neighbors(anchor_image_id, cfg.assoc.match_threshold)
        var_poses = sorted({anchor_image_id} | {m for m in near if scene.images[m].registered})
    elif mode == BATCH:
        c = scene.images[anchor_image_id].pose.center
        var_poses = [i for i in reg
                     if np.linalg.norm(scene.images[i].pose.center - c) <= cfg.sphere_radius]
    else:
        var_poses = list(reg)
    var_set = set(var_poses)

    pts = sorted({int(p) for i in var_poses for p in scene.images[i].point_ids if p >= 0})
    if mode == INCREMENTAL:
        pconst = np.array([scene.registered_track_length(p) >= cfg.const_track_threshold for p in pts],
                          dtype=bool)
    else:
        pconst = np.zeros(len(pts), dtype=bool)

    pose_ids = set(var_poses)
    for p, const in zip(pts, pconst):
        if not const:
            pose_ids.update(i for i, _ in scene.points[p].track)
    pose_ids = sorted(pose_ids)
    pose_const = np.array([i not in var_set for i in pose_ids], dtype=bool)
    cam_index = {iid: k for k, iid in enumerate(pose_ids)}

    obs_cam, obs_pt, obs_xy, obs_f, loss = [], [], [], [], []
    for k, p in enumerate(pts):
        for iid, f in scene.points[p].track:
            ci = cam_index.get(iid)
            if ci is None or (pconst[k] and pose_const[ci]):
                continue
            img = scene.images[iid]
            obs_cam.append(ci)
            obs_pt.append(k)
            obs_xy.append(img.normalized[f])
            obs_f.append((img.camera.fx, img.camera.fy))
            loss.append(cfg.loss_scale_px / (0.5 * (img.camera.fx + img.camera.fy)))

    # point-to-plane association for variable points
    var_pts = [p for p, c in zip(pts, pconst) if not c]
    corr = {}
    if cfg.plane_factors and lmap is not None and var_pts:
        if mode == INCREMENTAL:
            tracked = {int(p) for p in scene.images[anchor_image_id].point_ids if p >= 0}
            group1 = [p for p in var_pts if p in tracked]
            for c in associate_projected(scene, lmap, anchor_image_id, cfg.assoc, group1):
                corr[c.scene_point_id] = c
        rest = [p for p in var_pts if p not in corr]
        if rest:
            X = np.array([scene.points[p].position for p in rest])
            rounds = [scene.points[p].rounds for p in rest]
            for p, c in zip(rest, associate_nn_many(lmap, X, rounds, cfg.assoc, rest)):
                if c is not None:
                    corr[p] = c
    for p in var_pts:
        scene.points[p].correspondence = corr.get(p)

    pt_index = {p: k for k, p in enumerate(pts)}
    order = sorted(corr)
    li = np.array([corr[p].lidar_index for p in order], dtype=np.int64)
    normals = lmap.normals[li] if len(li) else np.zeros((0, 3))
    problem = BaProblem(
        mode=mode,
        anchor=anchor_image_id,
        pose_ids=pose_ids,
        pose_const=pose_const,
        point_ids=pts,
        point_const=pconst,
        obs_cam=np.array(obs_cam, dtype=np.int64),
        obs_pt=np.array(obs_pt, dtype=np.int64),
        obs_xy=np.array(obs_xy, dtype=float).reshape(-1, 2),
        obs_f=np.array(obs_f, dtype=float).reshape(-1, 2),
        pf_pt=np.array([pt_index[p] for p in order], dtype=np.int64),
        pf_lidar=li,
        pf_normal=normals,
        pf_offset=lmap.plane_offsets(li) if len(li) else np.zeros(0),
        pf_weight=np.array([corr[p].weight for p in order], dtype=float),
        pf_kind=[corr[p].kind for p in order],
        pf_ground=np.array([corr[p].is_ground for p in order], dtype=bool),
        loss_scale=np.array(loss, dtype=float),
        poses=[scene.images[i].pose for i in pose_ids],
        points=np.array([scene.points[p].position for p in pts], dtype=float).reshape(-1, 3),
        scene=scene,
    )

    if not (~pose_const).any() and not (~pconst).any():
        raise EmptyProblem("no variable blocks")
    # gauge: without a constant pose the plane normals must span 3-D
    if not pose_const.any() and not gauge_pinned(problem.pf_normal, problem.points[problem.pf_pt],
                                                 problem.points[pconst]):
        first = int(np.flatnonzero(~pose_const)[0])
        problem.pose_const[first] = True
        log.debug("gauge anchored at image %d", pose_ids[first])
    if not (~problem.pose_const).any() and not (~pconst).any():
        raise EmptyProblem("no variable blocks")
    return problem


# -- solver ------------------------------------------------------------------


class _State:
    __slots__ = ("poses", "R", "t", "X")

    def __init__(self, poses, X):
        self.poses = poses
        self.R = np.array([p.R for p in poses]).reshape(-1, 3, 3)
        self.t = np.array([p.t for p in poses]).reshape(-1, 3)
        self.X = X


def _evaluate(pb, st, jac=False):
    cam, pt = pb.obs_cam, pb.obs_pt
    if jac:
        Jpose, Jx, Xc = _reproj_jac(st.R[cam], st.t[cam], st.X[pt])
    else:
        Xc = np.einsum("nij,nj->ni", st.R[cam], st.X[pt]) + st.t[cam]
    z = Xc[:, 2]
    valid = z > DEPTH_EPSILON
    zs = np.where(valid, z, 1.0)
    r = Xc[:, :2] / zs[:, None] - pb.obs_xy
    r[~valid] = 0.0
    s = (r * r).sum(axis=1)
    c2 = pb.loss_scale ** 2
    rho = c2 * np.log1p(s / c2)
    d = np.einsum("ij,ij->i", pb.pf_normal, st.X[pb.pf_pt]) - pb.pf_offset if len(pb.pf_pt) else np.zeros(0)
    rp = pb.pf_weight * d
    cost = float(rho.sum() + (rp * rp).sum())
    out = {"cost": cost, "r": r, "valid": valid, "s": s, "d": d, "rp": rp}
    if jac:
        Jpose[~valid] = 0.0
        Jx[~valid] = 0.0
        out["Jpose"], out["Jx"] = Jpose, Jx
    return out


def _reproj_px(pb, ev):
    px = ev["r"] * pb.obs_f
    e = np.sqrt((px * px).sum(axis=1))[ev["valid"]]
    if len(e) == 0:
        return 0.0, 0.0
    return float(e.mean()), float(e.var())


class _Linear:
    """Gauss-Newton normal equations in Schur-ready block form."""

    def __init__(self, pb, ev):
        vc = np.cumsum(~pb.pose_const) - 1
        vc[pb.pose_const] = -1
        vp = np.cumsum(~pb.point_const) - 1
        vp[pb.point_const] = -1
        self.vc, self.vp = vc, vp
        nc, npt = int((~pb.pose_const).sum()), int((~pb.point_const).sum())
        self.nc, self.np = nc, npt

        # first-order robust reweighting: sqrt(rho') scales residual and jacobian
        wgt = 1.0 / (1.0 + ev["s"] / pb.loss_scale ** 2)
        sw = np.sqrt(wgt)
        r = ev["r"] * sw[:, None]
        Jc = ev["Jpose"] * sw[:, None, None]
        Jp = ev["Jx"] * sw[:, None, None]

        oc = vc[pb.obs_cam]
        op = vp[pb.obs_pt]
        A = np.zeros((nc, 6, 6))
        gc = np.zeros((nc, 6))
        V = np.zeros((npt, 3, 3))
        gp = np.zeros((npt, 3))
        mc = oc >= 0
        np.add.at(A, oc[mc], np.einsum("nki,nkj->nij", Jc[mc], Jc[mc]))
        np.add.at(gc, oc[mc], np.einsum("nki,nk->ni", Jc[mc], r[mc]))
        mp = op >= 0
        np.add.at(V, op[mp], np.einsum("nki,nkj->nij", Jp[mp], Jp[mp]))
        np.add.at(gp, op[mp], np.einsum("nki,nk->ni", Jp[mp], r[mp]))
        if len(pb.pf_pt):
            fp = vp[pb.pf_pt]
            m = fp >= 0
            Jn = pb.pf_weight[m, None] * pb.pf_normal[m]
            np.add.at(V, fp[m], Jn[:, :, None] * Jn[:, None, :])
            np.add.at(gp, fp[m], Jn * ev["rp"][m, None])
        both = mc & mp
        W = np.einsum("nki,nkj->nij", Jc[both], Jp[both])  # (m, 6, 3)
        rows = (6 * oc[both])[:, None, None] + np.arange(6)[None, :, None]
        cols = (3 * op[both])[:, None, None] + np.arange(3)[None, None, :]
        rows, cols = np.broadcast_arrays(rows, cols)
        self.B = sp.csr_matrix((W.ravel(), (rows.ravel(), cols.ravel())), shape=(6 * nc, 3 * npt))
        self.A, self.gc, self.V, self.gp = A, gc, V, gp
        self.gradient_norm = float(np.abs(np.concatenate([gc.ravel(), gp.ravel()])).max(initial=0.0))

    def solve(self, lam):
        nc, npt = self.nc, self.np
        eye3 = np.eye(3)
        dV = np.clip(np.einsum("nii->ni", self.V), 1e-12, 1e32)
        Vd = self.V + lam * dV[:, :, None] * eye3
        Vinv = np.linalg.inv(Vd) if npt else np.zeros((0, 3, 3))
        if nc == 0:
            dp = -np.einsum("nij,nj->ni", Vinv, self.gp)
            return np.zeros((0, 6)), dp
        dA = np.clip(np.einsum("nii->ni", self.A), 1e-12, 1e32)
        Ad = self.A + lam * dA[:, :, None] * np.eye(6)
        S = np.zeros((6 * nc, 6 * nc))
        for k in range(nc):
            S[6 * k:6 * k + 6, 6 * k:6 * k + 6] = Ad[k]
        rhs = -self.gc.ravel()
        if npt:
            Vi = sp.bsr_matrix((Vinv, np.arange(npt), np.arange(npt + 1)), shape=(3 * npt, 3 * npt))
            BV = (self.B @ Vi).tocsr()
            S -= (BV @ self.B.T).toarray()
            rhs = rhs + BV @ self.gp.ravel()
        cf = scipy.linalg.cho_factor(S, lower=True, check_finite=False)
        dc = scipy.linalg.cho_solve(cf, rhs, check_finite=False)
        if not np.all(np.isfinite(dc)):
            raise np.linalg.LinAlgError("non-finite camera step")
        if npt:
            back = -self.gp.ravel() - self.B.T @ dc
            dp = np.einsum("nij,nj->ni", Vinv, back.reshape(npt, 3))
        else:
            dp = np.zeros((0, 3))
        return dc.reshape(nc, 6), dp


def _apply(pb, st, lin, dc, dp):
    poses = list(st.poses)
    for k in np.flatnonzero(lin.vc >= 0):
        poses[k] = poses[k].retract(dc[lin.vc[k]])
    X = st.X.copy()
    m = lin.vp >= 0
    X[m] += dp[lin.vp[m]]
    return _State(poses, X)


def solve(problem, cfg=BundleConfig(), write_back=True):
    """Levenberg-Marquardt on ``sum rho(|e_r|^2) + sum (w d)^2``."""
    pb = problem
    st = _State(list(pb.poses), pb.points.copy())
    ev = _evaluate(pb, st, jac=True)
    initial_cost = ev["cost"]
    reproj_before, _ = _reproj_px(pb, ev)
    p2p_before = float(np.abs(ev["d"]).mean()) if len(ev["d"]) else 0.0
    cost = initial_cost
    history = [cost]
    lam = 1e-4
    iterations = 0
    termination = "max_iters"
    lin = _Linear(pb, ev)
    xnorm = np.linalg.norm(st.X[~pb.point_const]) + sum(np.linalg.norm(p.t) for p in st.poses)

    while iterations < cfg.max_iters:
        if lin.gradient_norm == 0.0:
            termination = "zero_gradient"
            break
        iterations += 1
        try:
            dc, dp = lin.solve(lam)
        except np.linalg.LinAlgError:
            lam *= 10.0
            if lam > 1e16:
                raise NumericalFailure("normal equations indefinite at maximum damping") from None
            continue
        step = np.sqrt((dc * dc).sum() + (dp * dp).sum())
        if step <= cfg.tol_step * (xnorm + cfg.tol_step):
            termination = "step"
            break
        cand = _apply(pb, st, lin, dc, dp)
        ev_new = _evaluate(pb, cand, jac=False)
        # residuals behind a camera are zeroed, so a step may not create new ones
        if ev_new["cost"] < cost and (~ev_new["valid"]).sum() <= (~ev["valid"]).sum():
            rel = (cost - ev_new["cost"]) / cost
            st, cost = cand, ev_new["cost"]
            history.append(cost)
            lam = max(lam / 10.0, 1e-12)
            if rel < cfg.tol_rel:
                termination = "cost"
                break
            ev = _evaluate(pb, st, jac=True)
            lin = _Linear(pb, ev)
        else:
            lam *= 10.0
            if lam > 1e16:
                termination = "damping"
                break

    ev = _evaluate(pb, st, jac=False)
    reproj_mean, reproj_var = _reproj_px(pb, ev)
    report = SolveReport(
        mode=pb.mode,
        anchor=pb.anchor,
        iterations=iterations,
        initial_cost=initial_cost,
        final_cost=cost,
        cost_history=history,
        reproj_mean_px=reproj_mean,
        reproj_var_px=reproj_var,
        reproj_mean_px_before=reproj_before,
        p2p_mean_before=p2p_before,
        p2p_mean_after=float(np.abs(ev["d"]).mean()) if len(ev["d"]) else 0.0,
        n_projected=pb.n_projected,
        n_nn=pb.n_nn,
        n_ground=int(pb.pf_ground.sum()),
        n_var_poses=int((~pb.pose_const).sum()),
        n_var_points=int((~pb.point_const).sum()),
        n_cheirality=int((~ev["valid"]).sum()),
        termination=termination,
    )
    pb.poses, pb.points = st.poses, st.X
    if write_back and pb.scene is not None:
        _write_back(pb)
    return report


def _write_back(pb):
    scene = pb.scene
    for k, iid in enumerate(pb.pose_ids):
        if not pb.pose_const[k]:
            scene.images[iid].pose = pb.poses[k]
    for k, pid in enumerate(pb.point_ids):
        if not pb.point_const[k]:
            pt = scene.points[pid]
            pt.position = pb.points[k].copy()
            pt.rounds += 1
