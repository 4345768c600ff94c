"""LiDAR map storage, spatial indexing, frustum culling and depth rendering."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import ply
from .errors import MissingNormals, ParseError
from .geometry import DEPTH_EPSILON, CameraIntrinsics, CameraPose, normalized_plane_coords

log = logging.getLogger(__name__)

NO_SOURCE = -1


def _frozen(a, dtype=float):
    a = np.ascontiguousarray(a, dtype=dtype)
    a.flags.writeable = False
    return a


class LidarMap:
    """Immutable LiDAR point cloud with unit normals, voxel grid and kd-tree.

    Points whose normal could not be estimated carry a zero normal and are
    flagged in ``degenerate``; they are never used for association.
    """

    def __init__(self, positions, normals, voxel_size=1.0, degenerate=None):
        positions = np.asarray(positions, dtype=float).reshape(-1, 3)
        normals = np.asarray(normals, dtype=float).reshape(-1, 3)
        if positions.shape != normals.shape:
            raise ValueError("positions and normals differ in shape")
        if not np.all(np.isfinite(positions)):
            raise ValueError("non-finite LiDAR positions")
        if voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        if degenerate is None:
            degenerate = np.linalg.norm(normals, axis=1) < 0.5
        self.positions = _frozen(positions)
        self.normals = _frozen(normals)
        self.degenerate = _frozen(degenerate, dtype=bool)
        self.voxel_size = float(voxel_size)
        self.kd_index = cKDTree(self.positions) if len(positions) else None
        self._build_voxels()

    def __len__(self):
        return len(self.positions)

    def _build_voxels(self):
        keys = np.floor(self.positions / self.voxel_size).astype(np.int64)
        if len(keys) == 0:
            self.voxel_keys = np.zeros((0, 3), dtype=np.int64)
            self._vox_order = np.zeros(0, dtype=np.int64)
            self._vox_start = np.zeros(1, dtype=np.int64)
            return
        uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        self.voxel_keys = _frozen(uniq, dtype=np.int64)
        self._vox_order = _frozen(np.argsort(inverse, kind="stable"), dtype=np.int64)
        counts = np.bincount(inverse, minlength=len(uniq))
        self._vox_start = _frozen(np.concatenate([[0], np.cumsum(counts)]), dtype=np.int64)

    @property
    def voxel_index(self):
        """Mapping ``(i, j, k) -> point indices`` for every occupied voxel."""
        return {
            tuple(int(v) for v in key): self._vox_order[self._vox_start[i]:self._vox_start[i + 1]]
            for i, key in enumerate(self.voxel_keys)
        }

    def voxel_points(self, voxel_ids):
        parts = [self._vox_order[self._vox_start[i]:self._vox_start[i + 1]] for i in voxel_ids]
        if not parts:
            return np.zeros(0, dtype=np.int64)
        return np.sort(np.concatenate(parts))

    def plane_offsets(self, idx):
        return np.einsum("ij,ij->i", self.normals[idx], self.positions[idx])


# -- construction ------------------------------------------------------------


def load_ply(path, voxel_size=1.0, normal_k=10, estimate=True):
    cols = ply.read_ply(path)
    for c in ("x", "y", "z"):
        if c not in cols:
            raise ParseError(f"vertex property {c!r} missing")
    pos = np.stack([cols["x"], cols["y"], cols["z"]], axis=1).astype(float)
    if all(c in cols for c in ("nx", "ny", "nz")):
        nrm = np.stack([cols["nx"], cols["ny"], cols["nz"]], axis=1).astype(float)
        return LidarMap(pos, nrm, voxel_size)
    if not estimate:
        raise MissingNormals(f"{path} has no normals and estimation is disabled")
    log.info("estimating normals for %d points (k=%d)", len(pos), normal_k)
    return estimate_normals(LidarMap(pos, np.zeros_like(pos), voxel_size), normal_k)


def save_ply(lmap, path, binary=True):
    p, n = lmap.positions, lmap.normals
    cols = {"x": p[:, 0], "y": p[:, 1], "z": p[:, 2], "nx": n[:, 0], "ny": n[:, 1], "nz": n[:, 2]}
    ply.write_ply(path, cols, binary=binary)


def estimate_normals(lmap, k=10):
    """Least-eigenvalue eigenvector of each point's k-neighbourhood covariance.

    Collinear (rank < 2) neighbourhoods get a zero normal and are flagged in
    ``degenerate``. Normals are oriented toward the map centroid, i.e. into
    the free space of an enclosing scan.
    """
    if k < 3:
        raise ValueError("k must be at least 3")
    pos = lmap.positions
    if len(pos) < k:
        raise ValueError(f"need at least k={k} points, have {len(pos)}")
    _, nbr = lmap.kd_index.query(pos, k=k)
    nb = pos[nbr]
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0].copy()
    scale = np.maximum(evals[:, 2], np.finfo(float).tiny)
    degenerate = evals[:, 1] <= 1e-10 * scale
    to_center = pos.mean(axis=0) - pos
    flip = np.einsum("ij,ij->i", normals, to_center) < 0
    normals[flip] *= -1.0
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    normals[degenerate] = 0.0
    if degenerate.any():
        log.warning("%d points have degenerate neighbourhoods", int(degenerate.sum()))
    return LidarMap(pos, normals, lmap.voxel_size, degenerate=degenerate)


# -- queries -----------------------------------------------------------------


def nearest_within(lmap, query, radius):
    """Nearest map point to ``query`` if within ``radius`` (inclusive), else None."""
    idx, dist = nearest_within_many(lmap, np.asarray(query, dtype=float)[None], radius)
    if idx[0] < 0:
        return None
    return int(idx[0]), float(dist[0])


def nearest_within_many(lmap, queries, radius):
    """Vectorised ``nearest_within``; ``radius`` may be per query. Misses give index -1.

    Exact distance ties resolve to the smaller index, as a linear scan would.
    """
    queries = np.asarray(queries, dtype=float).reshape(-1, 3)
    n = len(queries)
    out_i = np.full(n, -1, dtype=np.int64)
    out_d = np.full(n, np.inf)
    if n == 0 or lmap.kd_index is None:
        return out_i, out_d
    radius = np.broadcast_to(np.asarray(radius, dtype=float), (n,))
    k = min(4, len(lmap))
    dist, idx = lmap.kd_index.query(queries, k=k)
    dist = dist.reshape(n, k)
    idx = idx.reshape(n, k)
    # recompute exactly as the linear scan does so ties and bounds agree bitwise
    d = np.sqrt(((lmap.positions[idx] - queries[:, None, :]) ** 2).sum(axis=2))
    best = d.min(axis=1)
    tie = np.where(d == best[:, None], idx, np.iinfo(np.int64).max)
    pick = tie.min(axis=1)
    ok = best <= radius
    out_i[ok] = pick[ok]
    out_d[ok] = best[ok]
    return out_i, out_d


# -- frustum & depth images --------------------------------------------------


@dataclass(frozen=True)
class Frustum:
    apex: np.ndarray
    corner_rays: np.ndarray  # (4, 3) world-frame unit directions
    height: float

    def planes(self, axis):
        """Inward half-spaces ``n . p + d >= 0`` for the sides, near and far caps."""
        normals, offsets = [], []
        for i in range(4):
            n = np.cross(self.corner_rays[i], self.corner_rays[(i + 1) % 4])
            if n @ axis < 0:
                n = -n
            normals.append(n)
            offsets.append(-n @ self.apex)
        normals.append(axis)
        offsets.append(-axis @ self.apex)
        normals.append(-axis)
        offsets.append(axis @ self.apex + self.height)
        return np.array(normals), np.array(offsets)


def make_frustum(pose: CameraPose, intr: CameraIntrinsics, height):
    xn = normalized_plane_coords(intr, intr.corners())
    rays = np.concatenate([xn, np.ones((4, 1))], axis=1)
    rays /= np.linalg.norm(rays, axis=1, keepdims=True)
    return Frustum(pose.center, rays @ pose.R, float(height))


def frustum_points(lmap, pose, intr, height):
    """Indices of points in voxels overlapping the viewing pyramid (sorted).

    The voxel test is conservative: an axis-aligned box is dropped only when
    it lies entirely outside one bounding plane. Points behind the camera
    are removed individually.
    """
    if height <= 0:
        raise ValueError("frustum height must be positive")
    if len(lmap.voxel_keys) == 0:
        return np.zeros(0, dtype=np.int64)
    fr = make_frustum(pose, intr, height)
    normals, offsets = fr.planes(pose.R[2])
    lo = lmap.voxel_keys * lmap.voxel_size
    # p-vertex: the box corner furthest along each plane normal
    pv = lo[:, None, :] + lmap.voxel_size * (normals[None, :, :] > 0)
    inside = np.all(np.einsum("vpk,pk->vp", pv, normals) + offsets >= 0, axis=1)
    idx = lmap.voxel_points(np.flatnonzero(inside))
    # voxels touching the apex can hold points behind the camera
    return idx[(lmap.positions[idx] - fr.apex) @ pose.R[2] > 0]


def splat_radius(depth, height, beta=2.0, r_max=8):
    """Half-width in pixels of a point's square splat; zero at the far plane."""
    depth = np.asarray(depth, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        r = np.floor(beta * (height - depth) / depth)
    r = np.where(np.isfinite(r), r, r_max)
    return np.clip(r, 0, r_max).astype(np.int64)


@dataclass
class _Splats:
    index: np.ndarray  # map point index
    depth: np.ndarray
    u: np.ndarray  # integer pixel column of the projection
    v: np.ndarray
    r: np.ndarray
    rank: np.ndarray  # z-buffer priority: (depth, index) order


def _splats(lmap, pose, intr, height, beta, r_max):
    idx = frustum_points(lmap, pose, intr, height)
    pc = pose.transform(lmap.positions[idx])
    z = pc[:, 2]
    keep = (z > DEPTH_EPSILON) & (z <= height)
    idx, pc, z = idx[keep], pc[keep], z[keep]
    uf = np.floor(intr.fx * pc[:, 0] / z + intr.cx)
    vf = np.floor(intr.fy * pc[:, 1] / z + intr.cy)
    r = splat_radius(z, height, beta, r_max)
    hit = (uf + r >= 0) & (uf - r <= intr.width - 1) & (vf + r >= 0) & (vf - r <= intr.height - 1)
    idx, z, r = idx[hit], z[hit], r[hit]
    u, v = uf[hit].astype(np.int64), vf[hit].astype(np.int64)
    order = np.lexsort((idx, z))
    rank = np.empty(len(idx), dtype=np.int64)
    rank[order] = np.arange(len(idx))
    return _Splats(idx, z, u, v, r, rank)


@dataclass
class DepthImage:
    width: int
    height: int
    depth: np.ndarray  # (H, W) meters, 0 = empty
    source_index: np.ndarray  # (H, W) LiDAR index, NO_SOURCE = empty

    def write_pgm(self, path):
        mm = np.clip(np.round(self.depth * 1000.0), 0, 65535).astype(">u2")
        with open(path, "wb") as fh:
            fh.write(f"P5\n{self.width} {self.height}\n65535\n".encode("ascii"))
            fh.write(mm.tobytes())


def read_pgm16(path):
    """Read a 16-bit binary PGM as float meters."""
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ParseError("not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 65535:
        raise ParseError("expected 16-bit PGM")
    pix = np.frombuffer(parts[4][: 2 * w * h], dtype=">u2").reshape(h, w)
    return pix.astype(float) / 1000.0


def render_depth(lmap, pose, intr, height, beta=2.0, r_max=8):
    """Z-buffered splat rendering of the frustum points into a depth image."""
    sp = _splats(lmap, pose, intr, height, beta, r_max)
    W, H = intr.width, intr.height
    buf = np.full(W * H, np.iinfo(np.int64).max, dtype=np.int64)
    for r in np.unique(sp.r):
        sel = sp.r == r
        off = np.arange(-r, r + 1)
        du, dv = np.meshgrid(off, off)
        pu = (sp.u[sel][:, None] + du.ravel()[None, :]).ravel()
        pv = (sp.v[sel][:, None] + dv.ravel()[None, :]).ravel()
        rk = np.repeat(sp.rank[sel], du.size)
        ok = (pu >= 0) & (pu < W) & (pv >= 0) & (pv < H)
        np.minimum.at(buf, pv[ok] * W + pu[ok], rk[ok])
    set_ = buf != np.iinfo(np.int64).max
    by_rank = np.empty(len(sp.rank), dtype=np.int64)
    by_rank[sp.rank] = np.arange(len(sp.rank))
    src = np.full(W * H, NO_SOURCE, dtype=np.int64)
    depth = np.zeros(W * H)
    who = by_rank[buf[set_]]
    src[set_] = sp.index[who]
    depth[set_] = sp.depth[who]
    return DepthImage(W, H, depth.reshape(H, W), src.reshape(H, W))


def depth_lookup(lmap, pose, intr, pixels, height, beta=2.0, r_max=8):
    """Read ``(source_index, depth)`` of the rendered depth image at ``pixels``.

    Equivalent to ``render_depth`` followed by indexing, but only evaluates
    the splats that can cover the requested pixels.
    """
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    n = len(pixels)
    out_i = np.full(n, NO_SOURCE, dtype=np.int64)
    out_d = np.zeros(n)
    sp = _splats(lmap, pose, intr, height, beta, r_max)
    if n == 0 or len(sp.index) == 0:
        return out_i, out_d
    qu = np.floor(pixels[:, 0])
    qv = np.floor(pixels[:, 1])
    valid = (qu >= 0) & (qu < intr.width) & (qv >= 0) & (qv < intr.height)
    tree = cKDTree(np.stack([sp.u, sp.v], axis=1).astype(float))
    q = np.stack([qu, qv], axis=1)
    lists = tree.query_ball_point(q[valid], r=float(r_max) + 0.5, p=np.inf)
    qid = np.flatnonzero(valid)
    lens = np.fromiter((len(x) for x in lists), dtype=np.int64, count=len(lists))
    if lens.sum() == 0:
        return out_i, out_d
    cand = np.fromiter((j for x in lists for j in x), dtype=np.int64, count=int(lens.sum()))
    owner = np.repeat(qid, lens)
    du = np.abs(sp.u[cand] - qu[owner].astype(np.int64))
    dv = np.abs(sp.v[cand] - qv[owner].astype(np.int64))
    cover = np.maximum(du, dv) <= sp.r[cand]
    cand, owner = cand[cover], owner[cover]
    best = np.full(n, np.iinfo(np.int64).max, dtype=np.int64)
    np.minimum.at(best, owner, sp.rank[cand])
    hit = best != np.iinfo(np.int64).max
    by_rank = np.empty(len(sp.rank), dtype=np.int64)
    by_rank[sp.rank] = np.arange(len(sp.rank))
    who = by_rank[best[hit]]
    out_i[hit] = sp.index[who]
    out_d[hit] = sp.depth[who]
    return out_i, out_d
