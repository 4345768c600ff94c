import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_pose
from lidarsfm.errors import MissingNormals
from lidarsfm.geometry import CameraIntrinsics, CameraPose
from lidarsfm.lidar_map import (NO_SOURCE, LidarMap, depth_lookup, estimate_normals, frustum_points, load_ply,
                                nearest_within, nearest_within_many, read_pgm16, render_depth, splat_radius)
from lidarsfm.ply import write_ply

INTR = CameraIntrinsics(200.0, 200.0, 80.0, 60.0, 160, 120)


def linear_nearest(positions, q, radius):
    d = np.sqrt(((positions - q) ** 2).sum(axis=1))
    i = int(np.argmin(d))  # argmin returns the first, i.e. smallest, index on ties
    return (i, d[i]) if d[i] <= radius else None


def up_map(points):
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    return LidarMap(points, np.tile([0.0, 0.0, 1.0], (len(points), 1)))


def test_voxel_index_partitions_points():
    rng = np.random.default_rng(0)
    lmap = LidarMap(rng.uniform(-5, 5, (2000, 3)), np.tile([0, 0, 1.0], (2000, 1)), voxel_size=0.7)
    cells = lmap.voxel_index
    allidx = np.concatenate(list(cells.values()))
    assert np.array_equal(np.sort(allidx), np.arange(2000))
    for key, idx in cells.items():
        assert np.all(np.floor(lmap.positions[idx] / 0.7).astype(int) == key)


def test_kd_tree_matches_linear_scan_on_10k_queries():
    rng = np.random.default_rng(1)
    pts = rng.uniform(0, 10, (5000, 3))
    # duplicated and grid points provoke exact distance ties
    pts[100:200] = pts[:100]
    pts[200:300] = np.round(pts[200:300])
    lmap = up_map(pts)
    q = np.vstack([rng.uniform(-1, 11, (9000, 3)), np.round(rng.uniform(0, 10, (1000, 3))) + 0.5])
    radius = rng.uniform(0.05, 1.5, len(q))
    idx, dist = nearest_within_many(lmap, q, radius)
    for k in range(len(q)):
        ref = linear_nearest(lmap.positions, q[k], radius[k])
        if ref is None:
            assert idx[k] == -1
        else:
            assert idx[k] == ref[0] and dist[k] == ref[1]


def test_nearest_within_examples():
    lmap = up_map([[0, 0, 0], [3, 0, 0]])
    assert nearest_within(lmap, [3, 0, 0], 1e-3) == (1, 0.0)
    assert nearest_within(up_map([[0, 0, 0]]), [1, 0, 0], 0.5) is None
    assert nearest_within(up_map([[0, 0, 0]]), [1, 0, 0], 1.0) == (0, 1.0)


def test_estimate_normals_plane():
    rng = np.random.default_rng(2)
    pts = np.column_stack([rng.uniform(0, 3, 100), rng.uniform(0, 3, 100), np.full(100, 2.0)])
    est = estimate_normals(up_map(pts), k=8)
    assert np.allclose(np.abs(est.normals[:, 2]), 1.0, atol=1e-6)
    assert not est.degenerate.any()


def test_estimate_normals_two_walls():
    g = np.linspace(0.05, 2.95, 30)
    a, b = np.meshgrid(g, g)
    wall_a = np.column_stack([np.zeros(a.size), a.ravel(), b.ravel()])  # x = 0
    wall_b = np.column_stack([a.ravel(), np.zeros(a.size), b.ravel()])  # y = 0
    lmap = estimate_normals(up_map(np.vstack([wall_a, wall_b])), k=10)
    spacing = g[1] - g[0]
    reach = 3 * spacing
    na, nb = lmap.normals[:len(wall_a)], lmap.normals[len(wall_a):]
    far_a = wall_a[:, 1] > reach
    far_b = wall_b[:, 0] > reach
    assert np.all(np.degrees(np.arccos(np.clip(np.abs(na[far_a, 0]), -1, 1))) < 0.1)
    assert np.all(np.degrees(np.arccos(np.clip(np.abs(nb[far_b, 1]), -1, 1))) < 0.1)


def test_estimate_normals_collinear_is_degenerate():
    lmap = estimate_normals(up_map([[0, 0, 0], [1, 1, 1], [2, 2, 2]]), k=3)
    assert lmap.degenerate.all()
    assert np.all(lmap.normals == 0)


def test_missing_normals(tmp_path):
    p = tmp_path / "xyz.ply"
    rng = np.random.default_rng(3)
    pts = np.column_stack([rng.uniform(0, 1, 50), rng.uniform(0, 1, 50), np.zeros(50)])
    write_ply(p, {"x": pts[:, 0], "y": pts[:, 1], "z": pts[:, 2]})
    with pytest.raises(MissingNormals):
        load_ply(str(p), estimate=False)
    lmap = load_ply(str(p), normal_k=8)
    assert np.allclose(np.abs(lmap.normals[:, 2]), 1.0)


def test_frustum_examples():
    pose = CameraPose.identity()
    assert len(frustum_points(up_map([[0, 0, -1], [1, 1, -5]]), pose, INTR, 30)) == 0
    assert list(frustum_points(up_map([[0, 0, 15]]), pose, INTR, 30)) == [0]


@given(st.integers(0, 2**32 - 1))
def test_frustum_is_superset_of_exact(seed):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-20, 20, (3000, 3))
    lmap = LidarMap(pts, np.tile([0, 0, 1.0], (3000, 1)), voxel_size=rng.uniform(0.3, 3))
    pose = random_pose(rng, spread=3.0)
    height = rng.uniform(2, 25)
    got = set(frustum_points(lmap, pose, INTR, height).tolist())
    pc = pose.transform(pts)
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = INTR.fx * pc[:, 0] / z + INTR.cx
        v = INTR.fy * pc[:, 1] / z + INTR.cy
    inside = (z > 0) & (z < height) & (u > 0) & (u < INTR.width) & (v > 0) & (v < INTR.height)
    assert set(np.flatnonzero(inside).tolist()) <= got


def test_splat_radius_law():
    h = 30.0
    assert splat_radius(h, h) == 0
    assert splat_radius(20.0, h) == math.floor(2 * 10 / 20)
    assert splat_radius(0.5, h) == 8
    d = np.linspace(0.1, 30, 500)
    r = splat_radius(d, h)
    assert np.all(np.diff(r) <= 0)
    assert np.array_equal(r, np.minimum(8, np.floor(2 * (h - d) / d)).astype(int))


def test_single_point_at_far_limit():
    img = render_depth(up_map([[0, 0, 30.0]]), CameraPose.identity(), INTR, 30.0)
    assert (img.source_index != NO_SOURCE).sum() == 1
    assert img.source_index[60, 80] == 0 and img.depth[60, 80] == 30.0


def test_z_buffer_nearest_wins():
    lmap = up_map([[0.5, 0.5, 5.0], [0.2, 0.2, 2.0]])  # both project to pixel (100, 80)
    img = render_depth(lmap, CameraPose.identity(), INTR, 30.0, beta=0.0)
    assert img.depth[80, 100] == 2.0 and img.source_index[80, 100] == 1


@pytest.mark.parametrize("d", [3.0, 6.0, 7.5, 12.0, 29.0])
def test_splat_footprint(d):
    img = render_depth(up_map([[0, 0, d]]), CameraPose.identity(), INTR, 30.0)
    r = int(min(8, math.floor(2 * (30 - d) / d)))
    mask = img.source_index == 0
    assert mask.sum() == (2 * r + 1) ** 2
    rows, cols = np.nonzero(mask)
    assert rows.min() == 60 - r and cols.max() == 80 + r


@pytest.fixture(scope="module")
def room_map():
    rng = np.random.default_rng(4)
    pts, nrm = [], []
    for axis, val in [(2, 0.0), (0, 6.0), (1, 5.0), (0, -4.0)]:
        p = rng.uniform(-4, 6, (4000, 3))
        p[:, axis] = val + rng.normal(scale=0.01, size=4000)
        n = np.zeros(3)
        n[axis] = 1.0
        pts.append(p)
        nrm.append(np.tile(n, (4000, 1)))
    return LidarMap(np.vstack(pts), np.vstack(nrm), voxel_size=1.0)


def test_depth_image_invariants(room_map):
    pose = CameraPose.look_at([0, 0, 1.5], [5, 3, 1.0])
    img = render_depth(room_map, pose, INTR, 30.0)
    ys, xs = np.nonzero(img.source_index != NO_SOURCE)
    assert len(ys) > 0
    src = img.source_index[ys, xs]
    pc = pose.transform(room_map.positions[src])
    assert np.array_equal(img.depth[ys, xs], pc[:, 2])
    assert np.all(img.depth[ys, xs] > 0)
    u = np.floor(INTR.fx * pc[:, 0] / pc[:, 2] + INTR.cx)
    v = np.floor(INTR.fy * pc[:, 1] / pc[:, 2] + INTR.cy)
    cheb = np.maximum(np.abs(u - xs), np.abs(v - ys))
    assert np.all(cheb <= splat_radius(pc[:, 2], 30.0))


def test_depth_lookup_equals_render(room_map):
    rng = np.random.default_rng(5)
    for _ in range(3):
        pose = CameraPose.look_at([0, 0, 1.5], [rng.uniform(-3, 5), rng.uniform(-3, 4), rng.uniform(0, 3)])
        img = render_depth(room_map, pose, INTR, 30.0)
        px = np.column_stack([rng.uniform(-5, INTR.width + 5, 2000), rng.uniform(-5, INTR.height + 5, 2000)])
        src, depth = depth_lookup(room_map, pose, INTR, px, 30.0)
        u, v = np.floor(px[:, 0]).astype(int), np.floor(px[:, 1]).astype(int)
        ok = (u >= 0) & (u < INTR.width) & (v >= 0) & (v < INTR.height)
        assert np.array_equal(src[ok], img.source_index[v[ok], u[ok]])
        assert np.array_equal(depth[ok], img.depth[v[ok], u[ok]])
        assert np.all(src[~ok] == NO_SOURCE)


def test_pgm_round_trip(tmp_path, room_map):
    img = render_depth(room_map, CameraPose.look_at([0, 0, 1.5], [5, 0, 1.5]), INTR, 30.0)
    img.write_pgm(tmp_path / "d.pgm")
    back = read_pgm16(tmp_path / "d.pgm")
    assert back.shape == (INTR.height, INTR.width)
    assert np.allclose(back, np.round(img.depth * 1000) / 1000, atol=1e-12)
