import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lidarsfm.association import (AssociationConfig, Kind, associate_nn, associate_nn_many, associate_projected,
                                  classify_ground, nn_radius, projected_candidates, select_by_angle)
from lidarsfm.geometry import CameraIntrinsics, CameraPose, project_points
from lidarsfm.lidar_map import LidarMap, render_depth
from lidarsfm.scene import SceneStore

INTR = CameraIntrinsics(200.0, 200.0, 80.0, 60.0, 160, 120)


def tilted(deg, axis=0):
    n = np.zeros(3)
    n[2] = math.cos(math.radians(deg))
    n[axis] = math.sin(math.radians(deg))
    return n


def test_nn_radius_examples():
    cfg = AssociationConfig(r0=1.0, delta=0.2, r_min=0.2)
    assert nn_radius(cfg, 0) == 1.0
    assert nn_radius(cfg, 3) == pytest.approx(0.4)
    assert nn_radius(cfg, 10) == 0.2


@given(st.floats(0.1, 5), st.floats(0.01, 1), st.floats(0.01, 1), st.integers(0, 200))
def test_radius_schedule_monotone(r0, delta, frac, k):
    cfg = AssociationConfig(r0=r0, delta=delta, r_min=r0 * frac)
    assert nn_radius(cfg, k + 1) <= nn_radius(cfg, k)
    assert nn_radius(cfg, k) >= cfg.r_min


def test_classify_ground():
    cfg = AssociationConfig(ground_cos_threshold=0.966)
    assert classify_ground(np.array([0, 0, 1.0]), cfg)
    assert classify_ground(np.array([0, 0, -1.0]), cfg)
    assert not classify_ground(np.array([1.0, 0, 0]), cfg)
    assert classify_ground(tilted(14), cfg)
    assert not classify_ground(tilted(16), cfg)


@given(st.sampled_from(list(Kind)), st.booleans())
def test_weight_is_function_of_kind_and_ground(kind, g):
    cfg = AssociationConfig()
    expect = cfg.w_g if g else (cfg.w_p if kind is Kind.PROJECTED else cfg.w_n)
    assert cfg.weight(kind, g) == expect


def test_associate_nn_examples():
    cfg = AssociationConfig()
    lmap = LidarMap([[0, 0, 0], [3, 0, 0]], [[0, 0, 1], [1, 0, 0]])
    c = associate_nn(lmap, [0, 0, 0], 0, cfg, pid=7)
    assert c.lidar_index == 0 and c.is_ground and c.kind is Kind.NEAREST_NEIGHBOR
    assert c.weight == cfg.w_g and c.scene_point_id == 7
    c = associate_nn(lmap, [3.1, 0, 0], 2, cfg)
    assert c.lidar_index == 1 and not c.is_ground and c.weight == cfg.w_n and c.search_round == 2
    small = AssociationConfig(r0=0.4, r_min=0.1)
    assert associate_nn(lmap, [0.5, 0, 0], 0, small) is None


def test_degenerate_normals_never_associated():
    lmap = LidarMap([[0, 0, 0], [1, 0, 0]], [[0, 0, 0], [0, 0, 1]])
    assert associate_nn(lmap, [0, 0, 0], 0, AssociationConfig(r0=0.5)) is None


def test_batch_matches_linear_scan():
    rng = np.random.default_rng(0)
    pts = rng.uniform(0, 8, (3000, 3))
    nrm = rng.normal(size=(3000, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    lmap = LidarMap(pts, nrm)
    X = rng.uniform(-1, 9, (2000, 3))
    rounds = rng.integers(0, 12, 2000)
    cfg = AssociationConfig()
    out = associate_nn_many(lmap, X, rounds, cfg, np.arange(2000))
    for k in range(2000):
        d = np.linalg.norm(pts - X[k], axis=1)
        j = int(np.argmin(d))
        if d[j] <= max(cfg.r_min, cfg.r0 - rounds[k] * cfg.delta):
            assert out[k].lidar_index == j
        else:
            assert out[k] is None


def test_separated_planes_associate_to_own_plane():
    # plane separation 2.5 m > 2 * r0: any on-plane point finds its own plane
    g = np.arange(0, 4, 0.2)
    a, b = np.meshgrid(g, g)
    floor = np.column_stack([a.ravel(), b.ravel(), np.zeros(a.size)])
    ceil = floor + [0, 0, 2.5]
    lmap = LidarMap(np.vstack([floor, ceil]), np.tile([0, 0, 1.0], (2 * a.size, 1)))
    rng = np.random.default_rng(1)
    q = np.column_stack([rng.uniform(0, 3.8, 500), rng.uniform(0, 3.8, 500), rng.choice([0.0, 2.5], 500)])
    out = associate_nn_many(lmap, q, np.zeros(500, int), AssociationConfig(), np.arange(500))
    got = np.array([lmap.positions[c.lidar_index, 2] for c in out])
    assert np.array_equal(got, q[:, 2])


def one_image_scene(keypoints, pose=None):
    sc = SceneStore()
    iid = sc.add_image("a", INTR, keypoints)
    sc.images[iid].pose = pose or CameraPose.identity()
    sc.images[iid].registered = True
    return sc


def test_select_by_angle_hand_computed():
    sc = one_image_scene([[80.0, 60.0]])  # principal point -> unit-depth point (0, 0, 1)
    # lines from the LiDAR points to (0, 0, 1) run along -z; normals tilted 5 and 60 degrees
    lmap = LidarMap([[0, 0, 6.0], [0, 0, 5.0]], [tilted(60), tilted(5)])
    assert select_by_angle([(0, 0, 0), (1, 0, 0)], sc, lmap) == 1
    assert select_by_angle([(1, 0, 0), (0, 0, 0)], sc, lmap) == 1
    assert select_by_angle([(0, 0, 0)], sc, lmap) == 0


def test_select_by_angle_frontal_beats_grazing():
    sc = one_image_scene([[80.0, 60.0]])
    lmap = LidarMap([[0, 0, 4.0], [0, 0, 4.0]], [[1, 0, 0], [0, 0, -1]])
    assert select_by_angle([(0, 0, 0), (1, 0, 0)], sc, lmap) == 1


def test_select_by_angle_ties_to_smaller_index():
    sc = one_image_scene([[80.0, 60.0]])
    lmap = LidarMap([[0, 0, 4.0], [0, 0, 4.0]], [[0, 0, 1], [0, 0, 1]])
    assert select_by_angle([(1, 0, 0), (0, 0, 0)], sc, lmap) == 0


@given(st.integers(0, 2**32 - 1))
def test_select_by_angle_brute_force(seed):
    rng = np.random.default_rng(seed)
    kp = np.column_stack([rng.uniform(0, 160, 5), rng.uniform(0, 120, 5)])
    sc = one_image_scene(kp, CameraPose.look_at(rng.normal(size=3), rng.normal(size=3) + [0, 0, 5]))
    n = rng.integers(2, 8)
    nrm = rng.normal(size=(n, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    lmap = LidarMap(rng.normal(size=(n, 3)) * 3 + [0, 0, 5], nrm)
    cands = [(int(i), 0, int(rng.integers(0, 5))) for i in range(n)]
    pose = sc.images[0].pose

    def angle(li, f):
        xn = (kp[f] - [INTR.cx, INTR.cy]) / [INTR.fx, INTR.fy]
        p = pose.R.T @ (np.array([xn[0], xn[1], 1.0]) - pose.t)
        line = p - lmap.positions[li]
        c = abs(line @ nrm[li]) / np.linalg.norm(line)
        return math.degrees(math.acos(min(1.0, c)))

    expect = min(cands, key=lambda c: (angle(c[0], c[2]), c[0]))[0]
    assert select_by_angle(cands, sc, lmap) == expect


def wall_setup(n_common=30):
    """Two posed images of a wall at x=5 sharing ``n_common`` matched landmarks."""
    g = np.arange(-3, 3, 0.05)
    a, b = np.meshgrid(g, g + 1.5)
    wall = np.column_stack([np.full(a.size, 5.0), a.ravel(), b.ravel()])
    lmap = LidarMap(wall, np.tile([-1.0, 0, 0], (a.size, 1)))
    rng = np.random.default_rng(2)
    lm = np.column_stack([np.full(n_common, 5.0), rng.uniform(-1, 1, n_common), rng.uniform(1, 2, n_common)])
    poses = [CameraPose.look_at([0, -0.3, 1.5], [5, 0, 1.5]), CameraPose.look_at([0, 0.3, 1.5], [5, 0, 1.5])]
    sc = SceneStore()
    for k, pose in enumerate(poses):
        iid = sc.add_image(f"img{k}", INTR, project_points(INTR, pose.transform(lm)))
        sc.images[iid].pose = pose
        sc.images[iid].registered = True
    sc.add_matches(0, 1, np.column_stack([np.arange(n_common), np.arange(n_common)]))
    pids = [sc.add_point(lm[k], [(0, k), (1, k)]) for k in range(n_common)]
    return sc, lmap, pids


def test_projected_single_splat_picks_source():
    sc, lmap, pids = wall_setup()
    cfg = AssociationConfig(match_threshold=30)
    out = {c.scene_point_id: c for c in associate_projected(sc, lmap, 1, cfg)}
    assert set(out) == set(pids)
    for img_id in (0, 1):
        img = sc.images[img_id]
        depth = render_depth(lmap, img.pose, INTR, cfg.frustum_height)
        for pid in pids:
            c = out[pid]
            assert c.kind is Kind.PROJECTED and c.weight == cfg.w_p and not c.is_ground
    # every selected index is under the pixel of one of the track features
    cands = projected_candidates(sc, lmap, 1, cfg)
    for pid, cs in cands.items():
        for li, m, f in cs:
            img = sc.images[m]
            u, v = np.floor(img.keypoints[f]).astype(int)
            assert render_depth(lmap, img.pose, INTR, cfg.frustum_height).source_index[v, u] == li
        assert out[pid].lidar_index in {li for li, _, _ in cs}


def test_projected_threshold_gate():
    sc, lmap, _ = wall_setup(n_common=30)
    gated = projected_candidates(sc, lmap, 1, AssociationConfig(match_threshold=50))
    assert all(m == 1 for cs in gated.values() for _, m, _ in cs)
    open_ = projected_candidates(sc, lmap, 1, AssociationConfig(match_threshold=30))
    assert any(m == 0 for cs in open_.values() for _, m, _ in cs)


def test_projected_skips_uncovered_pixels():
    sc, lmap, pids = wall_setup()
    # move the wall map out of view: no splat, no correspondence
    far = LidarMap(lmap.positions + [0, 100, 0], lmap.normals)
    assert associate_projected(sc, far, 1, AssociationConfig()) == []
