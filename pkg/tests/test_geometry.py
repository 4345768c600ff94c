import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_pose
from lidarsfm.errors import NonPositiveDepth
from lidarsfm.geometry import (CameraIntrinsics, CameraPose, backproject_ray, matrix_to_quat,
                               normalized_plane_coords, project_pinhole, quat_from_rotvec, quat_multiply,
                               rotation_angle, rotvec_from_quat, transform_to_camera)

finite = st.floats(-50, 50, allow_nan=False)
vec3 = st.tuples(finite, finite, finite).map(np.array)
seeds = st.integers(0, 2**32 - 1)


def reference_matrix(q):
    # textbook Rodrigues form, written independently of quat_to_matrix
    w, v = q[0], np.asarray(q[1:])
    vx = np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])
    return (w * w - v @ v) * np.eye(3) + 2 * np.outer(v, v) + 2 * w * vx


def test_identity_transform():
    assert np.array_equal(transform_to_camera(CameraPose.identity(), [1, 2, 3]), [1.0, 2.0, 3.0])


def test_yaw_90():
    h = math.sqrt(2) / 2
    out = transform_to_camera(CameraPose(np.array([h, 0, 0, h])), [1, 0, 0])
    assert np.allclose(out, [0, 1, 0], atol=1e-12)


@given(seeds)
def test_transform_matches_matrix_reference(seed):
    rng = np.random.default_rng(seed)
    pose = random_pose(rng)
    p = rng.normal(size=3) * 10
    assert np.allclose(pose.transform(p), reference_matrix(pose.q) @ p + pose.t, atol=1e-10)


@given(seeds)
def test_rigidity(seed):
    rng = np.random.default_rng(seed)
    pose = random_pose(rng)
    a, b = rng.normal(size=(2, 3)) * 5
    assert abs(np.linalg.norm(pose.transform(a) - pose.transform(b)) - np.linalg.norm(a - b)) < 1e-10


def test_project_examples():
    intr = CameraIntrinsics(100, 100, 50, 50, 100, 100)
    assert np.allclose(project_pinhole(intr, [0, 0, 5]), [50, 50])
    assert np.allclose(project_pinhole(intr, [1, 1, 2]), [100, 100])
    with pytest.raises(NonPositiveDepth):
        project_pinhole(intr, [0, 0, -1])
    with pytest.raises(NonPositiveDepth):
        project_pinhole(intr, [0, 0, 1e-7])


def test_backproject_examples():
    intr = CameraIntrinsics(100, 100, 50, 50, 100, 100)
    assert np.allclose(backproject_ray(intr, [50, 50]), [0, 0, 1])
    assert np.allclose(backproject_ray(intr, [100, 100]), np.array([1, 1, 2]) / math.sqrt(6), atol=1e-15)


def test_normalized_coords_example():
    intr = CameraIntrinsics(2000, 2000, 2016, 1512, 4032, 3024)
    assert normalized_plane_coords(intr, [2416, 1512])[0] == pytest.approx(0.2, abs=1e-15)
    assert np.allclose(normalized_plane_coords(intr, [2016, 1512]), [0, 0])


def test_project_backproject_round_trip(intr):
    rng = np.random.default_rng(1)
    p = np.column_stack([rng.uniform(-5, 5, 1000), rng.uniform(-5, 5, 1000), rng.uniform(0.5, 20, 1000)])
    for pc in p:
        ray = backproject_ray(intr, project_pinhole(intr, pc))
        assert np.linalg.norm(np.cross(ray, pc / np.linalg.norm(pc))) < 1e-9
        assert ray @ pc > 0


@given(st.floats(-1000, 1000), st.floats(-1000, 1000), st.floats(0.01, 100))
def test_pixel_round_trip(u, v, lam):
    intr = CameraIntrinsics(400, 410, 320, 240, 640, 480)
    px = project_pinhole(intr, lam * backproject_ray(intr, [u, v]))
    assert np.allclose(px, [u, v], atol=1e-9 * max(1.0, abs(u), abs(v)))


@given(vec3, st.floats(0.01, 100))
def test_projection_scale_invariance(p, lam):
    intr = CameraIntrinsics(400, 400, 320, 240, 640, 480)
    p = p.copy()
    p[2] = abs(p[2]) + 0.5
    assert np.allclose(project_pinhole(intr, p), project_pinhole(intr, lam * p), rtol=1e-12, atol=1e-9)


@given(seeds)
def test_normalized_inverse_of_projection(seed):
    rng = np.random.default_rng(seed)
    intr = CameraIntrinsics(*rng.uniform(100, 1000, 2), 320, 240, 640, 480)
    pc = np.array([*rng.normal(size=2), rng.uniform(0.5, 10)])
    xn = normalized_plane_coords(intr, project_pinhole(intr, pc))
    assert np.allclose(xn, pc[:2] / pc[2], atol=1e-12)


@given(seeds)
def test_compose_associative_and_inverse(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (random_pose(rng) for _ in range(3))
    lhs = a.compose(b).compose(c)
    rhs = a.compose(b.compose(c))
    assert np.allclose(lhs.R, rhs.R, atol=1e-12) and np.allclose(lhs.t, rhs.t, atol=1e-9)
    e = a.compose(a.inverse())
    assert np.allclose(e.R, np.eye(3), atol=1e-9) and np.allclose(e.t, 0, atol=1e-9)


def test_quaternion_drift_over_many_updates():
    rng = np.random.default_rng(2)
    pose = CameraPose.identity()
    for _ in range(10000):
        pose = pose.retract(rng.normal(scale=0.05, size=6))
        pose = pose.compose(CameraPose(quat_from_rotvec(rng.normal(scale=0.05, size=3))))
    assert abs(np.linalg.norm(pose.q) - 1.0) < 1e-9
    assert np.allclose(pose.R @ pose.R.T, np.eye(3), atol=1e-9)


@given(seeds)
def test_quaternion_conversions(seed):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=3)
    w *= rng.uniform(0, 3.1) / np.linalg.norm(w)
    q = quat_from_rotvec(w)
    assert np.allclose(rotvec_from_quat(q), w, atol=1e-10)
    assert np.allclose(matrix_to_quat(reference_matrix(q)), q if q[0] >= 0 else -q, atol=1e-10)
    assert rotation_angle(reference_matrix(q)) == pytest.approx(np.linalg.norm(w), abs=1e-10)
    q2 = quat_from_rotvec(rng.normal(size=3))
    assert np.allclose(reference_matrix(quat_multiply(q, q2)), reference_matrix(q) @ reference_matrix(q2),
                       atol=1e-12)


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        CameraIntrinsics(0, 100, 50, 50, 100, 100)
    with pytest.raises(ValueError):
        CameraIntrinsics(100, 100, 150, 50, 100, 100)


def test_look_at_points_axis_at_target():
    pose = CameraPose.look_at([1, 2, 3], [4, 6, 3])
    pc = pose.transform([4, 6, 3])
    assert np.allclose(pc[:2], 0, atol=1e-12) and pc[2] == pytest.approx(5.0)
    assert np.allclose(pose.center, [1, 2, 3])
