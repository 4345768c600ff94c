"""Pinhole camera model, rigid poses and the projection arithmetic.

Conventions: quaternions are (w, x, y, z); poses map world to camera,
``x_cam = R @ x_world + t``; pixel origin is the top-left corner with x to
the right and y down.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonPositiveDepth

DEPTH_EPSILON = 1e-6


def quat_normalize(q):
    q = np.array(q, dtype=float)
    n = np.linalg.norm(q)
    # leave unit quaternions bit-for-bit alone so written poses re-read exactly
    if abs(n - 1.0) > 8 * np.finfo(float).eps:
        q = q / n
    # canonical hemisphere keeps outputs comparable
    return -q if q[0] < 0 else q


def quat_multiply(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_to_matrix(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R):
    """Shepperd's method; robust for every rotation."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return quat_normalize(q)


def quat_from_rotvec(w):
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    half = 0.5 * theta
    if theta < 1e-8:
        # second-order Taylor terms of cos/sinc
        return np.concatenate([[1.0 - theta * theta / 8.0], (0.5 - theta * theta / 48.0) * w])
    return np.concatenate([[np.cos(half)], np.sin(half) / theta * w])


def rotvec_from_quat(q):
    q = quat_normalize(q)
    v = q[1:]
    s = np.linalg.norm(v)
    if s < 1e-12:
        return 2.0 * v
    return 2.0 * np.arctan2(s, q[0]) / s * v


def skew(v):
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotation_angle(R):
    """Geodesic angle of a rotation matrix, in radians."""
    c = (np.trace(R) - 1.0) / 2.0
    s = np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2.0
    return float(np.arctan2(s, np.clip(c, -1.0, 1.0)))


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def corners(self):
        w, h = float(self.width), float(self.height)
        return np.array([[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]])


@dataclass(frozen=True, eq=False)
class CameraPose:
    """World-to-camera rigid transform with a unit-quaternion rotation."""

    q: np.ndarray
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = quat_normalize(self.q)
        t = np.array(self.t, dtype=float).reshape(3)
        q.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "_R", quat_to_matrix(q))
        self._R.flags.writeable = False

    @classmethod
    def identity(cls):
        return cls(np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def from_matrix(cls, R, t):
        return cls(matrix_to_quat(R), t)

    @classmethod
    def look_at(cls, center, target, up=(0.0, 0.0, 1.0)):
        """Camera at ``center`` whose optical axis points at ``target``."""
        center = np.asarray(center, dtype=float)
        z = np.asarray(target, dtype=float) - center
        z /= np.linalg.norm(z)
        x = np.cross(z, up)
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.vstack([x, y, z])
        return cls.from_matrix(R, -R @ center)

    @property
    def R(self):
        return self._R

    @property
    def center(self):
        return -self._R.T @ self.t

    def transform(self, p):
        """Map world points (..., 3) into the camera frame."""
        return np.asarray(p, dtype=float) @ self._R.T + self.t

    def compose(self, other):
        """``self ∘ other``: apply ``other`` first."""
        q = quat_multiply(self.q, other.q)
        return CameraPose(q, self._R @ other.t + self.t)

    def inverse(self):
        qi = self.q * np.array([1.0, -1.0, -1.0, -1.0])
        return CameraPose(qi, -self._R.T @ self.t)

    def retract(self, delta):
        """Apply a 6-vector tangent update ``(rotvec, dt)``: R <- Exp(w) R, t <- t + dt."""
        delta = np.asarray(delta, dtype=float)
        q = quat_multiply(quat_from_rotvec(delta[:3]), self.q)
        return CameraPose(q, self.t + delta[3:])

    def __eq__(self, other):
        if not isinstance(other, CameraPose):
            return NotImplemented
        return np.array_equal(self.q, other.q) and np.array_equal(self.t, other.t)

    def __repr__(self):
        return f"CameraPose(q={self.q.tolist()}, t={self.t.tolist()})"


def transform_to_camera(pose: CameraPose, p_world):
    return pose.transform(p_world)


def project_pinhole(intr: CameraIntrinsics, p_cam):
    p = np.asarray(p_cam, dtype=float)
    if not p[2] > DEPTH_EPSILON:
        raise NonPositiveDepth(f"depth {p[2]} is not in front of the camera")
    return np.array([intr.fx * p[0] / p[2] + intr.cx, intr.fy * p[1] / p[2] + intr.cy])


def project_points(intr: CameraIntrinsics, p_cam):
    """Vectorised projection of (N, 3) camera-frame points; no depth check."""
    p = np.asarray(p_cam, dtype=float)
    z = p[..., 2]
    return np.stack([intr.fx * p[..., 0] / z + intr.cx, intr.fy * p[..., 1] / z + intr.cy], axis=-1)


def normalized_plane_coords(intr: CameraIntrinsics, px):
    px = np.asarray(px, dtype=float)
    return np.stack([(px[..., 0] - intr.cx) / intr.fx, (px[..., 1] - intr.cy) / intr.fy], axis=-1)


def backproject_ray(intr: CameraIntrinsics, px):
    """Unit-norm camera-frame ray(s) through pixel(s) ``px``."""
    xn = normalized_plane_coords(intr, px)
    ray = np.concatenate([xn, np.ones(xn.shape[:-1] + (1,))], axis=-1)
    return ray / np.linalg.norm(ray, axis=-1, keepdims=True)
