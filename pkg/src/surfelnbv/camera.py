"""Pinhole camera model, 5-DoF poses and quaternion helpers.

Conventions used throughout the package:

* world frame is z-up;
* camera frame is x right, y down, z forward (optical axis);
* pixel ``(row v, col u)`` has its center at image coordinates
  ``(u + 0.5, v + 0.5)`` and the principal point sits at ``(W/2, H/2)``;
* depth images store the euclidean range along the pixel ray, not z-depth;
* quaternions are ``(w, x, y, z)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class CameraIntrinsics:
    """Square-pixel pinhole camera.

    ``resolution`` is ``(width, height)``.  The focal length is derived from
    the horizontal field of view and shared by both axes.
    """

    fov_deg: tuple[float, float] = (60.0, 60.0)
    resolution: tuple[int, int] = (64, 64)
    depth_range: tuple[float, float] = (0.1, 5.0)

    def __post_init__(self):
        d_near, d_far = self.depth_range
        if not 0.0 < d_near < d_far:
            raise ValueError(f"invalid depth range {self.depth_range}")
        if min(self.resolution) < 8:
            raise ValueError(f"resolution must be >= 8 px, got {self.resolution}")

    @property
    def width(self) -> int:
        return int(self.resolution[0])

    @property
    def height(self) -> int:
        return int(self.resolution[1])

    @property
    def focal(self) -> float:
        return 0.5 * self.width / math.tan(math.radians(self.fov_deg[0]) / 2.0)

    @property
    def cx(self) -> float:
        return 0.5 * self.width

    @property
    def cy(self) -> float:
        return 0.5 * self.height

    @property
    def d_near(self) -> float:
        return float(self.depth_range[0])

    @property
    def d_far(self) -> float:
        return float(self.depth_range[1])

    def pixel_rays(self) -> np.ndarray:
        """Unit ray directions in the camera frame, shape (H, W, 3)."""
        u = (np.arange(self.width) + 0.5 - self.cx) / self.focal
        v = (np.arange(self.height) + 0.5 - self.cy) / self.focal
        uu, vv = np.meshgrid(u, v)
        rays = np.stack([uu, vv, np.ones_like(uu)], axis=-1)
        return rays / np.linalg.norm(rays, axis=-1, keepdims=True)


@dataclass(frozen=True)
class Pose:
    """Camera position plus yaw (about world z) and pitch (positive looks up)."""

    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    yaw: float = 0.0
    pitch: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))
        if not -math.pi / 2 - 1e-12 <= self.pitch <= math.pi / 2 + 1e-12:
            raise ValueError(f"pitch {self.pitch} outside [-pi/2, pi/2]")

    @property
    def rotation(self) -> np.ndarray:
        """Camera-to-world rotation; columns are the right, down and forward axes."""
        cy, sy = math.cos(self.yaw), math.sin(self.yaw)
        cp, sp = math.cos(self.pitch), math.sin(self.pitch)
        forward = np.array([cp * cy, cp * sy, sp])
        right = np.array([sy, -cy, 0.0])
        down = np.cross(forward, right)
        return np.stack([right, down, forward], axis=1)

    @property
    def forward(self) -> np.ndarray:
        return self.rotation[:, 2]

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - self.position) @ self.rotation

    def camera_to_world(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.position

    def as_array(self) -> np.ndarray:
        return np.array([*self.position, self.yaw, self.pitch])

    @classmethod
    def from_array(cls, values) -> "Pose":
        values = [float(v) for v in values]
        return cls(np.array(values[:3]), values[3], values[4])

    @classmethod
    def look_at(cls, position, target) -> "Pose":
        d = np.asarray(target, dtype=float) - np.asarray(position, dtype=float)
        n = np.linalg.norm(d)
        if n < 1e-12:
            return cls(np.asarray(position, dtype=float))
        d = d / n
        yaw = math.atan2(d[1], d[0]) % (2 * math.pi)
        pitch = math.asin(max(-1.0, min(1.0, d[2])))
        return cls(np.asarray(position, dtype=float), yaw, pitch)


def project_points(points_cam: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """Perspective projection of camera-frame points to image coordinates."""
    p = np.asarray(points_cam, dtype=float)
    z = p[..., 2]
    u = intr.focal * p[..., 0] / z + intr.cx
    v = intr.focal * p[..., 1] / z + intr.cy
    return np.stack([u, v], axis=-1)


def quat_to_rotmat(q) -> np.ndarray:
    """Rotation matrix of a (w, x, y, z) quaternion; normalizes the input."""
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    r = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return r.reshape(q.shape[:-1] + (3, 3))


def rotmat_to_quat(r: np.ndarray) -> np.ndarray:
    """(w, x, y, z) quaternion with w >= 0 for a single rotation matrix."""
    r = np.asarray(r, dtype=float)
    tr = np.trace(r)
    if tr > 0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = 2.0 * math.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2])
        q = [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
    elif r[1, 1] > r[2, 2]:
        s = 2.0 * math.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2])
        q = [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1])
        q = [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def frame_from_normal(n) -> np.ndarray:
    """Rotation whose third column is ``n``.

    The first column is the world axis most orthogonal to ``n`` projected
    onto the tangent plane, so the in-plane rotation is deterministic.
    """
    n = np.asarray(n, dtype=float)
    n = n / np.linalg.norm(n)
    axis = np.eye(3)[int(np.argmin(np.abs(n)))]
    t1 = axis - np.dot(axis, n) * n
    t1 /= np.linalg.norm(t1)
    t2 = np.cross(n, t1)
    return np.stack([t1, t2, n], axis=1)
