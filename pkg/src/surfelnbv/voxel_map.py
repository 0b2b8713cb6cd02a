"""Coarse log-odds occupancy grid: free/unknown/occupied state, frontiers,
the planning lattice and the unexplored-voxel census for candidate views.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numba
import numpy as np

from .camera import CameraIntrinsics, Pose

L_HIT = 0.85
L_MISS = -0.4
L_MIN = -2.0
L_MAX = 3.5
P_FREE_MAX = 0.5

_NEIGHBORS6 = np.array(
    [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], dtype=np.int64
)


class VoxelState(enum.Enum):
    UNKNOWN = "unknown"
    FREE = "free"
    OCCUPIED = "occupied"


@dataclass(frozen=True)
class RoiVoxel:
    center: np.ndarray
    normal: np.ndarray
    kind: str  # "frontier" or "low_confidence"
    range_to_robot: float = 0.0
    index: tuple = ()


@numba.njit(cache=True)
def _trace_rays(sensor, points, grid_origin, voxel_size, dims, hit_mark, miss_mark):
    nx, ny, nz = dims[0], dims[1], dims[2]
    cur0 = np.empty(3, np.int64)
    for a in range(3):
        cur0[a] = int(math.floor((sensor[a] - grid_origin[a]) / voxel_size))
    for r in range(points.shape[0]):
        p = points[r]
        cur = cur0.copy()
        end = np.empty(3, np.int64)
        step = np.zeros(3, np.int64)
        t_max = np.empty(3)
        t_delta = np.empty(3)
        for a in range(3):
            end[a] = int(math.floor((p[a] - grid_origin[a]) / voxel_size))
            d = p[a] - sensor[a]
            if d > 0:
                step[a] = 1
                t_max[a] = ((cur[a] + 1) * voxel_size + grid_origin[a] - sensor[a]) / d
                t_delta[a] = voxel_size / d
            elif d < 0:
                step[a] = -1
                t_max[a] = (cur[a] * voxel_size + grid_origin[a] - sensor[a]) / d
                t_delta[a] = -voxel_size / d
            else:
                t_max[a] = np.inf
                t_delta[a] = np.inf
        end_inside = 0 <= end[0] < nx and 0 <= end[1] < ny and 0 <= end[2] < nz
        while True:
            if cur[0] == end[0] and cur[1] == end[1] and cur[2] == end[2]:
                break
            if not (0 <= cur[0] < nx and 0 <= cur[1] < ny and 0 <= cur[2] < nz):
                break
            miss_mark[cur[0], cur[1], cur[2]] = 1
            a = 0
            if t_max[1] < t_max[a]:
                a = 1
            if t_max[2] < t_max[a]:
                a = 2
            if t_max[a] > 1.0:
                break
            cur[a] += step[a]
            t_max[a] += t_delta[a]
        if end_inside:
            hit_mark[end[0], end[1], end[2]] = 1


class VoxelMap:
    """Dense occupancy grid storing log-odds and an observed flag per voxel."""

    def __init__(self, origin, voxel_size: float = 0.2, dims=(20, 20, 13)):
        self.origin = np.asarray(origin, dtype=float).reshape(3)
        self.voxel_size = float(voxel_size)
        self.dims = tuple(int(d) for d in dims)
        self.log_odds = np.zeros(self.dims)
        self.observed = np.zeros(self.dims, dtype=bool)

    @classmethod
    def for_bounds(cls, bounds_min, bounds_max, voxel_size: float = 0.2, pad: int = 1) -> "VoxelMap":
        """Grid covering the bounds plus ``pad`` voxels on every side."""
        bounds_min = np.asarray(bounds_min, dtype=float)
        extent = np.asarray(bounds_max, dtype=float) - bounds_min
        dims = np.ceil(extent / voxel_size - 1e-9).astype(int) + 2 * pad
        return cls(bounds_min - pad * voxel_size, voxel_size, dims)

    def copy(self) -> "VoxelMap":
        other = VoxelMap(self.origin, self.voxel_size, self.dims)
        other.log_odds = self.log_odds.copy()
        other.observed = self.observed.copy()
        return other

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dims))

    # ----------------------------------------------------------- geometry
    def index_of(self, point) -> np.ndarray:
        return np.floor((np.asarray(point, dtype=float) - self.origin) / self.voxel_size).astype(int)

    def center_of(self, index) -> np.ndarray:
        return self.origin + (np.asarray(index, dtype=float) + 0.5) * self.voxel_size

    def in_bounds(self, index) -> bool:
        index = np.asarray(index)
        return bool(np.all(index >= 0) and np.all(index < np.array(self.dims)))

    def contains(self, point) -> bool:
        return self.in_bounds(self.index_of(point))

    # ------------------------------------------------------------ update
    def integrate_point_cloud(self, sensor_origin, points) -> "VoxelMap":
        """Log-odds update from one scan.

        Each voxel traversed by a sensor ray gets one miss update per scan and
        each endpoint voxel one hit update; an endpoint voxel is never also
        counted as a miss within the same scan.  Rays leaving the grid are
        clipped and only apply misses.
        """
        sensor_origin = np.asarray(sensor_origin, dtype=float)
        if not self.contains(sensor_origin):
            raise ValueError("sensor origin outside the voxel map")
        points = np.ascontiguousarray(np.asarray(points, dtype=float).reshape(-1, 3))
        hit = np.zeros(self.dims, dtype=np.uint8)
        miss = np.zeros(self.dims, dtype=np.uint8)
        _trace_rays(sensor_origin, points, self.origin, self.voxel_size, np.array(self.dims, np.int64), hit, miss)
        hit = hit.astype(bool)
        miss = miss.astype(bool) & ~hit
        self.log_odds[miss] += L_MISS
        self.log_odds[hit] += L_HIT
        np.clip(self.log_odds, L_MIN, L_MAX, out=self.log_odds)
        self.observed |= hit | miss
        return self

    # ------------------------------------------------------------ states
    def free_mask(self) -> np.ndarray:
        p_occ = 1.0 / (1.0 + np.exp(-self.log_odds))
        return self.observed & (p_occ < P_FREE_MAX)

    def occupied_mask(self) -> np.ndarray:
        return self.observed & ~self.free_mask()

    def unknown_mask(self) -> np.ndarray:
        return ~self.observed

    def state(self, index) -> VoxelState:
        index = tuple(int(i) for i in index)
        if len(index) != 3 or not self.in_bounds(index):
            raise IndexError(f"voxel index {index} outside dims {self.dims}")
        if not self.observed[index]:
            return VoxelState.UNKNOWN
        p_occ = 1.0 / (1.0 + math.exp(-self.log_odds[index]))
        return VoxelState.FREE if p_occ < P_FREE_MAX else VoxelState.OCCUPIED

    def explored_fraction(self, region: np.ndarray | None = None) -> float:
        if region is None:
            return float(self.observed.mean())
        return float((self.observed & region).sum() / max(int(region.sum()), 1))

    # ---------------------------------------------------------- queries
    def frontiers(self, robot_position=None) -> list[RoiVoxel]:
        """Free voxels with at least one unknown 6-neighbour.

        The normal is the normalized mean direction away from the unknown
        6-neighbours.  When that cancels out it falls back to the mean
        direction towards the free neighbours, then to +z.
        """
        free = self.free_mask()
        unknown = self.unknown_mask()
        free_nb = np.zeros(self.dims + (3,))
        unk_nb = np.zeros(self.dims + (3,))
        has_unknown = np.zeros(self.dims, dtype=bool)
        for off in _NEIGHBORS6:
            f = _shifted(free, off)
            u = _shifted(unknown, off)
            free_nb += f[..., None] * off
            unk_nb += u[..., None] * off
            has_unknown |= u
        mask = free & has_unknown
        out = []
        for idx in np.argwhere(mask):
            i = tuple(idx)
            n = -unk_nb[i]
            if np.linalg.norm(n) < 1e-9:
                n = free_nb[i]
            if np.linalg.norm(n) < 1e-9:
                n = np.array([0.0, 0.0, 1.0])
            n = n / np.linalg.norm(n)
            c = self.center_of(idx)
            rng = 0.0 if robot_position is None else float(np.linalg.norm(c - robot_position))
            out.append(RoiVoxel(c, n, "frontier", rng, i))
        return out

    def free_lattice(self) -> np.ndarray:
        return self.center_of(np.argwhere(self.free_mask())).reshape(-1, 3)

    def count_unexplored_visible(self, pose: Pose, depth: np.ndarray, intr: CameraIntrinsics) -> int:
        """Unknown voxels whose center is in view and in front of the rendered depth.

        A voxel counts when its center projects inside the image, its range
        from the camera lies within the depth range, and that range is
        strictly smaller than the rendered depth at the projected pixel
        (invalid rendered depth counts as infinity).
        """
        lo = np.maximum(self.index_of(pose.position - intr.d_far), 0)
        hi = np.minimum(self.index_of(pose.position + intr.d_far) + 1, np.array(self.dims))
        if np.any(hi <= lo):
            return 0
        sub = self.unknown_mask()[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
        idx = np.argwhere(sub) + lo
        if not len(idx):
            return 0
        return int(visible_in_front(self.center_of(idx), pose, depth, intr).sum())

    # ---------------------------------------------------------------- io
    def dump(self, path) -> None:
        """One line per observed voxel: ``i j k log_odds state``."""
        free = self.free_mask()
        with open(path, "w") as fh:
            fh.write("# i j k log_odds state\n")
            for i, j, k in np.argwhere(self.observed):
                state = "free" if free[i, j, k] else "occupied"
                fh.write(f"{i} {j} {k} {self.log_odds[i, j, k]:.6f} {state}\n")

    def load_dump(self, path) -> "VoxelMap":
        """Restore log-odds and observed flags written by ``dump``."""
        self.log_odds[:] = 0.0
        self.observed[:] = False
        data = np.loadtxt(path, dtype=str, ndmin=2, skiprows=1)
        if data.size:
            idx = data[:, :3].astype(int)
            sel = (idx[:, 0], idx[:, 1], idx[:, 2])
            self.log_odds[sel] = data[:, 3].astype(float)
            self.observed[sel] = True
        return self


def visible_in_front(points: np.ndarray, pose: Pose, depth: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """Mask of world points that are in view and closer than the depth map."""
    cam = pose.world_to_camera(points)
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.focal * cam[:, 0] / z + intr.cx
        v = intr.focal * cam[:, 1] / z + intr.cy
    ok = (z > 0) & (u >= 0) & (u < intr.width) & (v >= 0) & (v < intr.height)
    rng = np.linalg.norm(cam, axis=1)
    ok &= (rng >= intr.d_near) & (rng <= intr.d_far)
    col = np.clip(np.floor(np.where(ok, u, 0)).astype(int), 0, intr.width - 1)
    row = np.clip(np.floor(np.where(ok, v, 0)).astype(int), 0, intr.height - 1)
    d = depth[row, col]
    d = np.where(d > 0, d, np.inf)
    return ok & (rng < d)


def _shifted(mask: np.ndarray, off) -> np.ndarray:
    """``out[i] = mask[i + off]`` with out-of-grid neighbours set to False."""
    out = np.zeros_like(mask)
    src = tuple(slice(max(o, 0), mask.shape[a] + min(o, 0)) for a, o in enumerate(off))
    dst = tuple(slice(max(-o, 0), mask.shape[a] + min(-o, 0)) for a, o in enumerate(off))
    out[dst] = mask[src]
    return out
