"""Synthetic ground-truth scenes and a simulated RGB-D camera.

Scenes are built from axis-aligned boxes and triangles with a diffuse
color each.  Ray casting is exact and vectorized over rays and primitives.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camera import CameraIntrinsics, Pose

HIT_EPS = 1e-9
LIGHT_DIR = np.array([0.3, 0.5, 1.0]) / np.linalg.norm([0.3, 0.5, 1.0])


@dataclass(frozen=True)
class Hit:
    distance: float
    color: np.ndarray
    normal: np.ndarray


@dataclass
class RgbdFrame:
    rgb: np.ndarray
    depth: np.ndarray
    pose: Pose
    frame_index: int = 0


class GroundTruthScene:
    """Immutable collection of colored boxes and triangles inside ``bounds``."""

    def __init__(self, bounds_min, bounds_max, boxes=(), box_colors=(), triangles=(), tri_colors=()):
        self.bounds_min = np.asarray(bounds_min, dtype=float).reshape(3)
        self.bounds_max = np.asarray(bounds_max, dtype=float).reshape(3)
        self.boxes = np.asarray(boxes, dtype=float).reshape(-1, 2, 3)
        self.box_colors = np.asarray(box_colors, dtype=float).reshape(-1, 3)
        self.triangles = np.asarray(triangles, dtype=float).reshape(-1, 3, 3)
        self.tri_colors = np.asarray(tri_colors, dtype=float).reshape(-1, 3)
        self._validate()

    def _validate(self):
        if np.any(self.bounds_max <= self.bounds_min):
            raise ValueError("scene bounds must have positive extent")
        if len(self.boxes) != len(self.box_colors) or len(self.triangles) != len(self.tri_colors):
            raise ValueError("every primitive needs exactly one color")
        for colors in (self.box_colors, self.tri_colors):
            if colors.size and (colors.min() < 0 or colors.max() > 1):
                raise ValueError("colors must lie in [0, 1]")
        if len(self.boxes) and np.any(self.boxes[:, 1] <= self.boxes[:, 0]):
            raise ValueError("boxes must have positive extent")
        if len(self.triangles):
            area = 0.5 * np.linalg.norm(
                np.cross(self.triangles[:, 1] - self.triangles[:, 0], self.triangles[:, 2] - self.triangles[:, 0]),
                axis=1,
            )
            if np.any(area <= 0):
                raise ValueError("degenerate triangle")
        lo, hi = self.primitive_aabbs()
        tol = 1e-9
        if len(lo) and (np.any(lo < self.bounds_min - tol) or np.any(hi > self.bounds_max + tol)):
            raise ValueError("primitives must lie inside the scene bounds")

    @property
    def n_primitives(self) -> int:
        return len(self.boxes) + len(self.triangles)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.bounds_min + self.bounds_max)

    def primitive_aabbs(self):
        lo = np.concatenate([self.boxes[:, 0], self.triangles.min(axis=1)]) if self.n_primitives else np.zeros((0, 3))
        hi = np.concatenate([self.boxes[:, 1], self.triangles.max(axis=1)]) if self.n_primitives else np.zeros((0, 3))
        return lo, hi

    # ------------------------------------------------------------------ rays
    def cast_rays(self, origins, dirs):
        """Nearest hits for many rays.

        Returns ``(t, color, normal)`` where misses have ``t = inf`` and zero
        color/normal.  Normals face the ray origin.
        """
        dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
        origins = np.broadcast_to(np.asarray(origins, dtype=float), dirs.shape)
        n = len(dirs)
        best_t = np.full(n, np.inf)
        color = np.zeros((n, 3))
        normal = np.zeros((n, 3))
        if len(self.boxes):
            t, nrm, idx = _intersect_boxes(origins, dirs, self.boxes)
            better = t < best_t
            best_t[better] = t[better]
            color[better] = self.box_colors[idx[better]]
            normal[better] = nrm[better]
        if len(self.triangles):
            t, nrm, idx = _intersect_triangles(origins, dirs, self.triangles)
            better = t < best_t
            best_t[better] = t[better]
            color[better] = self.tri_colors[idx[better]]
            normal[better] = nrm[better]
        return best_t, color, normal

    def clearance(self, points) -> np.ndarray:
        """Euclidean distance from each point to the nearest primitive AABB."""
        points = np.atleast_2d(points)
        lo, hi = self.primitive_aabbs()
        if not len(lo):
            return np.full(len(points), np.inf)
        gap = np.maximum(np.maximum(lo[None] - points[:, None], points[:, None] - hi[None]), 0.0)
        return np.linalg.norm(gap, axis=-1).min(axis=1)

    def free_voxel_mask(self, origin, voxel_size: float, dims) -> np.ndarray:
        """Voxels inside the bounds whose closed box touches no primitive AABB."""
        dims = tuple(int(d) for d in dims)
        idx = np.indices(dims).reshape(3, -1).T
        vmin = np.asarray(origin) + idx * voxel_size
        vmax = vmin + voxel_size
        inside = np.all(vmin >= self.bounds_min - 1e-9, axis=1) & np.all(vmax <= self.bounds_max + 1e-9, axis=1)
        lo, hi = self.primitive_aabbs()
        free = inside.copy()
        for a, b in zip(lo, hi):
            touch = np.all(a[None] <= vmax, axis=1) & np.all(b[None] >= vmin, axis=1)
            free &= ~touch
        return free.reshape(dims)

    # ----------------------------------------------------------------- io
    def to_dict(self) -> dict:
        prims = [
            {"kind": "box", "min": b[0].tolist(), "max": b[1].tolist(), "rgb": c.tolist()}
            for b, c in zip(self.boxes, self.box_colors)
        ]
        prims += [
            {"kind": "triangle", "vertices": t.tolist(), "rgb": c.tolist()}
            for t, c in zip(self.triangles, self.tri_colors)
        ]
        return {"bounds": {"min": self.bounds_min.tolist(), "max": self.bounds_max.tolist()}, "primitives": prims}

    @classmethod
    def from_dict(cls, doc: dict) -> "GroundTruthScene":
        boxes, box_colors, tris, tri_colors = [], [], [], []
        for prim in doc["primitives"]:
            kind = prim["kind"]
            if kind == "box":
                boxes.append([prim["min"], prim["max"]])
                box_colors.append(prim["rgb"])
            elif kind == "triangle":
                tris.append(prim["vertices"])
                tri_colors.append(prim["rgb"])
            else:
                raise ValueError(f"unknown primitive kind {kind!r}")
        return cls(doc["bounds"]["min"], doc["bounds"]["max"], boxes, box_colors, tris, tri_colors)


def _intersect_boxes(origins, dirs, boxes):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (boxes[None, :, 0, :] - origins[:, None, :]) * inv[:, None, :]
        t2 = (boxes[None, :, 1, :] - origins[:, None, :]) * inv[:, None, :]
    # rays parallel to a slab: inside -> unbounded, outside -> empty
    parallel = (dirs == 0)[:, None, :]
    inside = (origins[:, None, :] >= boxes[None, :, 0, :]) & (origins[:, None, :] <= boxes[None, :, 1, :])
    t_lo = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    t_hi = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    t_near = t_lo.max(axis=2)
    t_far = t_hi.min(axis=2)
    hit = (t_near <= t_far) & (t_far > HIT_EPS)
    entering = t_near > HIT_EPS
    t = np.where(hit, np.where(entering, t_near, t_far), np.inf)
    axis = np.where(entering, t_lo.argmax(axis=2), t_hi.argmin(axis=2))
    best = t.argmin(axis=1)
    rows = np.arange(len(dirs))
    t_best = t[rows, best]
    ax = axis[rows, best]
    normal = np.zeros((len(dirs), 3))
    normal[rows, ax] = -np.sign(dirs[rows, ax])
    return t_best, normal, best


def _intersect_triangles(origins, dirs, tris):
    v0 = tris[:, 0]
    e1 = tris[:, 1] - v0
    e2 = tris[:, 2] - v0
    p = np.cross(dirs[:, None, :], e2[None])
    det = np.einsum("tk,rtk->rt", e1, p)
    ok = np.abs(det) > 1e-14
    inv_det = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    s = origins[:, None, :] - v0[None]
    u = np.einsum("rtk,rtk->rt", s, p) * inv_det
    qv = np.cross(s, e1[None])
    v = np.einsum("rk,rtk->rt", dirs, qv) * inv_det
    t = np.einsum("tk,rtk->rt", e2, qv) * inv_det
    hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > HIT_EPS)
    t = np.where(hit, t, np.inf)
    best = t.argmin(axis=1)
    rows = np.arange(len(dirs))
    geo = np.cross(e1, e2)
    geo /= np.linalg.norm(geo, axis=1, keepdims=True)
    normal = geo[best]
    flip = np.einsum("rk,rk->r", normal, dirs) > 0
    normal[flip] *= -1
    return t[rows, best], normal, best


def ray_cast(scene: GroundTruthScene, origin, direction) -> Hit | None:
    """Nearest intersection of one ray with the scene, or ``None`` on a miss."""
    direction = np.asarray(direction, dtype=float)
    if abs(np.linalg.norm(direction) - 1.0) > 1e-9:
        raise ValueError("ray direction must be unit length")
    t, color, normal = scene.cast_rays(np.asarray(origin, dtype=float)[None], direction[None])
    if not np.isfinite(t[0]):
        return None
    return Hit(float(t[0]), color[0], normal[0])


def shade(color: np.ndarray, normal: np.ndarray) -> np.ndarray:
    """Fixed-light, view-independent diffuse shading."""
    lam = np.clip(normal @ LIGHT_DIR, 0.0, None)
    return color * (0.6 + 0.4 * lam)[..., None]


def render_gt(
    scene: GroundTruthScene,
    pose: Pose,
    intr: CameraIntrinsics,
    noise_sigma_slope: float = 0.01,
    rng: np.random.Generator | None = None,
    frame_index: int = 0,
) -> RgbdFrame:
    """Ray-cast an RGB-D frame with range-proportional Gaussian depth noise.

    Depth outside ``intr.depth_range`` (after noise) is set to 0.
    """
    rays_cam = intr.pixel_rays().reshape(-1, 3)
    dirs = rays_cam @ pose.rotation.T
    t, color, normal = scene.cast_rays(pose.position, dirs)
    shape = (intr.height, intr.width)
    depth = np.where(np.isfinite(t), t, 0.0).reshape(shape)
    rgb = shade(color, normal).reshape(shape + (3,))
    if noise_sigma_slope > 0:
        if rng is None:
            raise ValueError("a generator is required for noisy rendering")
        depth = depth + rng.standard_normal(shape) * noise_sigma_slope * depth
    valid = (depth >= intr.d_near) & (depth <= intr.d_far)
    depth = np.where(valid, depth, 0.0)
    return RgbdFrame(rgb=rgb, depth=depth, pose=pose, frame_index=frame_index)


def _surface_patches(scene: GroundTruthScene):
    """Planar patches as (kind, origin, edge_a, edge_b, area, normal)."""
    patches = []
    for lo, hi in scene.boxes:
        ext = hi - lo
        for axis in range(3):
            a, b = [i for i in range(3) if i != axis]
            ea = np.zeros(3)
            eb = np.zeros(3)
            ea[a] = ext[a]
            eb[b] = ext[b]
            for side, base in ((-1.0, lo), (1.0, lo + np.eye(3)[axis] * ext[axis])):
                nrm = np.zeros(3)
                nrm[axis] = side
                patches.append(("quad", base, ea, eb, ext[a] * ext[b], nrm))
    for tri in scene.triangles:
        ea, eb = tri[1] - tri[0], tri[2] - tri[0]
        cr = np.cross(ea, eb)
        area = 0.5 * np.linalg.norm(cr)
        patches.append(("tri", tri[0], ea, eb, area, cr / np.linalg.norm(cr)))
    return patches


def sample_surface_points(scene: GroundTruthScene, n: int, rng: np.random.Generator):
    """Area-uniform samples on all primitive surfaces; returns (points, normals)."""
    if n <= 0:
        raise ValueError("n must be positive")
    patches = _surface_patches(scene)
    if not patches:
        raise ValueError("scene has no primitives")
    areas = np.array([p[4] for p in patches])
    choice = rng.choice(len(patches), size=n, p=areas / areas.sum())
    a = rng.random(n)
    b = rng.random(n)
    points = np.empty((n, 3))
    normals = np.empty((n, 3))
    for i, (kind, base, ea, eb, _, nrm) in enumerate(patches):
        sel = choice == i
        if not sel.any():
            continue
        ai, bi = a[sel], b[sel]
        if kind == "tri":
            fold = ai + bi > 1
            ai = np.where(fold, 1 - ai, ai)
            bi = np.where(fold, 1 - bi, bi)
        points[sel] = base + ai[:, None] * ea + bi[:, None] * eb
        normals[sel] = nrm
    return points, normals


def sample_test_viewpoints(
    scene: GroundTruthScene,
    voxel_map,
    n: int,
    rng: np.random.Generator,
    pitch_band_deg=(-30.0, 30.0),
    replace: bool = False,
) -> list[Pose]:
    """Poses uniform over ground-truth free voxels of ``voxel_map``'s grid."""
    if n == 0:
        return []
    free = np.argwhere(scene.free_voxel_mask(voxel_map.origin, voxel_map.voxel_size, voxel_map.dims))
    if not len(free):
        raise ValueError("scene has no free space on this grid")
    if n > len(free) and not replace:
        raise ValueError(f"{n} viewpoints requested but only {len(free)} free voxels; pass replace=True")
    pick = rng.choice(len(free), size=n, replace=replace)
    centers = voxel_map.origin + (free[pick] + 0.5) * voxel_map.voxel_size
    jitter = rng.uniform(-0.25, 0.25, size=(n, 3)) * voxel_map.voxel_size
    yaw = rng.uniform(0.0, 2 * math.pi, size=n)
    lo, hi = np.radians(pitch_band_deg)
    pitch = rng.uniform(lo, hi, size=n)
    return [Pose(p, float(y), float(t)) for p, y, t in zip(centers + jitter, yaw, pitch)]


def _quad(p0, p1, p2, p3):
    return [[p0, p1, p2], [p0, p2, p3]]


def builtin_room() -> GroundTruthScene:
    """A 4 x 4 x 2.5 m room with inward walls and a handful of obstacles."""
    X, Y, Z = 4.0, 4.0, 2.5
    tris, tri_colors = [], []
    walls = [
        (_quad([0, 0, 0], [X, 0, 0], [X, Y, 0], [0, Y, 0]), [0.55, 0.45, 0.35]),  # floor
        (_quad([0, 0, Z], [0, Y, Z], [X, Y, Z], [X, 0, Z]), [0.90, 0.90, 0.85]),  # ceiling
        (_quad([0, 0, 0], [0, Y, 0], [0, Y, Z], [0, 0, Z]), [0.80, 0.30, 0.30]),
        (_quad([X, 0, 0], [X, 0, Z], [X, Y, Z], [X, Y, 0]), [0.30, 0.60, 0.80]),
        (_quad([0, 0, 0], [0, 0, Z], [X, 0, Z], [X, 0, 0]), [0.40, 0.75, 0.40]),
        (_quad([0, Y, 0], [X, Y, 0], [X, Y, Z], [0, Y, Z]), [0.85, 0.80, 0.40]),
    ]
    for quad, col in walls:
        tris += quad
        tri_colors += [col, col]
    tris.append([[3.0, 3.5, 0.0], [3.8, 3.5, 0.0], [3.4, 3.95, 1.2]])
    tri_colors.append([0.60, 0.20, 0.70])
    boxes = [
        ([0.5, 2.6, 0.70], [1.7, 3.5, 0.78]),  # table top
        ([0.9, 2.9, 0.00], [1.3, 3.2, 0.70]),  # table pedestal
        ([3.2, 0.3, 0.00], [3.9, 1.3, 1.60]),  # cabinet
        ([2.6, 2.6, 0.00], [2.9, 2.9, 2.50]),  # pillar
        ([1.0, 0.8, 0.00], [1.5, 1.3, 0.50]),  # crate
    ]
    box_colors = [[0.50, 0.30, 0.15], [0.35, 0.25, 0.15], [0.20, 0.30, 0.60], [0.70, 0.70, 0.70], [0.90, 0.50, 0.10]]
    return GroundTruthScene([0, 0, 0], [X, Y, Z], boxes, box_colors, tris, tri_colors)


def load_scene(source: str | Path) -> GroundTruthScene:
    """Load a JSON scene file, or ``builtin:room``."""
    source = str(source)
    if source.startswith("builtin:"):
        name = source.split(":", 1)[1]
        if name != "room":
            raise ValueError(f"unknown builtin scene {name!r}")
        return builtin_room()
    with open(source) as fh:
        return GroundTruthScene.from_dict(json.load(fh))


def save_scene(scene: GroundTruthScene, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(scene.to_dict(), fh, indent=1)
