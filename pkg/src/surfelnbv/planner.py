"""Next-best-view planning: random and ROI-cone candidate sampling, view
utility from the voxel census and rendered confidence, A* travel cost and
normalized utility-minus-cost selection.
"""

from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .camera import CameraIntrinsics, Pose
from .splat_map import SplatMap, render
from .voxel_map import RoiVoxel, VoxelMap

MODES = ("full", "no_roi", "fbe", "count_only")
RANDOM_PITCH = math.radians(45.0)
_STEPS6 = ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1))


class PlanningError(RuntimeError):
    """No candidate viewpoint can be sampled or reached."""


@dataclass(frozen=True)
class ConeConfig:
    d_min: float = 0.5
    d_max: float = 2.0
    max_angle_deg: float = 45.0
    samples_per_roi: int = 5


@dataclass
class PlannerConfig:
    phi: float = 1000.0
    delta: float = 0.5
    n_total: int = 100
    n_roi_max: int = 30
    random_range: float = 0.5
    cone: ConeConfig = field(default_factory=ConeConfig)
    mode: str = "full"

    def __post_init__(self):
        if self.mode == "count_only_confidence":
            self.mode = "count_only"
        if self.mode not in MODES:
            raise ValueError(f"unknown planner mode {self.mode!r}")
        if self.n_roi_max > self.n_total:
            raise ValueError("n_roi_max must not exceed n_total")
        if not self.cone.d_min < self.cone.d_max:
            raise ValueError("cone d_min must be below d_max")


@dataclass
class CandidateViewpoint:
    pose: Pose
    origin_kind: str  # random, roi_frontier or roi_low_conf
    voxel: tuple
    utility: float = math.nan
    u_v: float = math.nan
    u_g: float = math.nan
    path: list = field(default_factory=list)
    path_length: float = math.nan


# ------------------------------------------------------------------ sampling
def sample_random(current: Pose, vmap: VoxelMap, n: int, cfg: PlannerConfig,
                  rng: np.random.Generator) -> list[CandidateViewpoint]:
    """``n`` poses on free voxel centers within ``random_range`` of the robot.

    Positions are drawn uniformly with replacement.  When no free center
    lies in range, the ``n`` nearest free centers form the pool instead.
    """
    free_idx = np.argwhere(vmap.free_mask())
    if not len(free_idx):
        raise PlanningError("free lattice is empty")
    if n <= 0:
        return []
    centers = vmap.center_of(free_idx)
    dist = np.linalg.norm(centers - current.position, axis=1)
    pool = np.flatnonzero(dist <= cfg.random_range + 1e-9)
    if not len(pool):
        pool = np.argsort(dist, kind="stable")[:n]
    picks = pool[rng.integers(len(pool), size=n)]
    yaws = rng.uniform(0.0, 2 * np.pi, n)
    pitches = rng.uniform(-RANDOM_PITCH, RANDOM_PITCH, n)
    return [
        CandidateViewpoint(Pose(centers[p], float(y), float(t)), "random", tuple(free_idx[p].tolist()))
        for p, y, t in zip(picks, yaws, pitches)
    ]


def sample_cone(center, normal, cone: ConeConfig, n: int, rng: np.random.Generator) -> np.ndarray:
    """Volume-uniform points in the spherical cone section around ``normal``."""
    normal = np.asarray(normal, float)
    r = np.cbrt(rng.uniform(cone.d_min**3, cone.d_max**3, n))
    cos_max = math.cos(math.radians(cone.max_angle_deg))
    cos_t = rng.uniform(cos_max, 1.0, n)
    sin_t = np.sqrt(1.0 - cos_t**2)
    az = rng.uniform(0.0, 2 * np.pi, n)
    helper = np.eye(3)[np.argmin(np.abs(normal))]
    e1 = np.cross(normal, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(normal, e1)
    dirs = cos_t[:, None] * normal + (sin_t * np.cos(az))[:, None] * e1 + (sin_t * np.sin(az))[:, None] * e2
    return np.asarray(center, float) + r[:, None] * dirs


def sample_roi(rois: list[RoiVoxel], vmap: VoxelMap, cfg: PlannerConfig,
               rng: np.random.Generator) -> list[CandidateViewpoint]:
    """Cone samples around ROIs, nearest ROI first, up to ``n_roi_max``.

    Each sample snaps to the voxel containing it and is kept when that voxel
    is free and not already taken; the pose looks at the ROI center.
    """
    free = vmap.free_mask()
    taken: set[tuple] = set()
    out: list[CandidateViewpoint] = []
    for roi in sorted(rois, key=lambda r: r.range_to_robot):
        if len(out) >= cfg.n_roi_max:
            break
        kind = "roi_frontier" if roi.kind == "frontier" else "roi_low_conf"
        for p in sample_cone(roi.center, roi.normal, cfg.cone, cfg.cone.samples_per_roi, rng):
            idx = tuple(vmap.index_of(p).tolist())
            if not vmap.in_bounds(idx) or not free[idx] or idx in taken:
                continue
            pos = vmap.center_of(idx)
            if np.linalg.norm(roi.center - pos) < 1e-9:
                continue
            taken.add(idx)
            out.append(CandidateViewpoint(Pose.look_at(pos, roi.center), kind, idx))
            if len(out) >= cfg.n_roi_max:
                break
    return out


# ------------------------------------------------------------------- utility
def utility_terms(pose: Pose, vmap: VoxelMap, smap: SplatMap, intr: CameraIntrinsics) -> tuple[float, float]:
    """(U_V, U_G): visible-unknown voxel ratio and negative mean confidence."""
    views = render(smap, pose, intr)
    n_u = vmap.count_unexplored_visible(pose, views.depth, intr)
    return n_u / vmap.n_voxels, -float(views.conf.mean())


def utility(candidate: CandidateViewpoint, vmap: VoxelMap, smap: SplatMap,
            intr: CameraIntrinsics, cfg: PlannerConfig) -> float:
    u_v, u_g = utility_terms(candidate.pose, vmap, smap, intr)
    if cfg.mode == "fbe":
        u_g = 0.0
    candidate.u_v, candidate.u_g = u_v, u_g
    candidate.utility = cfg.phi * u_v + u_g
    return candidate.utility


# -------------------------------------------------------------------- paths
def astar(passable: np.ndarray, start, goal, voxel_size: float = 0.2):
    """6-connected A* over ``passable`` voxels with a Euclidean heuristic.

    Returns ``(path, length_m)`` with ``path`` a list of index tuples from
    start to goal, or None when the goal is unreachable.
    """
    start, goal = tuple(int(v) for v in start), tuple(int(v) for v in goal)
    dims = passable.shape
    for name, p in (("start", start), ("goal", goal)):
        if not all(0 <= p[a] < dims[a] for a in range(3)) or not passable[p]:
            raise ValueError(f"{name} voxel {p} is not free")
    g_best = {start: 0}
    parent = {start: None}
    heap = [(_h(start, goal), 0, start)]
    closed = set()
    while heap:
        _, g, node = heapq.heappop(heap)
        if node in closed:
            continue
        if node == goal:
            path = []
            while node is not None:
                path.append(node)
                node = parent[node]
            return path[::-1], g * voxel_size
        closed.add(node)
        for d in _STEPS6:
            nb = (node[0] + d[0], node[1] + d[1], node[2] + d[2])
            if not (0 <= nb[0] < dims[0] and 0 <= nb[1] < dims[1] and 0 <= nb[2] < dims[2]):
                continue
            if not passable[nb] or nb in closed:
                continue
            ng = g + 1
            if ng < g_best.get(nb, math.inf):
                g_best[nb] = ng
                parent[nb] = node
                heapq.heappush(heap, (ng + _h(nb, goal), ng, nb))
    return None


def _h(a, b) -> float:
    return math.sqrt((a[0] - b[0]) ** 2 + (a[1] - b[1]) ** 2 + (a[2] - b[2]) ** 2)


def hop_distances(passable: np.ndarray, start) -> np.ndarray:
    """Breadth-first 6-connected hop counts from ``start`` (-1 unreachable)."""
    dist = np.full(passable.shape, -1, dtype=np.int64)
    start = tuple(int(v) for v in start)
    dist[start] = 0
    queue = deque([start])
    dims = passable.shape
    while queue:
        node = queue.popleft()
        nd = dist[node] + 1
        for d in _STEPS6:
            nb = (node[0] + d[0], node[1] + d[1], node[2] + d[2])
            if 0 <= nb[0] < dims[0] and 0 <= nb[1] < dims[1] and 0 <= nb[2] < dims[2]:
                if passable[nb] and dist[nb] < 0:
                    dist[nb] = nd
                    queue.append(nb)
    return dist


# ---------------------------------------------------------------- selection
def scores(utilities, lengths, delta: float) -> np.ndarray:
    """Normalized utility minus weighted normalized travel cost.

    Utilities are shifted up by ``-min(0, min U)`` first.  A normalizer
    that sums to zero makes its whole term zero.
    """
    u = np.asarray(utilities, dtype=float)
    lengths = np.asarray(lengths, dtype=float)
    u = u - min(0.0, float(u.min()))
    su, sl = u.sum(), lengths.sum()
    u_term = u / su if su > 0 else np.zeros_like(u)
    l_term = lengths / sl if sl > 0 else np.zeros_like(lengths)
    return u_term - delta * l_term


def select(candidates: list[CandidateViewpoint], cfg: PlannerConfig) -> CandidateViewpoint:
    if not candidates:
        raise PlanningError("no reachable candidate viewpoints")
    sc = scores([c.utility for c in candidates], [c.path_length for c in candidates], cfg.delta)
    return candidates[int(np.argmax(sc))]


# --------------------------------------------------------------------- plan
def gather_rois(vmap: VoxelMap, low_conf: list[RoiVoxel], position, mode: str) -> list[RoiVoxel]:
    if mode == "no_roi":
        return []
    rois = vmap.frontiers(position)
    if mode != "fbe":
        rois = rois + list(low_conf)
    return sorted(rois, key=lambda r: r.range_to_robot)


def plan(current: Pose, vmap: VoxelMap, smap: SplatMap, low_conf: list[RoiVoxel],
         intr: CameraIntrinsics, cfg: PlannerConfig, rng: np.random.Generator):
    """Sample, filter to reachable, score and pick the next viewpoint.

    The robot's own voxel is treated as passable even if the latest scan
    marked it occupied.  Returns ``(winner, diagnostics)``.
    """
    passable = vmap.free_mask()
    start = tuple(vmap.index_of(current.position).tolist())
    if not vmap.in_bounds(start):
        raise PlanningError("robot is outside the voxel map")
    passable[start] = True
    rois = gather_rois(vmap, low_conf, current.position, cfg.mode)
    roi_cands = sample_roi(rois, vmap, cfg, rng)
    rand_cands = sample_random(current, vmap, cfg.n_total - len(roi_cands), cfg, rng)
    candidates = roi_cands + rand_cands
    hops = hop_distances(passable, start)
    reachable = []
    for c in candidates:
        h = hops[c.voxel]
        if h >= 0:
            c.path_length = float(h) * vmap.voxel_size
            reachable.append(c)
    if not reachable:
        raise PlanningError("no reachable candidate viewpoints")
    for c in reachable:
        utility(c, vmap, smap, intr, cfg)
    sc = scores([c.utility for c in reachable], [c.path_length for c in reachable], cfg.delta)
    win_i = int(np.argmax(sc))
    winner = reachable[win_i]
    found = astar(passable, start, winner.voxel, vmap.voxel_size)
    winner.path, winner.path_length = found
    kinds = [c.origin_kind for c in candidates]
    diag = {
        "n_candidates": len(candidates),
        "n_reachable": len(reachable),
        "n_random": kinds.count("random"),
        "n_roi_frontier": kinds.count("roi_frontier"),
        "n_roi_low_conf": kinds.count("roi_low_conf"),
        "n_rois": len(rois),
        "winner_index": win_i,
        "winner_kind": winner.origin_kind,
        "winner_score": float(sc[win_i]),
        "winner_utility": winner.utility,
        "winner_u_v": winner.u_v,
        "winner_u_g": winner.u_g,
        "path_len_m": winner.path_length,
        "candidates": reachable,
        "scores": sc,
    }
    return winner, diag
