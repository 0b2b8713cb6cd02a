"""Per-surfel confidence from the spread of observing viewpoints, and
extraction of low-confidence voxels as planning targets.
"""

from __future__ import annotations

import numpy as np

from .camera import CameraIntrinsics, Pose
from .splat_map import SplatMap, Surfel, visible_surfels
from .voxel_map import RoiVoxel, VoxelMap

N_SAT = 10
K_THRESH = 0.5
MIN_MEAN_NORMAL = 0.1


class ObservationLog:
    """For each surfel, the sorted set of pose indices that observed it.

    Stored as a boolean (surfels x poses) matrix that grows on demand.
    """

    def __init__(self, n_surfels: int = 0, n_poses: int = 0):
        self.seen = np.zeros((n_surfels, n_poses), dtype=bool)

    def __len__(self) -> int:
        return self.seen.shape[0]

    def ensure(self, n_surfels: int, n_poses: int) -> None:
        rows = max(n_surfels, self.seen.shape[0])
        cols = max(n_poses, self.seen.shape[1])
        if (rows, cols) != self.seen.shape:
            grown = np.zeros((rows, cols), dtype=bool)
            grown[: self.seen.shape[0], : self.seen.shape[1]] = self.seen
            self.seen = grown

    def add(self, surfels, pose_index: int) -> None:
        surfels = np.fromiter(surfels, dtype=np.int64)
        self.ensure(int(surfels.max()) + 1 if len(surfels) else 0, pose_index + 1)
        self.seen[surfels, pose_index] = True

    def indices(self, i: int) -> list[int]:
        if i >= self.seen.shape[0]:
            return []
        return np.flatnonzero(self.seen[i]).tolist()

    def counts(self, n_surfels: int) -> np.ndarray:
        self.ensure(n_surfels, 0)
        return self.seen[:n_surfels].sum(axis=1)

    def remap(self, remap: np.ndarray) -> None:
        """Compact rows after a prune; ``remap[old] = new`` or -1."""
        remap = np.asarray(remap)
        self.ensure(len(remap), 0)
        keep = np.flatnonzero(remap >= 0)
        out = np.zeros((int(remap.max()) + 1 if len(keep) else 0, self.seen.shape[1]), dtype=bool)
        out[remap[keep]] = self.seen[keep]
        self.seen = out


def update_observations(log: ObservationLog, m: SplatMap, pose_index: int, pose: Pose,
                        intr: CameraIntrinsics, w_min: float = 0.3) -> ObservationLog:
    log.ensure(len(m), pose_index + 1)
    log.add(visible_surfels(m, pose, intr, w_min), pose_index)
    return log


def _confidence(x: np.ndarray, n: np.ndarray, positions: np.ndarray, d_far: float) -> float:
    if d_far <= 0:
        raise ValueError("d_far must be positive")
    diff = positions - x
    d = np.linalg.norm(diff, axis=1)
    keep = d >= 1e-9
    if not keep.any():
        return 0.0
    v = diff[keep] / d[keep, None]
    gamma = np.sum(np.maximum(0.0, 1.0 - d[keep] / d_far) * np.maximum(0.0, v @ n))
    beta = 1.0 - np.linalg.norm(v.mean(axis=0))
    return float(gamma * np.exp(beta))


def confidence(surfel: Surfel, S, history, d_far: float) -> float:
    """Distance-weighted facing term times the exponential direction spread.

    Views closer than 1e-9 m to the surfel center are skipped; an empty set
    gives 0.
    """
    S = list(S)
    if not S:
        if d_far <= 0:
            raise ValueError("d_far must be positive")
        return 0.0
    positions = np.array([history[j].position for j in S], dtype=float)
    return _confidence(np.asarray(surfel.x, float), surfel.normal, positions, d_far)


def confidence_count_only(surfel: Surfel | None, S, n_sat: int = N_SAT) -> float:
    return float(min(max(len(list(S)) / n_sat, 0.0), 1.0))


def refresh_confidences(m: SplatMap, log: ObservationLog, history, d_far: float,
                        mode: str = "full", n_sat: int = N_SAT) -> SplatMap:
    """Recompute every surfel's k from its observation set."""
    if mode not in ("full", "count_only"):
        raise ValueError(f"unknown confidence mode {mode!r}")
    if not len(m):
        return m
    log.ensure(len(m), len(history))
    seen = log.seen[: len(m)]
    if mode == "count_only":
        m.k = np.clip(seen.sum(axis=1) / n_sat, 0.0, 1.0)
        return m
    positions = np.array([p.position for p in history], dtype=float).reshape(-1, 3)
    normals = m.normals()
    k = np.zeros(len(m))
    for i in np.flatnonzero(seen.any(axis=1)):
        k[i] = _confidence(m.x[i], normals[i], positions[seen[i, : len(positions)]], d_far)
    m.k = k
    return m


def low_confidence_rois(m: SplatMap, vmap: VoxelMap, k_thresh: float = K_THRESH,
                        robot_position=None) -> list[RoiVoxel]:
    """Occupied voxels holding surfels with k below ``k_thresh``.

    Normals of those surfels are flipped into the hemisphere of the first
    one (in map order) and averaged; voxels whose mean has length below 0.1
    are dropped.  Output is sorted by voxel index.
    """
    low = np.flatnonzero(m.k < k_thresh) if len(m) else np.zeros(0, int)
    if not len(low):
        return []
    idx = vmap.index_of(m.x[low])
    inside = np.all((idx >= 0) & (idx < np.array(vmap.dims)), axis=1)
    low, idx = low[inside], idx[inside]
    occ = vmap.occupied_mask()
    on_occ = occ[idx[:, 0], idx[:, 1], idx[:, 2]]
    low, idx = low[on_occ], idx[on_occ]
    normals = m.normals()
    groups: dict[tuple, list[int]] = {}
    for i, key in zip(low.tolist(), map(tuple, idx.tolist())):
        groups.setdefault(key, []).append(i)
    out = []
    for key in sorted(groups):
        ns = normals[groups[key]]
        ns = np.where((ns @ ns[0])[:, None] < 0, -ns, ns)
        mean = ns.mean(axis=0)
        length = np.linalg.norm(mean)
        if length < MIN_MEAN_NORMAL:
            continue
        c = vmap.center_of(key)
        rng = 0.0 if robot_position is None else float(np.linalg.norm(c - robot_position))
        out.append(RoiVoxel(c, mean / length, "low_confidence", rng, key))
    return out
