"""Held-out PSNR, fused-depth completeness and the reachable-voxel census."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .camera import CameraIntrinsics, Pose
from .splat_map import SplatMap, render
from .voxel_map import VoxelMap

PSNR_CAP = 99.0
COMPLETENESS_THRESHOLD = 0.02


@dataclass(frozen=True)
class MetricSample:
    mission_step: int
    sim_time: float
    psnr_mean: float
    completeness: float
    surfel_count: int
    voxel_explored_fraction: float


def psnr(rendered_rgb, gt_rgb) -> float:
    mse = float(np.mean((np.asarray(rendered_rgb, float) - np.asarray(gt_rgb, float)) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def fused_points(m: SplatMap, poses, intr: CameraIntrinsics, stride: int = 2) -> np.ndarray:
    """World points back-projected from valid rendered depth at every pose."""
    rays = intr.pixel_rays()[::stride, ::stride]
    chunks = []
    for pose in poses:
        d = render(m, pose, intr).depth[::stride, ::stride]
        ok = d > 0
        if ok.any():
            chunks.append(pose.position + (d[ok][:, None] * rays[ok]) @ pose.rotation.T)
    return np.concatenate(chunks) if chunks else np.zeros((0, 3))


def coverage(points: np.ndarray, gt_surface: np.ndarray, threshold: float = COMPLETENESS_THRESHOLD) -> float:
    """Fraction of ``gt_surface`` within ``threshold`` of some point."""
    gt_surface = np.asarray(gt_surface, float).reshape(-1, 3)
    if not len(gt_surface):
        raise ValueError("ground-truth surface sample is empty")
    if not len(points):
        return 0.0
    dist, _ = cKDTree(points).query(gt_surface, k=1, distance_upper_bound=threshold * (1 + 1e-12))
    return float(np.mean(dist <= threshold))


def completeness_ratio(m: SplatMap, training_poses, intr: CameraIntrinsics, gt_surface,
                       threshold: float = COMPLETENESS_THRESHOLD, stride: int = 2) -> float:
    return coverage(fused_points(m, training_poses, intr, stride), gt_surface, threshold)


def attainable_region(scene, vmap: VoxelMap, start_position) -> np.ndarray:
    """Voxels a robot starting at ``start_position`` could ever observe.

    Ground-truth free voxels 6-connected to the start voxel, plus their
    6-neighbours (the surfaces bounding that space).
    """
    free = scene.free_voxel_mask(vmap.origin, vmap.voxel_size, vmap.dims)
    start = tuple(vmap.index_of(start_position).tolist())
    if not vmap.in_bounds(start) or not free[start]:
        raise ValueError("start position is not in ground-truth free space")
    labels, _ = ndimage.label(free)
    reach = labels == labels[start]
    return ndimage.binary_dilation(reach)


def explored_fraction(vmap: VoxelMap, attainable: np.ndarray) -> float:
    return vmap.explored_fraction(attainable)


def evaluate(m: SplatMap, training_poses, test_poses: list[Pose], gt_rgbs, gt_surface,
             intr: CameraIntrinsics, vmap: VoxelMap, attainable: np.ndarray,
             step: int = 0, sim_time: float = 0.0) -> MetricSample:
    """Mean held-out PSNR, completeness and explored fraction for one checkpoint."""
    scores = [psnr(render(m, p, intr).rgb, gt) for p, gt in zip(test_poses, gt_rgbs)]
    return MetricSample(
        mission_step=step,
        sim_time=sim_time,
        psnr_mean=float(np.mean(scores)) if scores else PSNR_CAP,
        completeness=completeness_ratio(m, training_poses, intr, gt_surface),
        surfel_count=len(m),
        voxel_explored_fraction=explored_fraction(vmap, attainable),
    )
