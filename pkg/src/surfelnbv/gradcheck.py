"""Central finite-difference check of the analytic loss gradients.

The loss is piecewise smooth.  It has hard seams at the 3 sigma footprint
cutoff, the early-termination threshold, depth/normal validity masks and the
zero crossings of every L1 and TV residual.  A coordinate whose +-h probe
crosses a seam has no derivative to compare against.  Each probe therefore
records the active regime (contributor lists, masks, residual signs) at each
probe, and coordinates where the regime changes are counted as skipped.

Derivatives use the four-point central stencil at +-h and +-2h.  Its O(h^4)
truncation keeps the reference accurate when the loss terms nearly cancel
and the total gradient is orders of magnitude smaller than its parts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import CameraIntrinsics, Pose, frame_from_normal, rotmat_to_quat
from .scene import RgbdFrame
from .splat_map import SplatMap, center_depth_mask, render
from .train import PARAM_GROUPS, LossWeights, _normal_forward, gradients, loss


@dataclass
class GradCheckResult:
    seed: int
    n_checked: int
    n_skipped: int
    max_rel_error: float
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures


def random_scene(rng: np.random.Generator, n_surfels: int = 5, max_tilt_deg: float = 60.0) -> SplatMap:
    """Surfels in front of a camera at the origin looking along +x."""
    m = SplatMap()
    for _ in range(n_surfels):
        x = np.array([rng.uniform(1.5, 3.0), rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6)])
        tilt = np.radians(rng.uniform(0.0, max_tilt_deg))
        az = rng.uniform(0.0, 2 * np.pi)
        n = np.array([-np.cos(tilt), np.sin(tilt) * np.cos(az), np.sin(tilt) * np.sin(az)])
        spin = rng.uniform(0.0, 2 * np.pi)
        rz = np.array([[np.cos(spin), -np.sin(spin), 0.0], [np.sin(spin), np.cos(spin), 0.0], [0.0, 0.0, 1.0]])
        q = rotmat_to_quat(frame_from_normal(n) @ rz)
        m.add(x[None], q[None], rng.uniform(0.1, 0.4, (1, 2)), rng.uniform(0.2, 0.8, (1, 3)),
              [rng.uniform(0.3, 0.9)], [0])
    return m


def random_target(rng: np.random.Generator, m: SplatMap, pose: Pose, intr: CameraIntrinsics) -> RgbdFrame:
    """Target frame offset from the current render by 0.1 to 0.3 per value."""
    v = render(m, pose, intr)
    sign = lambda shape: rng.choice([-1.0, 1.0], size=shape)  # noqa: E731
    rgb = v.rgb + sign(v.rgb.shape) * rng.uniform(0.1, 0.3, v.rgb.shape)
    off = sign(v.depth.shape) * rng.uniform(0.1, 0.3, v.depth.shape)
    depth = np.where(v.depth > 0, v.depth + off, rng.uniform(1.5, 3.0, v.depth.shape))
    return RgbdFrame(rgb, depth, pose)


def regime(m: SplatMap, frame: RgbdFrame, intr: CameraIntrinsics) -> tuple:
    """Hashable description of which smooth piece of the loss is active."""
    v = render(m, frame.pose, intr, with_contributors=True)
    center = center_depth_mask(m, frame.pose, intr).reshape(-1, len(m))
    contrib = tuple(tuple((i, bool(center[p, i])) for i, _ in c) for p, c in enumerate(v.contributors))
    _, cache = _normal_forward(v.depth, intr)
    dmask = (frame.depth > 0) & (v.depth > 0)
    N = v.normal
    parts = (
        v.depth > 0,
        cache.ok,
        cache.sign > 0,
        np.sign(v.rgb - frame.rgb),
        np.sign(np.where(dmask, v.depth - frame.depth, 0.0)),
        np.sign(N[:-1, :-1] - N[:-1, 1:]),
        np.sign(N[:-1, :-1] - N[1:, :-1]),
        np.linalg.norm(N, axis=-1) > 1e-12,
    )
    return contrib, tuple(p.astype(np.int8).tobytes() for p in parts)


def check_scene(
    seed: int,
    h: float = 1e-4,
    rel_tol: float = 1e-3,
    min_grad: float = 1e-6,
    resolution: int = 8,
    weights: LossWeights = LossWeights(),
) -> GradCheckResult:
    rng = np.random.default_rng(seed)
    intr = CameraIntrinsics(resolution=(resolution, resolution))
    pose = Pose(np.zeros(3), 0.0, 0.0)
    m = random_scene(rng)
    frame = random_target(rng, m, pose, intr)
    _, _, grads = gradients(m, frame, intr, weights)
    res = GradCheckResult(seed, 0, 0, 0.0)
    for name in PARAM_GROUPS:
        arr = getattr(m, name)
        for idx in np.ndindex(arr.shape):
            an = grads[name][idx]
            if abs(an) <= min_grad:
                continue
            old = arr[idx]
            probes = []
            for k in (-2, -1, 1, 2):
                arr[idx] = old + k * h
                probes.append((loss(render(m, pose, intr), frame, weights, intr)[0], regime(m, frame, intr)))
            arr[idx] = old
            if any(r != probes[0][1] for _, r in probes[1:]):
                res.n_skipped += 1
                continue
            (l2m, _), (l1m, _), (l1p, _), (l2p, _) = probes
            fd = (8 * (l1p - l1m) - (l2p - l2m)) / (12 * h)
            rel = abs(an - fd) / max(abs(an), abs(fd))
            res.n_checked += 1
            res.max_rel_error = max(res.max_rel_error, rel)
            if rel > rel_tol:
                res.failures.append((name, idx, float(an), float(fd)))
    return res


def run_suite(n_scenes: int = 50, first_seed: int = 0, **kwargs) -> list[GradCheckResult]:
    return [check_scene(first_seed + s, **kwargs) for s in range(n_scenes)]
