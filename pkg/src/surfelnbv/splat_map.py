"""2D Gaussian surfel map: storage, EWA projection, compositing renderer,
densification and visibility pruning.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _raster
from .camera import CameraIntrinsics, Pose, frame_from_normal, quat_to_rotmat, rotmat_to_quat

BLUR = 0.3  # px^2 added to the projected covariance
INVALID_OPACITY = 1e-3
SPAWN_SCALE = 0.01
SPAWN_OPACITY = 0.5
GUARD_BAND = 1.3


@dataclass
class Surfel:
    x: np.ndarray
    q: np.ndarray
    s: np.ndarray
    c: np.ndarray
    o: float
    k: float = 0.0

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_rotmat(self.q)

    @property
    def normal(self) -> np.ndarray:
        return self.rotation[:, 2]


class SplatMap:
    """Growable struct-of-arrays surfel collection.

    Indices are stable until ``compact`` runs, which returns an old -> new
    index remap (``-1`` for removed surfels).
    """

    def __init__(self):
        self.x = np.zeros((0, 3))
        self.q = np.zeros((0, 4))
        self.s = np.zeros((0, 2))
        self.c = np.zeros((0, 3))
        self.o = np.zeros(0)
        self.k = np.zeros(0)
        self.creation_step = np.zeros(0, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.x)

    @classmethod
    def from_surfels(cls, surfels, step: int = 0) -> "SplatMap":
        m = cls()
        for sf in surfels:
            m.add(sf.x[None], sf.q[None], sf.s[None], sf.c[None], [sf.o], [sf.k], step)
        return m

    def add(self, x, q, s, c, o, k, step: int = 0) -> np.ndarray:
        n0 = len(self)
        x = np.asarray(x, dtype=float).reshape(-1, 3)
        n = len(x)
        self.x = np.concatenate([self.x, x])
        self.q = np.concatenate([self.q, np.asarray(q, dtype=float).reshape(n, 4)])
        self.s = np.concatenate([self.s, np.asarray(s, dtype=float).reshape(n, 2)])
        self.c = np.concatenate([self.c, np.asarray(c, dtype=float).reshape(n, 3)])
        self.o = np.concatenate([self.o, np.asarray(o, dtype=float).reshape(n)])
        self.k = np.concatenate([self.k, np.asarray(k, dtype=float).reshape(n)])
        self.creation_step = np.concatenate([self.creation_step, np.full(n, step, dtype=np.int64)])
        return np.arange(n0, n0 + n)

    def surfel(self, i: int) -> Surfel:
        return Surfel(self.x[i].copy(), self.q[i].copy(), self.s[i].copy(), self.c[i].copy(), float(self.o[i]), float(self.k[i]))

    def compact(self, keep: np.ndarray) -> np.ndarray:
        keep = np.asarray(keep, dtype=bool)
        remap = np.full(len(self), -1, dtype=np.int64)
        remap[keep] = np.arange(int(keep.sum()))
        for name in ("x", "q", "s", "c", "o", "k", "creation_step"):
            setattr(self, name, getattr(self, name)[keep])
        return remap

    def copy(self) -> "SplatMap":
        m = SplatMap()
        for name in ("x", "q", "s", "c", "o", "k", "creation_step"):
            setattr(m, name, getattr(self, name).copy())
        return m

    def normals(self) -> np.ndarray:
        return quat_to_rotmat(self.q)[..., 2] if len(self) else np.zeros((0, 3))

    def save(self, path) -> None:
        """One whitespace-separated record per surfel: x q s c o k."""
        data = np.column_stack([self.x, self.q, self.s, self.c, self.o, self.k])
        np.savetxt(path, data, fmt="%.9g", header="x y z qw qx qy qz sx sy r g b o k")

    @classmethod
    def load(cls, path) -> "SplatMap":
        data = np.loadtxt(path, ndmin=2)
        m = cls()
        if data.size:
            m.add(data[:, 0:3], data[:, 3:7], data[:, 7:9], data[:, 9:12], data[:, 12], data[:, 13])
        return m


def covariance(surfel: Surfel) -> np.ndarray:
    q = np.asarray(surfel.q, dtype=float)
    if abs(np.linalg.norm(q) - 1.0) > 1e-6:
        raise ValueError("surfel quaternion is not unit length")
    r = quat_to_rotmat(q)
    sx, sy = surfel.s
    return r @ np.diag([sx * sx, sy * sy, 0.0]) @ r.T


@dataclass
class Projection:
    """Per-surfel view-dependent quantities for one camera."""

    valid: np.ndarray
    t: np.ndarray  # camera-frame centers
    mean2d: np.ndarray
    cov2d: np.ndarray  # (N, 2, 2), blur included
    conic: np.ndarray  # (N, 3): inverse covariance entries a, b, c
    radius: np.ndarray
    rot: np.ndarray  # (N, 3, 3) R(q)
    normal: np.ndarray  # camera-facing world normal
    flip: np.ndarray  # +1 / -1 applied to R[:, 2]
    jac: np.ndarray  # (N, 2, 3)
    tangent: np.ndarray  # (N, 3, 2) camera-frame tangent axes W R[:, :2]
    axes: np.ndarray  # (N, 2, 3) world tangent axes over the blur-widened scales


def _clamped_slopes(t: np.ndarray, tz: np.ndarray, intr: CameraIntrinsics):
    """x/z and y/z limited to a guard band of 1.3x the half field of view.

    The Jacobian is evaluated at the clamped slopes so surfels far outside
    the frustum and close to the image plane keep a bounded footprint.
    Returns the slopes and a mask of the unclamped components.
    """
    lim = GUARD_BAND * np.array([intr.cx, intr.cy]) / intr.focal
    raw = t[:, :2] / tz[:, None]
    return np.clip(raw, -lim, lim), np.abs(raw) <= lim


def project_all(m: SplatMap, pose: Pose, intr: CameraIntrinsics) -> Projection:
    n = len(m)
    W = pose.rotation.T
    f = intr.focal
    t = (m.x - pose.position) @ W.T
    tz = t[:, 2]
    valid = tz > 0.5 * intr.d_near
    tz_safe = np.where(valid, tz, 1.0)
    rot = quat_to_rotmat(m.q) if n else np.zeros((0, 3, 3))
    mean2d = np.stack([f * t[:, 0] / tz_safe + intr.cx, f * t[:, 1] / tz_safe + intr.cy], axis=1)
    slope, _ = _clamped_slopes(t, tz_safe, intr)
    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = f / tz_safe
    jac[:, 0, 2] = -f * slope[:, 0] / tz_safe
    jac[:, 1, 1] = f / tz_safe
    jac[:, 1, 2] = -f * slope[:, 1] / tz_safe
    tangent = W @ rot[:, :, :2]
    P = (jac @ tangent) * m.s[:, None, :]
    cov2d = P @ P.transpose(0, 2, 1) + BLUR * np.eye(2)
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    mid = 0.5 * (a + c)
    lam = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = 3.0 * np.sqrt(lam)
    nrm = rot[:, :, 2]
    flip = np.where(np.einsum("ni,ni->n", nrm, pose.position - m.x) >= 0, 1.0, -1.0)
    # in-plane support widened by the screen blur's footprint at the center depth
    eff = np.sqrt(m.s**2 + BLUR * (tz_safe / f)[:, None] ** 2)
    axes = np.ascontiguousarray((rot[:, :, :2] / eff[:, None, :]).transpose(0, 2, 1))
    return Projection(valid, t, mean2d, cov2d, conic, radius, rot, nrm * flip[:, None], flip, jac, tangent, axes)


def project(surfel: Surfel, pose: Pose, intr: CameraIntrinsics):
    """Projected center (px) and 2x2 screen covariance, or ``None`` if behind."""
    m = SplatMap.from_surfels([surfel])
    proj = project_all(m, pose, intr)
    if not proj.valid[0]:
        return None
    return proj.mean2d[0], proj.cov2d[0]


@dataclass
class RenderedViews:
    rgb: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    opacity: np.ndarray
    conf: np.ndarray
    max_weight: np.ndarray
    n_contrib: np.ndarray
    contributors: list | None = None
    pose: Pose | None = None

    @property
    def valid_depth(self) -> np.ndarray:
        return self.depth > 0


@dataclass
class _Raster:
    proj: Projection
    order: np.ndarray
    ptr: np.ndarray
    ids: np.ndarray
    rays: np.ndarray
    cam: np.ndarray
    views: RenderedViews = field(default=None)


def _world_rays(pose: Pose, intr: CameraIntrinsics) -> np.ndarray:
    return np.ascontiguousarray(intr.pixel_rays() @ pose.rotation.T)


def rasterize(m: SplatMap, pose: Pose, intr: CameraIntrinsics, with_contributors: bool = False) -> _Raster:
    proj = project_all(m, pose, intr)
    valid_ids = np.flatnonzero(proj.valid)
    order = valid_ids[np.argsort(proj.t[valid_ids, 2], kind="stable")]
    ptr, ids = _raster.bin_tiles(order, proj.mean2d, proj.radius, intr.width, intr.height)
    rays = _world_rays(pose, intr)
    cam = np.asarray(pose.position, dtype=float)
    rgb, depth, nrm, opac, kmap, n_contrib, max_w = _raster.forward(
        ptr, ids, proj.mean2d, proj.conic, m.o, m.c, proj.normal, proj.axes, m.k, m.x, rays, cam, len(m)
    )
    depth = np.where(opac < INVALID_OPACITY, 0.0, depth)
    contribs = None
    if with_contributors:
        offsets = np.concatenate([[0], np.cumsum(n_contrib.ravel())]).astype(np.int64)
        cid, cw = _raster.contributors(ptr, ids, proj.mean2d, proj.conic, m.o, offsets, intr.width, intr.height)
        contribs = [
            list(zip(cid[offsets[p]:offsets[p + 1]].tolist(), cw[offsets[p]:offsets[p + 1]].tolist()))
            for p in range(intr.width * intr.height)
        ]
    views = RenderedViews(rgb, depth, nrm, opac, kmap, max_w, n_contrib, contribs, pose)
    return _Raster(proj, order, ptr, ids, rays, cam, views)


def render(m: SplatMap, pose: Pose, intr: CameraIntrinsics, with_contributors: bool = False) -> RenderedViews:
    """Alpha-composite color, depth, normal, opacity and confidence maps.

    ``contributors`` (when requested) is a row-major list over pixels of
    ``(surfel index, weight)`` pairs in compositing order.
    """
    return rasterize(m, pose, intr, with_contributors).views


def center_depth_mask(m: SplatMap, pose: Pose, intr: CameraIntrinsics) -> np.ndarray:
    """(H, W, N) mask of pixel/surfel pairs whose depth falls back to the center range."""
    proj = project_all(m, pose, intr)
    rays = _world_rays(pose, intr)
    p = m.x - pose.position
    den = rays @ proj.normal.T
    near_parallel = np.abs(den) < _raster.PARALLEL_EPS
    d = np.einsum("nk,nk->n", p, proj.normal) / np.where(near_parallel, 1.0, den)
    hit = d[..., None] * rays[:, :, None, :] - p
    a = np.einsum("hwnk,nk->hwn", hit, proj.axes[:, 0])
    b = np.einsum("hwnk,nk->hwn", hit, proj.axes[:, 1])
    return near_parallel | (a * a + b * b > _raster.MAHA_CUT)


def visible_surfels(m: SplatMap, pose: Pose, intr: CameraIntrinsics, w_min: float = 0.3) -> set[int]:
    if not len(m):
        return set()
    return set(np.flatnonzero(render(m, pose, intr).max_weight >= w_min).tolist())


def densify_mask(rendered: RenderedViews, frame, lam: float = 0.05) -> np.ndarray:
    """Pixels needing new surfels: low opacity, large color error, or
    measured geometry appearing in front of the rendered depth."""
    low_opacity = rendered.opacity < 0.5
    color_err = np.abs(rendered.rgb - frame.rgb).mean(axis=-1) > 0.5
    measured = frame.depth > 0
    in_front = measured & (rendered.depth - frame.depth > lam * frame.depth)
    return low_opacity | color_err | in_front


def spawn(
    m: SplatMap,
    frame,
    mask: np.ndarray,
    normals: np.ndarray,
    intr: CameraIntrinsics,
    rng: np.random.Generator | None = None,
    stride: int = 2,
    max_new: int = 4096,
    step: int = 0,
) -> int:
    """Unproject masked pixels with valid depth into new surfels.

    At most one pixel per ``stride x stride`` block is used, picked at
    random among the block's eligible pixels (the first one when ``rng`` is
    None).  ``normals`` are camera-frame normals of the measured depth.
    """
    eligible = mask & (frame.depth > 0)
    h, w = eligible.shape
    picks = []
    for r0 in range(0, h, stride):
        for c0 in range(0, w, stride):
            rows, cols = np.nonzero(eligible[r0:r0 + stride, c0:c0 + stride])
            if not len(rows):
                continue
            j = 0 if rng is None else int(rng.integers(len(rows)))
            picks.append((r0 + rows[j], c0 + cols[j]))
    if not picks:
        return 0
    picks = np.array(picks[:max_new])
    rr, cc = picks[:, 0], picks[:, 1]
    R = frame.pose.rotation
    rays_cam = intr.pixel_rays()[rr, cc]
    pts = frame.pose.position + (frame.depth[rr, cc][:, None] * rays_cam) @ R.T
    n_cam = normals[rr, cc]
    bad = np.linalg.norm(n_cam, axis=1) < 1e-9
    n_cam[bad] = -rays_cam[bad]
    n_world = n_cam @ R.T
    quats = np.array([rotmat_to_quat(frame_from_normal(n)) for n in n_world])
    k = len(picks)
    m.add(pts, quats, np.full((k, 2), SPAWN_SCALE), frame.rgb[rr, cc], np.full(k, SPAWN_OPACITY), np.zeros(k), step)
    return k


def prune_invisible(m: SplatMap, history, intr: CameraIntrinsics, w_min: float = 0.3):
    """Drop surfels not visible from any pose in ``history``.

    Returns ``(n_removed, remap)``.
    """
    keep = np.zeros(len(m), dtype=bool)
    for pose in history:
        if keep.all():
            break
        keep |= render(m, pose, intr).max_weight >= w_min
    remap = m.compact(keep)
    return int((~keep).sum()), remap


# ---------------------------------------------------------------- gradients
def _drot_dq(q: np.ndarray) -> np.ndarray:
    """d R(q) / d q for unit quaternions, shape (N, 3, 3, 4)."""
    w, x, y, z = q.T
    zero = np.zeros_like(w)
    rows = [
        [[zero, zero, -4 * y, -4 * z], [-2 * z, 2 * y, 2 * x, -2 * w], [2 * y, 2 * z, 2 * w, 2 * x]],
        [[2 * z, 2 * y, 2 * x, 2 * w], [zero, -4 * x, zero, -4 * z], [-2 * x, -2 * w, 2 * z, 2 * y]],
        [[-2 * y, 2 * z, -2 * w, 2 * x], [2 * x, 2 * w, 2 * z, 2 * y], [zero, -4 * x, -4 * y, zero]],
    ]
    return np.moveaxis(np.array(rows), -1, 0)


def backprop(m: SplatMap, ras: _Raster, intr: CameraIntrinsics, g_rgb, g_depth, g_nrm, g_opac=None) -> dict:
    """Chain image-space gradients back to surfel parameters (x, q, s, c, o)."""
    proj = ras.proj
    n = len(m)
    if g_opac is None:
        g_opac = np.zeros(g_depth.shape)
    g_mean, g_conic, g_o, g_c, g_n, g_x = _raster.backward(
        ras.ptr, ras.ids, proj.mean2d, proj.conic, m.o, m.c, proj.normal, proj.axes, m.x, ras.rays, ras.cam, n,
        np.ascontiguousarray(g_rgb, dtype=float), np.ascontiguousarray(g_depth, dtype=float),
        np.ascontiguousarray(g_nrm, dtype=float), np.ascontiguousarray(g_opac, dtype=float),
    )
    W = ras.views.pose.rotation.T
    f = intr.focal
    # conic -> screen covariance
    cm = np.empty((n, 2, 2))
    cm[:, 0, 0], cm[:, 0, 1], cm[:, 1, 0], cm[:, 1, 1] = proj.conic[:, 0], proj.conic[:, 1], proj.conic[:, 1], proj.conic[:, 2]
    gm = np.empty((n, 2, 2))
    gm[:, 0, 0], gm[:, 1, 1] = g_conic[:, 0], g_conic[:, 2]
    gm[:, 0, 1] = gm[:, 1, 0] = 0.5 * g_conic[:, 1]
    g_cov = -(cm @ gm @ cm)
    # cov = P P^T + blur,  P = J V,  V = tangent * s
    V = proj.tangent * m.s[:, None, :]
    P = proj.jac @ V
    g_P = 2.0 * (g_cov @ P)
    g_J = g_P @ V.transpose(0, 2, 1)
    g_V = proj.jac.transpose(0, 2, 1) @ g_P
    g_s = (g_V * proj.tangent).sum(axis=1)
    g_R = np.zeros((n, 3, 3))
    g_R[:, :, :2] = W.T @ (g_V * m.s[:, None, :])
    g_R[:, :, 2] = g_n * proj.flip[:, None]
    qn = m.q / np.linalg.norm(m.q, axis=1, keepdims=True)
    g_qhat = (g_R.reshape(n, 1, 9) @ _drot_dq(qn).reshape(n, 9, 4)).reshape(n, 4)
    g_q = (g_qhat - qn * np.einsum("nk,nk->n", qn, g_qhat)[:, None]) / np.linalg.norm(m.q, axis=1, keepdims=True)
    # projection of the center
    tx, ty, tz = proj.t.T
    tz = np.where(proj.valid, tz, 1.0)
    slope, free = _clamped_slopes(proj.t, tz, intr)
    # J[:, k, 2] = -f * slope_k / tz, slope_k = t_k / tz unless clamped
    g_t = np.zeros((n, 3))
    g_t[:, 0] = g_mean[:, 0] * f / tz - free[:, 0] * g_J[:, 0, 2] * f / tz**2
    g_t[:, 1] = g_mean[:, 1] * f / tz - free[:, 1] * g_J[:, 1, 2] * f / tz**2
    g_t[:, 2] = (
        -g_mean[:, 0] * f * tx / tz**2 - g_mean[:, 1] * f * ty / tz**2
        - (g_J[:, 0, 0] + g_J[:, 1, 1]) * f / tz**2
        + f * np.sum((1.0 + free) * g_J[:, :, 2] * slope, axis=1) / tz**2
    )
    g_xw = g_t @ W + g_x
    inactive = ~proj.valid
    out = {"x": g_xw, "q": g_q, "s": g_s, "c": g_c, "o": g_o}
    for v in out.values():
        v[inactive] = 0.0
    return out
