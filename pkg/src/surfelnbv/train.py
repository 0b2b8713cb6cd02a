"""Incremental surfel optimization: depth normals, the photometric/depth/
normal loss, analytic gradients and an Adam step over recent and random frames.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import CameraIntrinsics
from .splat_map import RenderedViews, SplatMap, backprop, rasterize

SIGMA_SPACE = 2.0
SIGMA_RANGE = 0.05
HALF_WINDOW = 2


@dataclass(frozen=True)
class LossWeights:
    w_c: float = 1.0
    w_d: float = 0.8
    w_n: float = 0.1


@dataclass
class TrainConfig:
    iterations_per_step: int = 10
    recent_frames: int = 3
    random_frames: int = 5
    lr: dict = field(default_factory=lambda: {"x": 2e-4, "q": 1e-3, "s": 5e-3, "c": 5e-3, "o": 5e-2})
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip: float = 1e3
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if min(self.iterations_per_step, self.recent_frames, self.random_frames) < 0:
            raise ValueError("frame and iteration counts must be non-negative")


# ------------------------------------------------------------ depth normals
class _NormalCache:
    pass


def _normal_forward(depth: np.ndarray, intr: CameraIntrinsics):
    h, w = depth.shape
    r = HALF_WINDOW
    valid = depth > 0
    rays = intr.pixel_rays()
    zdepth = depth * rays[..., 2]
    zpad = np.pad(zdepth, r)
    vpad = np.pad(valid, r)
    wsum = np.zeros((h, w))
    zsum = np.zeros((h, w))
    terms = []
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            zq = zpad[r + dy:r + dy + h, r + dx:r + dx + w]
            vq = vpad[r + dy:r + dy + h, r + dx:r + dx + w]
            gs = np.exp(-(dx * dx + dy * dy) / (2 * SIGMA_SPACE**2))
            wgt = gs * np.exp(-((zq - zdepth) ** 2) / (2 * SIGMA_RANGE**2)) * (vq & valid)
            wsum += wgt
            zsum += wgt * zq
            terms.append((dy, dx, zq, wgt))
    filt = np.where(valid, zsum / np.where(valid, wsum, 1.0), 0.0)
    lift = rays / rays[..., 2:3]  # z-depth -> camera point
    pts = filt[..., None] * lift
    a = np.zeros((h, w, 3))
    b = np.zeros((h, w, 3))
    a[1:-1, 1:-1] = pts[1:-1, 2:] - pts[1:-1, :-2]
    b[1:-1, 1:-1] = pts[2:, 1:-1] - pts[:-2, 1:-1]
    ok = np.zeros((h, w), dtype=bool)
    ok[1:-1, 1:-1] = valid[1:-1, 1:-1] & valid[1:-1, 2:] & valid[1:-1, :-2] & valid[2:, 1:-1] & valid[:-2, 1:-1]
    raw = np.cross(a, b)
    norm = np.linalg.norm(raw, axis=-1)
    ok &= norm > 1e-12
    sign = np.where(np.einsum("hwc,hwc->hw", raw, pts) > 0, -1.0, 1.0)
    normals = np.where(ok[..., None], sign[..., None] * raw / np.where(ok, norm, 1.0)[..., None], 0.0)
    c = _NormalCache()
    c.__dict__.update(zdepth=zdepth, rz=rays[..., 2], valid=valid, wsum=wsum, filt=filt, terms=terms, lift=lift,
                      a=a, b=b, ok=ok, norm=norm, sign=sign, normals=normals)
    return normals, c


def normal_from_depth(depth: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """Camera-frame unit normals from a range image.

    The range image is converted to z-depth and bilateral filtered (5x5
    window, spatial sigma 2 px, range sigma 5 cm), unprojected, and normals
    come from the cross product of central differences, oriented towards
    the camera.  Border pixels and pixels touching invalid depth get a zero
    normal.
    """
    return _normal_forward(np.asarray(depth, dtype=float), intr)[0]


def _normal_vjp(c: _NormalCache, g_normals: np.ndarray) -> np.ndarray:
    h, w = c.zdepth.shape
    r = HALF_WINDOW
    g = np.where(c.ok[..., None], g_normals, 0.0)
    n = c.normals
    g_raw = c.sign[..., None] * (g - n * np.einsum("hwc,hwc->hw", n, g)[..., None]) / np.where(c.ok, c.norm, 1.0)[..., None]
    g_a = np.cross(c.b, g_raw)
    g_b = np.cross(g_raw, c.a)
    g_pts = np.zeros((h, w, 3))
    g_pts[1:-1, 2:] += g_a[1:-1, 1:-1]
    g_pts[1:-1, :-2] -= g_a[1:-1, 1:-1]
    g_pts[2:, 1:-1] += g_b[1:-1, 1:-1]
    g_pts[:-2, 1:-1] -= g_b[1:-1, 1:-1]
    g_filt = np.where(c.valid, np.einsum("hwc,hwc->hw", g_pts, c.lift), 0.0)
    gw = g_filt / np.where(c.valid, c.wsum, 1.0)
    g_pad = np.zeros((h + 2 * r, w + 2 * r))
    g_center = np.zeros((h, w))
    for dy, dx, zq, wgt in c.terms:
        diff = zq - c.zdepth
        shared = gw * wgt * (zq - c.filt) * diff / SIGMA_RANGE**2
        g_pad[r + dy:r + dy + h, r + dx:r + dx + w] += gw * wgt - shared
        g_center += shared
    g_z = g_pad[r:r + h, r:r + w] + g_center
    return np.where(c.valid, g_z * c.rz, 0.0)


# --------------------------------------------------------------------- loss
def _loss_and_image_grads(views: RenderedViews, frame, weights: LossWeights, intr: CameraIntrinsics, want_grad: bool):
    I, D, N = views.rgb, views.depth, views.normal
    h, w = D.shape
    diff_c = I - frame.rgb
    l_c = float(np.abs(diff_c).mean())
    dmask = (frame.depth > 0) & (D > 0)
    nd = int(dmask.sum())
    diff_d = np.where(dmask, D - frame.depth, 0.0)
    l_d = float(np.abs(diff_d).sum() / nd) if nd else 0.0

    R = frame.pose.rotation
    n_tilde_cam, cache = _normal_forward(D, intr)
    n_tilde = n_tilde_cam @ R.T
    n_len = np.linalg.norm(N, axis=-1)
    cmask = cache.ok & (n_len > 1e-12)
    nc = int(cmask.sum())
    safe_len = np.where(cmask, n_len, 1.0)
    cos = np.einsum("hwc,hwc->hw", N, n_tilde) / safe_len
    l_cos = float(np.where(cmask, 1.0 - cos, 0.0).sum() / nc) if nc else 0.0
    dx = N[:-1, :-1] - N[:-1, 1:]
    dy = N[:-1, :-1] - N[1:, :-1]
    n_int = (h - 1) * (w - 1)
    l_tv = float((np.abs(dx).sum() + np.abs(dy).sum()) / n_int)
    l_n = l_cos + l_tv
    total = weights.w_c * l_c + weights.w_d * l_d + weights.w_n * l_n
    parts = (l_c, l_d, l_n)
    if not want_grad:
        return total, parts, None

    g_I = weights.w_c * np.sign(diff_c) / diff_c.size
    g_D = weights.w_d * np.sign(diff_d) / nd if nd else np.zeros_like(D)
    g_N = np.zeros_like(N)
    if nc:
        scale = weights.w_n / nc
        unit = N / safe_len[..., None]
        g_N += np.where(cmask[..., None], -scale * (n_tilde - unit * cos[..., None]) / safe_len[..., None], 0.0)
        g_ntilde_cam = np.where(cmask[..., None], -scale * unit, 0.0) @ R
        g_D = g_D + _normal_vjp(cache, g_ntilde_cam)
    tv = weights.w_n / n_int
    sx, sy = np.sign(dx) * tv, np.sign(dy) * tv
    g_N[:-1, :-1] += sx + sy
    g_N[:-1, 1:] -= sx
    g_N[1:, :-1] -= sy
    g_D = np.where(D > 0, g_D, 0.0)
    return total, parts, (g_I, g_D, g_N)


def loss(rendered: RenderedViews, frame, weights: LossWeights, intr: CameraIntrinsics):
    """Weighted L1 color + L1 depth + (cosine + TV) normal loss.

    Returns ``(total, (L_c, L_d, L_n))``.  Each term is a per-pixel mean over
    the pixels where it is defined and 0 when there are none.
    """
    total, parts, _ = _loss_and_image_grads(rendered, frame, weights, intr, want_grad=False)
    return total, parts


def gradients(m: SplatMap, frame, intr: CameraIntrinsics, weights: LossWeights = LossWeights()):
    """Loss at ``frame.pose`` and its gradients w.r.t. surfel x, q, s, c, o.

    Returns ``(total, parts, grads)`` with ``grads`` a dict of arrays aligned
    with the map.  Confidence gets no gradient.
    """
    ras = rasterize(m, frame.pose, intr)
    total, parts, (g_I, g_D, g_N) = _loss_and_image_grads(ras.views, frame, weights, intr, want_grad=True)
    grads = backprop(m, ras, intr, g_I, g_D, g_N)
    return total, parts, grads


# ---------------------------------------------------------------- optimizer
PARAM_GROUPS = ("x", "q", "s", "c", "o")


class Adam:
    """Per-group Adam with per-surfel step counts so new surfels start fresh."""

    def __init__(self, lr: dict, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = dict(lr)
        self.b1, self.b2 = betas
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = np.zeros(0, dtype=np.int64)

    def sync(self, smap: SplatMap) -> None:
        """Grow state with zeros for surfels appended since the last step."""
        n = len(smap)
        extra = n - len(self.t)
        if extra < 0:
            raise RuntimeError("optimizer state larger than map; call remap() after pruning")
        if extra:
            self.t = np.concatenate([self.t, np.zeros(extra, dtype=np.int64)])
            for name in PARAM_GROUPS:
                shape = getattr(smap, name).shape[1:]
                for store in (self.m, self.v):
                    old = store.get(name, np.zeros((0,) + shape))
                    store[name] = np.concatenate([old, np.zeros((extra,) + shape)])

    def remap(self, remap: np.ndarray) -> None:
        keep = remap >= 0
        self.t = self.t[keep[: len(self.t)]]
        for store in (self.m, self.v):
            for name in store:
                store[name] = store[name][keep[: len(store[name])]]

    def step(self, smap: SplatMap, grads: dict) -> None:
        self.sync(smap)
        self.t += 1
        for name in PARAM_GROUPS:
            g = grads[name]
            m = self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
            v = self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * g * g
            tt = self.t.reshape((-1,) + (1,) * (g.ndim - 1))
            m_hat = m / (1 - self.b1**tt)
            v_hat = v / (1 - self.b2**tt)
            param = getattr(smap, name)
            param -= self.lr[name] * m_hat / (np.sqrt(v_hat) + self.eps)


def clamp_parameters(smap: SplatMap) -> None:
    smap.q /= np.linalg.norm(smap.q, axis=1, keepdims=True)
    np.clip(smap.o, 1e-4, 1 - 1e-4, out=smap.o)
    np.clip(smap.s, 1e-3, 0.5, out=smap.s)
    np.clip(smap.c, 0.0, 1.0, out=smap.c)


def select_batch(n_frames: int, cfg: TrainConfig, rng: np.random.Generator) -> list[int]:
    """The most recent frames plus distinct random earlier ones."""
    n_recent = min(cfg.recent_frames, n_frames)
    recent = list(range(n_frames - n_recent, n_frames))
    earlier = n_frames - n_recent
    n_rand = min(cfg.random_frames, earlier)
    picks = sorted(rng.choice(earlier, size=n_rand, replace=False).tolist()) if n_rand else []
    return recent + picks


def train_step(
    smap: SplatMap,
    frames: list,
    cfg: TrainConfig,
    rng: np.random.Generator,
    intr: CameraIntrinsics,
    optimizer: Adam,
    iterations: int | None = None,
) -> list[tuple]:
    """Run the per-mapping-step optimization.

    Returns one ``(total, L_c, L_d, L_n)`` tuple per iteration, averaged
    over that iteration's batch.
    """
    if not frames:
        raise ValueError("frame history is empty")
    trace = []
    iterations = cfg.iterations_per_step if iterations is None else iterations
    for _ in range(iterations):
        if not len(smap):
            break
        batch = select_batch(len(frames), cfg, rng)
        acc = {name: np.zeros_like(getattr(smap, name)) for name in PARAM_GROUPS}
        sums = np.zeros(4)
        for fi in batch:
            total, parts, grads = gradients(smap, frames[fi], intr, cfg.weights)
            sums += (total, *parts)
            for name in PARAM_GROUPS:
                acc[name] += grads[name]
        for name in PARAM_GROUPS:
            acc[name] = np.clip(acc[name] / len(batch), -cfg.grad_clip, cfg.grad_clip)
        optimizer.step(smap, acc)
        clamp_parameters(smap)
        trace.append(tuple(sums / len(batch)))
    return trace
