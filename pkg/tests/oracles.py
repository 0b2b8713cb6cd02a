"""Slow, independent reference implementations used by the tests."""

from __future__ import annotations

import heapq
import math

import numpy as np
from scipy.spatial.transform import Rotation

from surfelnbv.camera import CameraIntrinsics, Pose, frame_from_normal, rotmat_to_quat
from surfelnbv.splat_map import SplatMap


# ----------------------------------------------------------------- surfels
def random_splat_map(rng, n, pose: Pose, spread=0.8, dist=(1.0, 3.0), behind=0.0, max_tilt_deg=None) -> SplatMap:
    """Random surfels roughly in front of ``pose``; a fraction may sit behind it.

    ``max_tilt_deg`` bounds the angle between a surfel's plane normal and its
    line of sight, keeping nearly edge-on footprints out of the sample.
    """
    m = SplatMap()
    R = pose.rotation
    for _ in range(n):
        z = rng.uniform(*dist) * (-1 if rng.random() < behind else 1)
        local = np.array([rng.uniform(-spread, spread), rng.uniform(-spread, spread), z])
        x = pose.position + R @ local
        while True:
            q = rng.normal(size=4)
            q /= np.linalg.norm(q)
            if max_tilt_deg is None:
                break
            view = (pose.position - x) / np.linalg.norm(pose.position - x)
            if abs(np.dot(rotation_of(q)[:, 2], view)) >= np.cos(np.radians(max_tilt_deg)):
                break
        m.add(x[None], q[None], rng.uniform(0.05, 0.4, (1, 2)), rng.uniform(0, 1, (1, 3)),
              [rng.uniform(0.05, 0.95)], [rng.uniform(0, 2)])
    return m


def facing_surfel(x, normal, s=(0.1, 0.1), c=(0.5, 0.5, 0.5), o=0.8, k=0.0) -> SplatMap:
    m = SplatMap()
    q = rotmat_to_quat(frame_from_normal(np.asarray(normal, float)))
    m.add(np.asarray(x, float)[None], q[None], np.asarray(s, float)[None], np.asarray(c, float)[None], [o], [k])
    return m


def rotation_of(q) -> np.ndarray:
    w, x, y, z = q
    return Rotation.from_quat([x, y, z, w]).as_matrix()


def naive_render(m: SplatMap, pose: Pose, intr: CameraIntrinsics, blur=0.3, guard=1.3):
    """Per-pixel ordered sums over every surfel, no tiling, no shared helpers."""
    H, W = intr.height, intr.width
    f, cx, cy = intr.focal, intr.cx, intr.cy
    Rc = pose.rotation  # camera -> world
    Wm = Rc.T
    items = []
    for i in range(len(m)):
        t = Wm @ (m.x[i] - pose.position)
        if t[2] <= 0.5 * intr.d_near:
            continue
        R = rotation_of(m.q[i])
        sigma = R @ np.diag([m.s[i, 0] ** 2, m.s[i, 1] ** 2, 0.0]) @ R.T
        lim_x, lim_y = guard * cx / f, guard * cy / f
        sx = min(max(t[0] / t[2], -lim_x), lim_x)
        sy = min(max(t[1] / t[2], -lim_y), lim_y)
        J = np.array([[f / t[2], 0.0, -f * sx / t[2]], [0.0, f / t[2], -f * sy / t[2]]])
        cov = J @ Wm @ sigma @ Wm.T @ J.T + blur * np.eye(2)
        mean = np.array([f * t[0] / t[2] + cx, f * t[1] / t[2] + cy])
        n = R[:, 2]
        if np.dot(n, pose.position - m.x[i]) < 0:
            n = -n
        widen = blur * (t[2] / f) ** 2
        ax = R[:, 0] / math.sqrt(m.s[i, 0] ** 2 + widen)
        ay = R[:, 1] / math.sqrt(m.s[i, 1] ** 2 + widen)
        items.append((t[2], i, mean, np.linalg.inv(cov), n, ax, ay))
    items.sort(key=lambda it: it[0])
    rgb = np.zeros((H, W, 3))
    depth = np.zeros((H, W))
    nrm = np.zeros((H, W, 3))
    opac = np.zeros((H, W))
    conf = np.zeros((H, W))
    contrib = []
    for v in range(H):
        for u in range(W):
            ray_c = np.array([(u + 0.5 - cx) / f, (v + 0.5 - cy) / f, 1.0])
            ray = Rc @ (ray_c / np.linalg.norm(ray_c))
            T = 1.0
            here = []
            for _, i, mean, inv, n, ax, ay in items:
                if T < 1e-4:
                    break
                dlt = np.array([u + 0.5, v + 0.5]) - mean
                qf = dlt @ inv @ dlt
                if qf > 9.0:
                    continue
                alpha = m.o[i] * math.exp(-0.5 * qf)
                w = T * alpha
                den = np.dot(ray, n)
                d = np.linalg.norm(m.x[i] - pose.position)
                if abs(den) >= 1e-6:
                    t_hit = np.dot(m.x[i] - pose.position, n) / den
                    local = pose.position + t_hit * ray - m.x[i]
                    if np.dot(local, ax) ** 2 + np.dot(local, ay) ** 2 <= 9.0:
                        d = t_hit
                rgb[v, u] += w * m.c[i]
                depth[v, u] += w * d
                nrm[v, u] += w * n
                opac[v, u] += w
                conf[v, u] += w * m.k[i]
                here.append((i, w))
                T *= 1.0 - alpha
            contrib.append(here)
    depth[opac < 1e-3] = 0.0
    return rgb, depth, nrm, opac, conf, contrib


# ------------------------------------------------------------ depth normals
def scalar_normal_from_depth(depth, intr: CameraIntrinsics, filtered: bool = True):
    """Loop version: range -> z-depth, bilateral filter, unproject, cross central differences."""
    H, W = depth.shape
    f, cx, cy = intr.focal, intr.cx, intr.cy

    def ray(v, u):
        r = np.array([(u + 0.5 - cx) / f, (v + 0.5 - cy) / f, 1.0])
        return r / np.linalg.norm(r)

    z = np.array([[depth[v, u] * ray(v, u)[2] for u in range(W)] for v in range(H)])
    zf = z.copy()
    if filtered:
        for v in range(H):
            for u in range(W):
                if depth[v, u] <= 0:
                    continue
                num = den = 0.0
                for dv in range(-2, 3):
                    for du in range(-2, 3):
                        vv, uu = v + dv, u + du
                        if not (0 <= vv < H and 0 <= uu < W) or depth[vv, uu] <= 0:
                            continue
                        w = math.exp(-(du * du + dv * dv) / 8.0) * math.exp(-((z[vv, uu] - z[v, u]) ** 2) / (2 * 0.05**2))
                        num += w * z[vv, uu]
                        den += w
                zf[v, u] = num / den

    def point(v, u):
        r = ray(v, u)
        return zf[v, u] * r / r[2]

    out = np.zeros((H, W, 3))
    for v in range(1, H - 1):
        for u in range(1, W - 1):
            if min(depth[v, u], depth[v, u - 1], depth[v, u + 1], depth[v - 1, u], depth[v + 1, u]) <= 0:
                continue
            n = np.cross(point(v, u + 1) - point(v, u - 1), point(v + 1, u) - point(v - 1, u))
            ln = np.linalg.norm(n)
            if ln <= 1e-12:
                continue
            n /= ln
            if np.dot(n, point(v, u)) > 0:
                n = -n
            out[v, u] = n
    return out


def scalar_loss(I, D, N, frame, pose: Pose, intr: CameraIntrinsics, w=(1.0, 0.8, 0.1)):
    H, W = D.shape
    lc = sum(abs(I[v, u, c] - frame.rgb[v, u, c]) for v in range(H) for u in range(W) for c in range(3)) / (H * W * 3)
    dd = [abs(D[v, u] - frame.depth[v, u]) for v in range(H) for u in range(W) if D[v, u] > 0 and frame.depth[v, u] > 0]
    ld = sum(dd) / len(dd) if dd else 0.0
    nt = scalar_normal_from_depth(D, intr)
    R = pose.rotation
    cs = []
    for v in range(H):
        for u in range(W):
            ln = np.linalg.norm(N[v, u])
            lt = np.linalg.norm(nt[v, u])
            if ln > 1e-12 and lt > 0:
                cs.append(1.0 - np.dot(N[v, u], R @ nt[v, u]) / (ln * lt))
    lcos = sum(cs) / len(cs) if cs else 0.0
    tv = 0.0
    for v in range(H - 1):
        for u in range(W - 1):
            tv += np.abs(N[v, u] - N[v, u + 1]).sum() + np.abs(N[v, u] - N[v + 1, u]).sum()
    ln_ = lcos + tv / ((H - 1) * (W - 1))
    return w[0] * lc + w[1] * ld + w[2] * ln_, (lc, ld, ln_)


# ------------------------------------------------------------------- voxels
def segment_hits_box(p0, p1, lo, hi) -> bool:
    """True when the open segment p0->p1 passes through the interior of a box."""
    d = p1 - p0
    t0, t1 = 0.0, 1.0
    for a in range(3):
        if abs(d[a]) < 1e-15:
            if p0[a] <= lo[a] or p0[a] >= hi[a]:
                return False
            continue
        ta, tb = (lo[a] - p0[a]) / d[a], (hi[a] - p0[a]) / d[a]
        t0, t1 = max(t0, min(ta, tb)), min(t1, max(ta, tb))
    return t1 - t0 > 1e-12


def oracle_integrate(vmap, origin, points, l_hit=0.85, l_miss=-0.4, lo=-2.0, hi=3.5):
    """Per-voxel replay: slab tests for traversal, set semantics per scan."""
    dims = vmap.dims
    vs = vmap.voxel_size
    hit_set, miss_set = set(), set()
    for p in points:
        end = tuple(np.floor((p - vmap.origin) / vs).astype(int))
        if all(0 <= end[a] < dims[a] for a in range(3)):
            hit_set.add(end)
        for idx in np.ndindex(*dims):
            if idx == end:
                continue
            blo = vmap.origin + np.array(idx) * vs
            if segment_hits_box(origin, p, blo, blo + vs):
                miss_set.add(idx)
    miss_set -= hit_set
    lo_odds = vmap.log_odds.copy()
    obs = vmap.observed.copy()
    for idx in miss_set:
        lo_odds[idx] = min(max(lo_odds[idx] + l_miss, lo), hi)
        obs[idx] = True
    for idx in hit_set:
        lo_odds[idx] = min(max(lo_odds[idx] + l_hit, lo), hi)
        obs[idx] = True
    return lo_odds, obs


def brute_frontiers(free, unknown):
    out = set()
    X, Y, Z = free.shape
    for i in range(X):
        for j in range(Y):
            for k in range(Z):
                if not free[i, j, k]:
                    continue
                for d in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                    a, b, c = i + d[0], j + d[1], k + d[2]
                    if 0 <= a < X and 0 <= b < Y and 0 <= c < Z and unknown[a, b, c]:
                        out.add((i, j, k))
                        break
    return out


def census_oracle(vmap, pose: Pose, depth, intr: CameraIntrinsics) -> int:
    """Loop over every unknown voxel; compare its range with the depth map."""
    count = 0
    R = pose.rotation
    for idx in zip(*np.nonzero(~vmap.observed)):
        c = vmap.origin + (np.array(idx) + 0.5) * vmap.voxel_size
        pc = R.T @ (c - pose.position)
        if pc[2] <= 0:
            continue
        u = intr.focal * pc[0] / pc[2] + intr.cx
        v = intr.focal * pc[1] / pc[2] + intr.cy
        if not (0 <= u < intr.width and 0 <= v < intr.height):
            continue
        r = float(np.linalg.norm(pc))
        if r < intr.d_near or r > intr.d_far:
            continue
        d = depth[int(math.floor(v)), int(math.floor(u))]
        if r < (d if d > 0 else math.inf):
            count += 1
    return count


# --------------------------------------------------------------------- paths
def dijkstra_length(passable, start, goal, voxel_size):
    """Plain Dijkstra over 6-neighbours; hop counts kept integral, scaled at the end."""
    dist = {tuple(start): 0}
    heap = [(0, tuple(start))]
    goal = tuple(goal)
    while heap:
        d, node = heapq.heappop(heap)
        if node == goal:
            return d * voxel_size
        if d > dist.get(node, math.inf):
            continue
        for ax in range(3):
            for s in (-1, 1):
                nb = list(node)
                nb[ax] += s
                nb = tuple(nb)
                if all(0 <= nb[a] < passable.shape[a] for a in range(3)) and passable[nb]:
                    nd = d + 1
                    if nd < dist.get(nb, math.inf):
                        dist[nb] = nd
                        heapq.heappush(heap, (nd, nb))
    return None


def nbv_scores(utilities, lengths, delta):
    """Scalar recomputation of the normalized selection score."""
    shift = min(0.0, min(utilities))
    u = [x - shift for x in utilities]
    su, sl = sum(u), sum(lengths)
    return [(ui / su if su > 0 else 0.0) - delta * (li / sl if sl > 0 else 0.0) for ui, li in zip(u, lengths)]


# ------------------------------------------------------------- confidence
def scalar_confidence(x, n, positions, d_far):
    gamma = 0.0
    vs = []
    for p in positions:
        diff = [p[a] - x[a] for a in range(3)]
        d = math.sqrt(sum(c * c for c in diff))
        if d < 1e-9:
            continue
        v = [c / d for c in diff]
        vs.append(v)
        gamma += max(0.0, 1.0 - d / d_far) * max(0.0, sum(n[a] * v[a] for a in range(3)))
    if not vs:
        return 0.0
    mu = [sum(v[a] for v in vs) / len(vs) for a in range(3)]
    beta = 1.0 - math.sqrt(sum(c * c for c in mu))
    return gamma * math.exp(beta)
