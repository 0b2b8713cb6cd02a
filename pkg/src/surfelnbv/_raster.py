"""Numba kernels for tile-binned surfel compositing and its reverse pass.

Surfels reach these kernels already projected and sorted front to back; the
per-surfel projection math and its chain rule live in ``splat_map``.
"""

import math

import numba
import numpy as np

TILE = 8
T_MIN = 1e-4
MAHA_CUT = 9.0  # 3 sigma, squared
PARALLEL_EPS = 1e-6


@numba.njit(cache=True)
def bin_tiles(order, mean2d, radius, width, height):
    """CSR lists of sorted surfel ids overlapping each 8x8 tile."""
    tx = (width + TILE - 1) // TILE
    ty = (height + TILE - 1) // TILE
    counts = np.zeros(tx * ty + 1, np.int64)
    lo_c = np.empty(order.shape[0], np.int64)
    hi_c = np.empty(order.shape[0], np.int64)
    lo_r = np.empty(order.shape[0], np.int64)
    hi_r = np.empty(order.shape[0], np.int64)
    for k in range(order.shape[0]):
        i = order[k]
        r = radius[i]
        c0 = max(int(math.ceil(mean2d[i, 0] - r - 0.5)), 0)
        c1 = min(int(math.floor(mean2d[i, 0] + r - 0.5)), width - 1)
        r0 = max(int(math.ceil(mean2d[i, 1] - r - 0.5)), 0)
        r1 = min(int(math.floor(mean2d[i, 1] + r - 0.5)), height - 1)
        lo_c[k] = c0
        hi_c[k] = c1
        lo_r[k] = r0
        hi_r[k] = r1
        if c0 > c1 or r0 > r1:
            continue
        for b in range(r0 // TILE, r1 // TILE + 1):
            for a in range(c0 // TILE, c1 // TILE + 1):
                counts[b * tx + a + 1] += 1
    ptr = np.cumsum(counts)
    fill = ptr[:-1].copy()
    ids = np.empty(ptr[-1], np.int64)
    for k in range(order.shape[0]):
        c0, c1, r0, r1 = lo_c[k], hi_c[k], lo_r[k], hi_r[k]
        if c0 > c1 or r0 > r1:
            continue
        for b in range(r0 // TILE, r1 // TILE + 1):
            for a in range(c0 // TILE, c1 // TILE + 1):
                t = b * tx + a
                ids[fill[t]] = order[k]
                fill[t] += 1
    return ptr, ids


@numba.njit(cache=True)
def _depth_of(i, rx, ry, rz, xs, normal, axes, cam):
    """Ray/plane distance, or the center range when the ray runs (nearly)
    parallel to the plane or meets it outside the surfel's 3 sigma support.

    ``axes[i]`` holds the world tangent axes divided by the in-plane scales
    (widened by the screen blur), so the Mahalanobis distance of the hit is
    a plain sum of squares.  Edge-on surfels cover pixels through the blur
    alone; their plane hits land far away and fall back to the center.
    The last flag reports which branch was taken.
    """
    px = xs[i, 0] - cam[0]
    py = xs[i, 1] - cam[1]
    pz = xs[i, 2] - cam[2]
    den = rx * normal[i, 0] + ry * normal[i, 1] + rz * normal[i, 2]
    if abs(den) >= PARALLEL_EPS:
        d = (px * normal[i, 0] + py * normal[i, 1] + pz * normal[i, 2]) / den
        hx = d * rx - px
        hy = d * ry - py
        hz = d * rz - pz
        a = hx * axes[i, 0, 0] + hy * axes[i, 0, 1] + hz * axes[i, 0, 2]
        b = hx * axes[i, 1, 0] + hy * axes[i, 1, 1] + hz * axes[i, 1, 2]
        if a * a + b * b <= MAHA_CUT:
            return d, den, False
    return math.sqrt(px * px + py * py + pz * pz), den, True


@numba.njit(cache=True)
def forward(ptr, ids, mean2d, conic, opacity, color, normal, axes, conf, xs, rays, cam, n_surfels):
    h, w = rays.shape[0], rays.shape[1]
    tx = (w + TILE - 1) // TILE
    rgb = np.zeros((h, w, 3))
    depth = np.zeros((h, w))
    nrm = np.zeros((h, w, 3))
    opac = np.zeros((h, w))
    kmap = np.zeros((h, w))
    n_contrib = np.zeros((h, w), np.int64)
    max_w = np.zeros(n_surfels)
    for v in range(h):
        for u in range(w):
            t = (v // TILE) * tx + u // TILE
            px = u + 0.5
            py = v + 0.5
            rx, ry, rz = rays[v, u, 0], rays[v, u, 1], rays[v, u, 2]
            T = 1.0
            cnt = 0
            for e in range(ptr[t], ptr[t + 1]):
                if T < T_MIN:
                    break
                i = ids[e]
                dx = px - mean2d[i, 0]
                dy = py - mean2d[i, 1]
                q = conic[i, 0] * dx * dx + 2.0 * conic[i, 1] * dx * dy + conic[i, 2] * dy * dy
                if q > MAHA_CUT:
                    continue
                alpha = opacity[i] * math.exp(-0.5 * q)
                wt = T * alpha
                d, _, _ = _depth_of(i, rx, ry, rz, xs, normal, axes, cam)
                for c in range(3):
                    rgb[v, u, c] += wt * color[i, c]
                    nrm[v, u, c] += wt * normal[i, c]
                depth[v, u] += wt * d
                kmap[v, u] += wt * conf[i]
                opac[v, u] += wt
                if wt > max_w[i]:
                    max_w[i] = wt
                T *= 1.0 - alpha
                cnt += 1
            n_contrib[v, u] = cnt
    return rgb, depth, nrm, opac, kmap, n_contrib, max_w


@numba.njit(cache=True)
def contributors(ptr, ids, mean2d, conic, opacity, offsets, width, height):
    """Flat (surfel id, weight) records per pixel, laid out by ``offsets``."""
    tx = (width + TILE - 1) // TILE
    out_id = np.empty(offsets[-1], np.int64)
    out_w = np.empty(offsets[-1])
    for v in range(height):
        for u in range(width):
            t = (v // TILE) * tx + u // TILE
            k = offsets[v * width + u]
            T = 1.0
            for e in range(ptr[t], ptr[t + 1]):
                if T < T_MIN:
                    break
                i = ids[e]
                dx = u + 0.5 - mean2d[i, 0]
                dy = v + 0.5 - mean2d[i, 1]
                q = conic[i, 0] * dx * dx + 2.0 * conic[i, 1] * dx * dy + conic[i, 2] * dy * dy
                if q > MAHA_CUT:
                    continue
                alpha = opacity[i] * math.exp(-0.5 * q)
                out_id[k] = i
                out_w[k] = T * alpha
                k += 1
                T *= 1.0 - alpha
    return out_id, out_w


@numba.njit(cache=True)
def backward(ptr, ids, mean2d, conic, opacity, color, normal, axes, xs, rays, cam, n_surfels,
             g_rgb, g_depth, g_nrm, g_opac):
    """Reverse pass of ``forward`` for the color, depth, normal and opacity maps.

    Returns per-surfel gradients w.r.t. the projected mean, the conic
    entries (a, b, c) of ``a dx^2 + 2 b dx dy + c dy^2``, opacity, color,
    the (camera-facing) normal and the center position through the
    per-surfel depth.  The depth branch is piecewise, so nothing flows to
    the scales or tangents through it.
    """
    h, w = rays.shape[0], rays.shape[1]
    tx = (w + TILE - 1) // TILE
    g_mean = np.zeros((n_surfels, 2))
    g_conic = np.zeros((n_surfels, 3))
    g_op = np.zeros(n_surfels)
    g_col = np.zeros((n_surfels, 3))
    g_n = np.zeros((n_surfels, 3))
    g_x = np.zeros((n_surfels, 3))
    max_len = 0
    for t in range(ptr.shape[0] - 1):
        max_len = max(max_len, ptr[t + 1] - ptr[t])
    b_id = np.empty(max_len, np.int64)
    b_alpha = np.empty(max_len)
    b_T = np.empty(max_len)
    b_d = np.empty(max_len)
    b_den = np.empty(max_len)
    b_center = np.empty(max_len, np.bool_)
    b_dx = np.empty(max_len)
    b_dy = np.empty(max_len)
    b_g = np.empty(max_len)
    for v in range(h):
        for u in range(w):
            t = (v // TILE) * tx + u // TILE
            rx, ry, rz = rays[v, u, 0], rays[v, u, 1], rays[v, u, 2]
            T = 1.0
            n = 0
            for e in range(ptr[t], ptr[t + 1]):
                if T < T_MIN:
                    break
                i = ids[e]
                dx = u + 0.5 - mean2d[i, 0]
                dy = v + 0.5 - mean2d[i, 1]
                q = conic[i, 0] * dx * dx + 2.0 * conic[i, 1] * dx * dy + conic[i, 2] * dy * dy
                if q > MAHA_CUT:
                    continue
                gauss = math.exp(-0.5 * q)
                alpha = opacity[i] * gauss
                d, den, center = _depth_of(i, rx, ry, rz, xs, normal, axes, cam)
                b_g[n] = gauss
                b_id[n] = i
                b_alpha[n] = alpha
                b_T[n] = T
                b_d[n] = d
                b_den[n] = den
                b_center[n] = center
                b_dx[n] = dx
                b_dy[n] = dy
                n += 1
                T *= 1.0 - alpha
            if n == 0:
                continue
            gr, gg, gb = g_rgb[v, u, 0], g_rgb[v, u, 1], g_rgb[v, u, 2]
            gd = g_depth[v, u]
            gnx, gny, gnz = g_nrm[v, u, 0], g_nrm[v, u, 1], g_nrm[v, u, 2]
            go = g_opac[v, u]
            suffix = 0.0
            for m in range(n - 1, -1, -1):
                i = b_id[m]
                alpha = b_alpha[m]
                Ti = b_T[m]
                wt = Ti * alpha
                feat = (color[i, 0] * gr + color[i, 1] * gg + color[i, 2] * gb
                        + b_d[m] * gd
                        + normal[i, 0] * gnx + normal[i, 1] * gny + normal[i, 2] * gnz
                        + go)
                one_m = 1.0 - alpha
                if one_m > 1e-12:
                    g_alpha = Ti * feat - suffix / one_m
                else:
                    g_alpha = Ti * feat
                suffix += wt * feat
                g_col[i, 0] += wt * gr
                g_col[i, 1] += wt * gg
                g_col[i, 2] += wt * gb
                g_n[i, 0] += wt * gnx
                g_n[i, 1] += wt * gny
                g_n[i, 2] += wt * gnz
                gdd = wt * gd
                if gdd != 0.0:
                    px = xs[i, 0] - cam[0]
                    py = xs[i, 1] - cam[1]
                    pz = xs[i, 2] - cam[2]
                    if b_center[m]:
                        inv = gdd / b_d[m]
                        g_x[i, 0] += inv * px
                        g_x[i, 1] += inv * py
                        g_x[i, 2] += inv * pz
                    else:
                        s = gdd / b_den[m]
                        d = b_d[m]
                        g_x[i, 0] += s * normal[i, 0]
                        g_x[i, 1] += s * normal[i, 1]
                        g_x[i, 2] += s * normal[i, 2]
                        g_n[i, 0] += s * (px - d * rx)
                        g_n[i, 1] += s * (py - d * ry)
                        g_n[i, 2] += s * (pz - d * rz)
                g_op[i] += g_alpha * b_g[m]
                g_q = -0.5 * alpha * g_alpha
                dx = b_dx[m]
                dy = b_dy[m]
                g_mean[i, 0] -= g_q * 2.0 * (conic[i, 0] * dx + conic[i, 1] * dy)
                g_mean[i, 1] -= g_q * 2.0 * (conic[i, 1] * dx + conic[i, 2] * dy)
                g_conic[i, 0] += g_q * dx * dx
                g_conic[i, 1] += g_q * 2.0 * dx * dy
                g_conic[i, 2] += g_q * dy * dy
    return g_mean, g_conic, g_op, g_col, g_n, g_x
