"""Per-pixel rasterization kernels (numba).

All kernels take splats already sorted front-to-back and walk every pixel
sequentially, so results are deterministic and independent of threading.

Splat arrays: ``mean (N,2)``, ``conic (N,3)`` = upper triangle ``(a, b, c)`` of
the inverse 2D covariance, ``opac (N,)``, ``color (N,3)``, ``extent (N,)``
half-width of a box outside which the kernel is below the alpha cutoff.
"""
from __future__ import annotations

import numpy as np
from numba import njit

ALPHA_MAX = 0.999
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4


TILE = 8


@njit(cache=True)
def bin_tiles(mean, extent, width, height):
    """CSR lists of splats touching each TILE x TILE block, front-to-back.

    Skipping a splat outside its box changes nothing (its alpha is below the
    cutoff there), so binned and unbinned rasterization agree exactly.
    """
    n_splats = mean.shape[0]
    tw = (width + TILE - 1) // TILE
    th = (height + TILE - 1) // TILE
    counts = np.zeros(tw * th + 1, dtype=np.int64)
    bounds = np.empty((n_splats, 4), dtype=np.int64)
    for n in range(n_splats):
        # pixel centres at c + 0.5 inside [mean - extent, mean + extent]
        c0 = int(np.ceil(mean[n, 0] - extent[n] - 0.5))
        c1 = int(np.floor(mean[n, 0] + extent[n] - 0.5))
        r0 = int(np.ceil(mean[n, 1] - extent[n] - 0.5))
        r1 = int(np.floor(mean[n, 1] + extent[n] - 0.5))
        c0 = max(c0, 0)
        r0 = max(r0, 0)
        c1 = min(c1, width - 1)
        r1 = min(r1, height - 1)
        if c0 > c1 or r0 > r1:
            bounds[n, 0] = 1
            bounds[n, 1] = 0
            bounds[n, 2] = 1
            bounds[n, 3] = 0
            continue
        c0 = c0 // TILE
        r0 = r0 // TILE
        c1 = c1 // TILE
        r1 = r1 // TILE
        bounds[n, 0] = r0
        bounds[n, 1] = r1
        bounds[n, 2] = c0
        bounds[n, 3] = c1
        for tr in range(r0, r1 + 1):
            for tc in range(c0, c1 + 1):
                counts[tr * tw + tc + 1] += 1
    for i in range(tw * th):
        counts[i + 1] += counts[i]
    ids = np.empty(counts[tw * th], dtype=np.int64)
    fill = counts[:-1].copy()
    for n in range(n_splats):
        for tr in range(bounds[n, 0], bounds[n, 1] + 1):
            for tc in range(bounds[n, 2], bounds[n, 3] + 1):
                t = tr * tw + tc
                ids[fill[t]] = n
                fill[t] += 1
    return counts, ids


@njit(cache=True)
def _alpha(mean, conic, opac, extent, n, px, py):
    dx = px - mean[n, 0]
    dy = py - mean[n, 1]
    if abs(dx) > extent[n] or abs(dy) > extent[n]:
        return 0.0, 0.0, dx, dy
    power = -0.5 * (conic[n, 0] * dx * dx + 2.0 * conic[n, 1] * dx * dy + conic[n, 2] * dy * dy)
    raw = opac[n] * np.exp(power)
    return raw, min(raw, ALPHA_MAX), dx, dy


@njit(cache=True)
def forward(mean, conic, opac, color, extent, width, height, bg, offs, ids):
    tw = (width + TILE - 1) // TILE
    img = np.empty((height, width, 3))
    t_final = np.empty((height, width))
    for row in range(height):
        py = row + 0.5
        for col in range(width):
            px = col + 0.5
            T = 1.0
            r = 0.0
            g = 0.0
            b = 0.0
            tile = (row // TILE) * tw + col // TILE
            for q in range(offs[tile], offs[tile + 1]):
                n = ids[q]
                if T < T_MIN:
                    break
                raw, a, dx, dy = _alpha(mean, conic, opac, extent, n, px, py)
                if a < ALPHA_MIN:
                    continue
                w = a * T
                r += color[n, 0] * w
                g += color[n, 1] * w
                b += color[n, 2] * w
                T *= 1.0 - a
            img[row, col, 0] = r + bg[0] * T
            img[row, col, 1] = g + bg[1] * T
            img[row, col, 2] = b + bg[2] * T
            t_final[row, col] = T
    return img, t_final


@njit(cache=True)
def activity(mean, conic, opac, extent, width, height, offs, ids):
    """Per-pixel code of which splats are active/clamped; used to spot kinks.

    Returns an ``(H, W, N)`` int8 array: 0 skipped (cut off or after early
    stop), 1 active, 2 active and clamped at the alpha ceiling.
    """
    n_splats = mean.shape[0]
    tw = (width + TILE - 1) // TILE
    out = np.zeros((height, width, n_splats), dtype=np.int8)
    for row in range(height):
        py = row + 0.5
        for col in range(width):
            px = col + 0.5
            T = 1.0
            tile = (row // TILE) * tw + col // TILE
            for q in range(offs[tile], offs[tile + 1]):
                n = ids[q]
                if T < T_MIN:
                    break
                raw, a, dx, dy = _alpha(mean, conic, opac, extent, n, px, py)
                if a < ALPHA_MIN:
                    continue
                out[row, col, n] = 2 if raw > ALPHA_MAX else 1
                T *= 1.0 - a
    return out


@njit(cache=True)
def _pixel_pass(mean, conic, opac, extent, offs, ids, tile, px, py, idx, alph, trans, clamped, dxs, dys):
    # front-to-back pass storing the active splats; returns count and final T
    m = 0
    T = 1.0
    for q in range(offs[tile], offs[tile + 1]):
        n = ids[q]
        if T < T_MIN:
            break
        raw, a, dx, dy = _alpha(mean, conic, opac, extent, n, px, py)
        if a < ALPHA_MIN:
            continue
        idx[m] = n
        alph[m] = a
        trans[m] = T
        clamped[m] = raw > ALPHA_MAX
        dxs[m] = dx
        dys[m] = dy
        m += 1
        T *= 1.0 - a
    return m, T


@njit(cache=True)
def count_pairs(mean, conic, opac, extent, width, height, offs, ids):
    tw = (width + TILE - 1) // TILE
    total = 0
    for row in range(height):
        py = row + 0.5
        for col in range(width):
            px = col + 0.5
            T = 1.0
            tile = (row // TILE) * tw + col // TILE
            for q in range(offs[tile], offs[tile + 1]):
                n = ids[q]
                if T < T_MIN:
                    break
                raw, a, dx, dy = _alpha(mean, conic, opac, extent, n, px, py)
                if a < ALPHA_MIN:
                    continue
                total += 1
                T *= 1.0 - a
    return total


@njit(cache=True)
def jacobian_pairs(mean, conic, opac, color, extent, width, height, bg, n_pairs, offs, ids):
    """Local derivatives for every active (pixel, splat) pair.

    Outputs, one entry per pair in row-major pixel order then front-to-back:
      pix      flat pixel index
      splat    sorted splat index
      dc_da    (M,3) dC/d alpha' per channel
      weight   (M,)  alpha' * T, the colour weight
      da_dgeo  (M,5) d alpha' / d(mean_x, mean_y, cov_xx, cov_xy, cov_yy),
               zero where alpha' was clamped
      da_dop   (M,)  d alpha' / d opacity (activated), zero where clamped
    """
    n_splats = mean.shape[0]
    tw = (width + TILE - 1) // TILE
    pix = np.empty(n_pairs, dtype=np.int64)
    splat = np.empty(n_pairs, dtype=np.int64)
    dc_da = np.empty((n_pairs, 3))
    weight = np.empty(n_pairs)
    da_dgeo = np.zeros((n_pairs, 5))
    da_dop = np.zeros(n_pairs)
    idx = np.empty(n_splats, dtype=np.int64)
    alph = np.empty(n_splats)
    trans = np.empty(n_splats)
    clamped = np.empty(n_splats, dtype=np.bool_)
    dxs = np.empty(n_splats)
    dys = np.empty(n_splats)
    base = 0
    for row in range(height):
        py = row + 0.5
        for col in range(width):
            px = col + 0.5
            m, T = _pixel_pass(mean, conic, opac, extent, offs, ids,
                               (row // TILE) * tw + col // TILE, px, py, idx, alph, trans, clamped, dxs, dys)
            s0 = bg[0] * T
            s1 = bg[1] * T
            s2 = bg[2] * T
            for j in range(m - 1, -1, -1):
                n = idx[j]
                a = alph[j]
                t = trans[j]
                p = base + j
                pix[p] = row * width + col
                splat[p] = n
                inv = 1.0 / (1.0 - a)
                dc_da[p, 0] = color[n, 0] * t - s0 * inv
                dc_da[p, 1] = color[n, 1] * t - s1 * inv
                dc_da[p, 2] = color[n, 2] * t - s2 * inv
                w = a * t
                weight[p] = w
                s0 += color[n, 0] * w
                s1 += color[n, 1] * w
                s2 += color[n, 2] * w
                if not clamped[j]:
                    ux = conic[n, 0] * dxs[j] + conic[n, 1] * dys[j]
                    uy = conic[n, 1] * dxs[j] + conic[n, 2] * dys[j]
                    da_dgeo[p, 0] = a * ux
                    da_dgeo[p, 1] = a * uy
                    da_dgeo[p, 2] = 0.5 * a * ux * ux
                    da_dgeo[p, 3] = a * ux * uy
                    da_dgeo[p, 4] = 0.5 * a * uy * uy
                    da_dop[p] = a / opac[n]
            base += m
    return pix, splat, dc_da, weight, da_dgeo, da_dop


@njit(cache=True)
def backward(mean, conic, opac, color, extent, width, height, bg, dl_dc, offs, ids):
    """Vector-Jacobian product for an image-space cotangent ``dl_dc (H,W,3)``.

    Returns per-splat gradients of mean (N,2), cov (N,3) as (xx, xy, yy),
    opacity (N,) and colour (N,3).
    """
    n_splats = mean.shape[0]
    tw = (width + TILE - 1) // TILE
    g_mean = np.zeros((n_splats, 2))
    g_cov = np.zeros((n_splats, 3))
    g_op = np.zeros(n_splats)
    g_col = np.zeros((n_splats, 3))
    idx = np.empty(n_splats, dtype=np.int64)
    alph = np.empty(n_splats)
    trans = np.empty(n_splats)
    clamped = np.empty(n_splats, dtype=np.bool_)
    dxs = np.empty(n_splats)
    dys = np.empty(n_splats)
    for row in range(height):
        py = row + 0.5
        for col in range(width):
            gr = dl_dc[row, col, 0]
            gg = dl_dc[row, col, 1]
            gb = dl_dc[row, col, 2]
            if gr == 0.0 and gg == 0.0 and gb == 0.0:
                continue
            px = col + 0.5
            m, T = _pixel_pass(mean, conic, opac, extent, offs, ids,
                               (row // TILE) * tw + col // TILE, px, py, idx, alph, trans, clamped, dxs, dys)
            s0 = bg[0] * T
            s1 = bg[1] * T
            s2 = bg[2] * T
            for j in range(m - 1, -1, -1):
                n = idx[j]
                a = alph[j]
                t = trans[j]
                inv = 1.0 / (1.0 - a)
                dl_da = (gr * (color[n, 0] * t - s0 * inv)
                         + gg * (color[n, 1] * t - s1 * inv)
                         + gb * (color[n, 2] * t - s2 * inv))
                w = a * t
                s0 += color[n, 0] * w
                s1 += color[n, 1] * w
                s2 += color[n, 2] * w
                g_col[n, 0] += gr * w
                g_col[n, 1] += gg * w
                g_col[n, 2] += gb * w
                if clamped[j]:
                    continue
                ux = conic[n, 0] * dxs[j] + conic[n, 1] * dys[j]
                uy = conic[n, 1] * dxs[j] + conic[n, 2] * dys[j]
                q = dl_da * a
                g_mean[n, 0] += q * ux
                g_mean[n, 1] += q * uy
                g_cov[n, 0] += 0.5 * q * ux * ux
                g_cov[n, 1] += q * ux * uy
                g_cov[n, 2] += 0.5 * q * uy * uy
                g_op[n] += q / opac[n]
    return g_mean, g_cov, g_op, g_col
