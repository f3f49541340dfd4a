"""Tile-based splat compositing kernels (forward and exact reverse pass).

Gaussians arrive as 2D means, conics (a, b, c of the inverse covariance),
camera depths, colors and opacities. Pixel centers sit at integer
coordinates. Tiles are processed in parallel; every pixel composites its
tile's list front to back, so results do not depend on the thread count.
"""
import math

import numba
import numpy as np

TILE = 16
ALPHA_MAX = 0.999
T_MIN = 1e-4
# 3-sigma footprint: exp(-r^2 / (2 sigma^2)) cut at r = 3 sigma
POWER_CUTOFF = 4.5


@numba.njit(cache=True)
def bin_tiles(order, means2d, radii, width, height):
    """Per-tile lists of Gaussian indices, preserving ``order``.

    Returns (tile_offsets, entries); tile ``t`` owns
    ``entries[tile_offsets[t]:tile_offsets[t + 1]]``.
    """
    tx = (width + TILE - 1) // TILE
    ty = (height + TILE - 1) // TILE
    counts = np.zeros(tx * ty, dtype=np.int64)
    n = order.shape[0]
    bounds = np.empty((n, 4), dtype=np.int64)
    for k in range(n):
        g = order[k]
        r = radii[g]
        x0 = max(int(math.floor((means2d[g, 0] - r) / TILE)), 0)
        x1 = min(int(math.floor((means2d[g, 0] + r) / TILE)), tx - 1)
        y0 = max(int(math.floor((means2d[g, 1] - r) / TILE)), 0)
        y1 = min(int(math.floor((means2d[g, 1] + r) / TILE)), ty - 1)
        bounds[k, 0] = x0
        bounds[k, 1] = x1
        bounds[k, 2] = y0
        bounds[k, 3] = y1
        for yy in range(y0, y1 + 1):
            for xx in range(x0, x1 + 1):
                counts[yy * tx + xx] += 1
    offsets = np.zeros(tx * ty + 1, dtype=np.int64)
    for t in range(tx * ty):
        offsets[t + 1] = offsets[t] + counts[t]
    fill = offsets[:-1].copy()
    entries = np.empty(offsets[-1], dtype=np.int64)
    for k in range(n):
        for yy in range(bounds[k, 2], bounds[k, 3] + 1):
            for xx in range(bounds[k, 0], bounds[k, 1] + 1):
                t = yy * tx + xx
                entries[fill[t]] = order[k]
                fill[t] += 1
    return offsets, entries


@numba.njit(parallel=True, cache=True)
def forward(offsets, entries, means2d, conics, depths, colors, opacities, width, height):
    tx = (width + TILE - 1) // TILE
    n_tiles = offsets.shape[0] - 1
    dtype = means2d.dtype
    rgb = np.zeros((height, width, 3), dtype=dtype)
    depth = np.zeros((height, width), dtype=dtype)
    alpha = np.zeros((height, width), dtype=dtype)
    trans = np.ones((height, width), dtype=dtype)
    last = np.zeros((height, width), dtype=np.int64)
    for t in numba.prange(n_tiles):
        x_start = (t % tx) * TILE
        y_start = (t // tx) * TILE
        start = offsets[t]
        end = offsets[t + 1]
        for py in range(y_start, min(y_start + TILE, height)):
            for px in range(x_start, min(x_start + TILE, width)):
                T = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                d = 0.0
                a = 0.0
                stop = start
                for e in range(start, end):
                    if T < T_MIN:
                        break
                    g = entries[e]
                    dx = px - means2d[g, 0]
                    dy = py - means2d[g, 1]
                    power = 0.5 * (conics[g, 0] * dx * dx + conics[g, 2] * dy * dy) + conics[g, 1] * dx * dy
                    if power > POWER_CUTOFF or power < 0.0:
                        continue
                    al = min(ALPHA_MAX, opacities[g] * math.exp(-power))
                    w = al * T
                    c0 += colors[g, 0] * w
                    c1 += colors[g, 1] * w
                    c2 += colors[g, 2] * w
                    d += depths[g] * w
                    a += w
                    T = T * (1.0 - al)
                    stop = e + 1
                rgb[py, px, 0] = c0
                rgb[py, px, 1] = c1
                rgb[py, px, 2] = c2
                depth[py, px] = d
                alpha[py, px] = a
                trans[py, px] = T
                last[py, px] = stop
    return rgb, depth, alpha, trans, last


@numba.njit(parallel=True, cache=True)
def backward(offsets, entries, means2d, conics, depths, colors, opacities, width, height,
             trans, last, g_rgb, g_depth, g_alpha):
    """Per-entry gradients; reduce them per Gaussian with ``reduce_entries``.

    Columns of the returned (n_entries, 10) array: mean x, mean y, conic
    a, b, c, depth, color r, g, b, opacity.
    """
    tx = (width + TILE - 1) // TILE
    n_tiles = offsets.shape[0] - 1
    grads = np.zeros((entries.shape[0], 10), dtype=means2d.dtype)
    for t in numba.prange(n_tiles):
        x_start = (t % tx) * TILE
        y_start = (t // tx) * TILE
        start = offsets[t]
        for py in range(y_start, min(y_start + TILE, height)):
            for px in range(x_start, min(x_start + TILE, width)):
                gr = g_rgb[py, px, 0]
                gg = g_rgb[py, px, 1]
                gb = g_rgb[py, px, 2]
                gd = g_depth[py, px]
                ga = g_alpha[py, px]
                if gr == 0.0 and gg == 0.0 and gb == 0.0 and gd == 0.0 and ga == 0.0:
                    continue
                T = trans[py, px]
                acc = 0.0  # sum over later contributors of (g . value) * weight
                for e in range(last[py, px] - 1, start - 1, -1):
                    g = entries[e]
                    dx = px - means2d[g, 0]
                    dy = py - means2d[g, 1]
                    ca = conics[g, 0]
                    cb = conics[g, 1]
                    cc = conics[g, 2]
                    power = 0.5 * (ca * dx * dx + cc * dy * dy) + cb * dx * dy
                    if power > POWER_CUTOFF or power < 0.0:
                        continue
                    falloff = math.exp(-power)
                    raw = opacities[g] * falloff
                    al = min(ALPHA_MAX, raw)
                    T = T / (1.0 - al)
                    w = al * T
                    val = gr * colors[g, 0] + gg * colors[g, 1] + gb * colors[g, 2] + gd * depths[g] + ga
                    d_alpha = T * val - acc / (1.0 - al)
                    acc += val * w
                    grads[e, 5] += gd * w
                    grads[e, 6] += gr * w
                    grads[e, 7] += gg * w
                    grads[e, 8] += gb * w
                    if raw < ALPHA_MAX:
                        grads[e, 9] += d_alpha * falloff
                        d_power = -d_alpha * al
                        grads[e, 0] += -d_power * (ca * dx + cb * dy)
                        grads[e, 1] += -d_power * (cb * dx + cc * dy)
                        grads[e, 2] += d_power * 0.5 * dx * dx
                        grads[e, 3] += d_power * dx * dy
                        grads[e, 4] += d_power * 0.5 * dy * dy
    return grads


@numba.njit(cache=True)
def reduce_entries(entries, grads, n_gaussians):
    out = np.zeros((n_gaussians, grads.shape[1]), dtype=grads.dtype)
    for e in range(entries.shape[0]):
        g = entries[e]
        for k in range(grads.shape[1]):
            out[g, k] += grads[e, k]
    return out
