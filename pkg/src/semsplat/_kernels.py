"""Numba kernels for tiled alpha compositing, forward and backward.

All kernels are single-threaded on purpose: per-pixel blending order and
gradient accumulation order are then fixed, which makes renders and training
runs bit-reproducible. The per-pixel math matches the brute-force oracle
exactly: a splat contributes only inside its cutoff disc, alpha is clamped at
ALPHA_MAX, and accumulation stops once transmittance drops below T_EPS.
"""

import numpy as np
from numba import njit

TILE = 16
ALPHA_MAX = 0.99
T_EPS = 1e-4


@njit(cache=True)
def build_tile_lists(tx0, tx1, ty0, ty1, n_tiles_x, n_tiles_y):
    """CSR tile lists from per-splat inclusive tile ranges.

    Splats must already be sorted front-to-back; per-tile lists inherit
    that order. Returns (offsets, order) with order holding splat rows.
    """
    n_tiles = n_tiles_x * n_tiles_y
    counts = np.zeros(n_tiles, dtype=np.int64)
    n = tx0.shape[0]
    for s in range(n):
        for ty in range(ty0[s], ty1[s] + 1):
            base = ty * n_tiles_x
            for tx in range(tx0[s], tx1[s] + 1):
                counts[base + tx] += 1
    offsets = np.zeros(n_tiles + 1, dtype=np.int64)
    for i in range(n_tiles):
        offsets[i + 1] = offsets[i] + counts[i]
    fill = offsets[:n_tiles].copy()
    order = np.empty(offsets[n_tiles], dtype=np.int64)
    for s in range(n):
        for ty in range(ty0[s], ty1[s] + 1):
            base = ty * n_tiles_x
            for tx in range(tx0[s], tx1[s] + 1):
                order[fill[base + tx]] = s
                fill[base + tx] += 1
    return offsets, order


@njit(cache=True)
def forward_kernel(offsets, order, mean2d, conic, opacity, color, feat,
                   radius_sq, background, height, width, n_tiles_x,
                   out_color, out_feat, out_final_t, out_max_contrib,
                   out_count):
    d = feat.shape[1]
    facc = np.zeros(d, dtype=np.float64)
    n_tiles = offsets.shape[0] - 1
    for tile in range(n_tiles):
        ty = tile // n_tiles_x
        tx = tile % n_tiles_x
        y_end = min((ty + 1) * TILE, height)
        x_end = min((tx + 1) * TILE, width)
        start = offsets[tile]
        stop = offsets[tile + 1]
        for py in range(ty * TILE, y_end):
            cy = py + 0.5
            for px in range(tx * TILE, x_end):
                cx = px + 0.5
                t = 1.0
                acc_r = 0.0
                acc_g = 0.0
                acc_b = 0.0
                for j in range(d):
                    facc[j] = 0.0
                best_w = 0.0
                best = np.int64(-1)
                count = 0
                for n in range(start, stop):
                    if t < T_EPS:
                        break
                    s = order[n]
                    dx = cx - mean2d[s, 0]
                    dy = cy - mean2d[s, 1]
                    if dx * dx + dy * dy > radius_sq[s]:
                        continue
                    q = conic[s, 0] * dx * dx + 2.0 * conic[s, 1] * dx * dy \
                        + conic[s, 2] * dy * dy
                    if q < 0.0:
                        q = 0.0
                    alpha = opacity[s] * np.exp(-0.5 * q)
                    if alpha > ALPHA_MAX:
                        alpha = ALPHA_MAX
                    w = t * alpha
                    acc_r += w * color[s, 0]
                    acc_g += w * color[s, 1]
                    acc_b += w * color[s, 2]
                    for j in range(d):
                        facc[j] += w * feat[s, j]
                    count += 1
                    if w > best_w:
                        best_w = w
                        best = s
                    t *= 1.0 - alpha
                out_color[py, px, 0] = acc_r + t * background[0]
                out_color[py, px, 1] = acc_g + t * background[1]
                out_color[py, px, 2] = acc_b + t * background[2]
                for j in range(d):
                    out_feat[py, px, j] = facc[j]
                out_final_t[py, px] = t
                out_max_contrib[py, px] = best
                out_count[py, px] = count


@njit(cache=True)
def backward_kernel(offsets, order, mean2d, conic, opacity, color, feat,
                    radius_sq, background, height, width, n_tiles_x,
                    grad_color_in, grad_feat_in,
                    g_mean2d, g_conic, g_opacity, g_color, g_feat):
    """Accumulate per-splat gradients for the loss implied by the two
    upstream per-pixel gradient maps. Splat-level quantities are recomputed
    from the same inputs as the forward pass, so the walk is identical."""
    d = feat.shape[1]
    n_tiles = offsets.shape[0] - 1
    suffix_f = np.zeros(d, dtype=np.float64)
    for tile in range(n_tiles):
        ty = tile // n_tiles_x
        tx = tile % n_tiles_x
        y_end = min((ty + 1) * TILE, height)
        x_end = min((tx + 1) * TILE, width)
        start = offsets[tile]
        stop = offsets[tile + 1]
        cap = stop - start
        if cap == 0:
            continue
        sbuf = np.empty(cap, dtype=np.int64)
        tbuf = np.empty(cap, dtype=np.float64)
        abuf = np.empty(cap, dtype=np.float64)
        gbuf = np.empty(cap, dtype=np.float64)
        for py in range(ty * TILE, y_end):
            cy = py + 0.5
            for px in range(tx * TILE, x_end):
                cx = px + 0.5
                dl_r = grad_color_in[py, px, 0]
                dl_g = grad_color_in[py, px, 1]
                dl_b = grad_color_in[py, px, 2]
                any_feat_grad = False
                for j in range(d):
                    if grad_feat_in[py, px, j] != 0.0:
                        any_feat_grad = True
                        break
                if dl_r == 0.0 and dl_g == 0.0 and dl_b == 0.0 and not any_feat_grad:
                    continue
                # replay the forward walk, recording blended splats
                t = 1.0
                count = 0
                for n in range(start, stop):
                    if t < T_EPS:
                        break
                    s = order[n]
                    dx = cx - mean2d[s, 0]
                    dy = cy - mean2d[s, 1]
                    if dx * dx + dy * dy > radius_sq[s]:
                        continue
                    q = conic[s, 0] * dx * dx + 2.0 * conic[s, 1] * dx * dy \
                        + conic[s, 2] * dy * dy
                    if q < 0.0:
                        q = 0.0
                    g = np.exp(-0.5 * q)
                    alpha = opacity[s] * g
                    if alpha > ALPHA_MAX:
                        alpha = ALPHA_MAX
                    sbuf[count] = s
                    tbuf[count] = t
                    abuf[count] = alpha
                    gbuf[count] = g
                    count += 1
                    t *= 1.0 - alpha
                final_t = t
                # back-to-front sweep with suffix sums of blended radiance
                suf_r = 0.0
                suf_g = 0.0
                suf_b = 0.0
                for j in range(d):
                    suffix_f[j] = 0.0
                for m in range(count - 1, -1, -1):
                    s = sbuf[m]
                    tm = tbuf[m]
                    alpha = abuf[m]
                    g = gbuf[m]
                    w = tm * alpha
                    one_m = 1.0 - alpha
                    # color / feature gradients are linear in the weight
                    g_color[s, 0] += dl_r * w
                    g_color[s, 1] += dl_g * w
                    g_color[s, 2] += dl_b * w
                    for j in range(d):
                        g_feat[s, j] += grad_feat_in[py, px, j] * w
                    # d(pixel)/d(alpha): own term minus everything behind
                    dl_da = dl_r * (tm * color[s, 0] - (suf_r + final_t * background[0]) / one_m)
                    dl_da += dl_g * (tm * color[s, 1] - (suf_g + final_t * background[1]) / one_m)
                    dl_da += dl_b * (tm * color[s, 2] - (suf_b + final_t * background[2]) / one_m)
                    for j in range(d):
                        dl_da += grad_feat_in[py, px, j] * (tm * feat[s, j] - suffix_f[j] / one_m)
                    if alpha < ALPHA_MAX:
                        g_opacity[s] += dl_da * g
                        dl_dq = -0.5 * g * opacity[s] * dl_da
                        dx = cx - mean2d[s, 0]
                        dy = cy - mean2d[s, 1]
                        g_conic[s, 0] += dl_dq * dx * dx
                        g_conic[s, 1] += dl_dq * 2.0 * dx * dy
                        g_conic[s, 2] += dl_dq * dy * dy
                        g_mean2d[s, 0] -= dl_dq * 2.0 * (conic[s, 0] * dx + conic[s, 1] * dy)
                        g_mean2d[s, 1] -= dl_dq * 2.0 * (conic[s, 1] * dx + conic[s, 2] * dy)
                    suf_r += w * color[s, 0]
                    suf_g += w * color[s, 1]
                    suf_b += w * color[s, 2]
                    for j in range(d):
                        suffix_f[j] += w * feat[s, j]
