"""Numba kernels for the CPU rasterizer and the SSIM window machinery.

All kernels use strict IEEE float64 arithmetic (no fastmath).  Blending at
a pixel walks the gaussians front to back:

    power  = -0.5 * d^T Sigma2d^-1 d         (conic form)
    w      = min(alpha * exp(power), 0.99)
    skip the gaussian at this pixel when w < 1/255
    freeze the pixel when blending would drop T below T_min
    color += c * w * T;  T *= (1 - w)

The tiled kernels parallelize over tiles: every pixel is written by
exactly one tile, and backward gradients go to per-(tile, gaussian)
buffer slots that a sequential pass merges in fixed tile order, so
results are bit-identical for any thread count.  The naive kernel is the
direct per-pixel transcription of the same blending rules, kept as an
oracle; it matches the tiled path bit for bit because a gaussian outside
its bounding box is guaranteed to fail the skip test anyway.
"""

import numpy as np
from numba import njit, prange


@njit(cache=True)
def build_tile_lists(tx0, tx1, ty0, ty1, tiles_x, n_tiles):
    """CSR (offsets, positions) of gaussians per tile, preserving order."""
    nb = tx0.shape[0]
    counts = np.zeros(n_tiles, dtype=np.int64)
    for g in range(nb):
        for ty in range(ty0[g], ty1[g] + 1):
            base = ty * tiles_x
            for tx in range(tx0[g], tx1[g] + 1):
                counts[base + tx] += 1
    offsets = np.zeros(n_tiles + 1, dtype=np.int64)
    for t in range(n_tiles):
        offsets[t + 1] = offsets[t] + counts[t]
    positions = np.empty(offsets[n_tiles], dtype=np.int64)
    cursor = offsets[:-1].copy()
    for g in range(nb):
        for ty in range(ty0[g], ty1[g] + 1):
            base = ty * tiles_x
            for tx in range(tx0[g], tx1[g] + 1):
                positions[cursor[base + tx]] = g
                cursor[base + tx] += 1
    return offsets, positions


@njit(cache=True, parallel=True)
def forward_tiles(tile_offsets, tile_order, tiles_x, tile_size, width, height,
                  gmu, gconic, galpha, gcolor, glp, gbbox, bg, skip, clamp_w,
                  t_min, out_color, out_t, out_count, out_last, record_last):
    """Tiled forward blend.  All g* inputs are pre-gathered per CSR entry,
    so each tile reads a contiguous slice and the kernel never allocates.
    ``tile_order`` spreads heavy image regions across workers; ownership
    is per pixel, so the visit order cannot change the output."""
    n_tiles = tile_order.shape[0]
    for ti in prange(n_tiles):
        t = tile_order[ti]
        ty = t // tiles_x
        tx = t - ty * tiles_x
        px0 = tx * tile_size
        py0 = ty * tile_size
        px1 = min(px0 + tile_size, width)
        py1 = min(py0 + tile_size, height)
        lo = tile_offsets[t]
        hi = tile_offsets[t + 1]
        for py in range(py0, py1):
            for px in range(px0, px1):
                trans = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                cnt = 0
                last = np.int64(-1)
                for k in range(lo, hi):
                    if px < gbbox[k, 0] or px >= gbbox[k, 1] \
                            or py < gbbox[k, 2] or py >= gbbox[k, 3]:
                        continue
                    dx = px - gmu[k, 0]
                    dy = py - gmu[k, 1]
                    power = (-0.5 * (gconic[k, 0] * dx * dx + gconic[k, 2] * dy * dy)
                             - gconic[k, 1] * dx * dy)
                    if power < glp[k]:
                        continue
                    w = galpha[k] * np.exp(power)
                    if w > clamp_w:
                        w = clamp_w
                    if w < skip:
                        continue
                    test_t = trans * (1.0 - w)
                    if test_t < t_min:
                        break
                    c0 += gcolor[k, 0] * w * trans
                    c1 += gcolor[k, 1] * w * trans
                    c2 += gcolor[k, 2] * w * trans
                    trans = test_t
                    cnt += 1
                    last = k
                out_color[py, px, 0] = c0 + bg[0] * trans
                out_color[py, px, 1] = c1 + bg[1] * trans
                out_color[py, px, 2] = c2 + bg[2] * trans
                out_t[py, px] = trans
                out_count[py, px] = cnt
                if record_last:
                    out_last[py, px] = last


@njit(cache=True)
def forward_naive(width, height, mu, conic, alpha, color, lp, bg,
                  skip, clamp_w, t_min, out_color, out_t, out_count):
    n = mu.shape[0]
    for py in range(height):
        for px in range(width):
            trans = 1.0
            c0 = 0.0
            c1 = 0.0
            c2 = 0.0
            cnt = 0
            frozen = False
            for g in range(n):
                if frozen:
                    continue
                dx = px - mu[g, 0]
                dy = py - mu[g, 1]
                power = (-0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy)
                         - conic[g, 1] * dx * dy)
                if power < lp[g]:
                    continue
                w = alpha[g] * np.exp(power)
                if w > clamp_w:
                    w = clamp_w
                if w < skip:
                    continue
                test_t = trans * (1.0 - w)
                if test_t < t_min:
                    frozen = True
                    continue
                c0 += color[g, 0] * w * trans
                c1 += color[g, 1] * w * trans
                c2 += color[g, 2] * w * trans
                trans = test_t
                cnt += 1
            out_color[py, px, 0] = c0 + bg[0] * trans
            out_color[py, px, 1] = c1 + bg[1] * trans
            out_color[py, px, 2] = c2 + bg[2] * trans
            out_t[py, px] = trans
            out_count[py, px] = cnt


@njit(cache=True, parallel=True)
def backward_tiles(tile_offsets, tile_order, tiles_x, tile_size, width, height,
                   gmu, gconic, galpha, gcolor, glp, bg, skip, clamp_w,
                   v, final_t, last_idx, buf, buf_contrib):
    """Reverse-order blending backward into per-(tile, gaussian) buffers.

    Walks each pixel back to front from its last blended gaussian,
    reconstructing the pre-blend transmittance by division (w is capped at
    0.99, so 1 - w >= 0.01) and the suffix color sum incrementally.
    Clamped weights pass no gradient to alpha or the gaussian value.
    ``buf`` rows are (color x3, alpha, mu x2, conic x3) per CSR entry, so
    tiles never write to shared rows.
    """
    n_tiles = tile_order.shape[0]
    for ti in prange(n_tiles):
        t = tile_order[ti]
        ty = t // tiles_x
        tx = t - ty * tiles_x
        px0 = tx * tile_size
        py0 = ty * tile_size
        px1 = min(px0 + tile_size, width)
        py1 = min(py0 + tile_size, height)
        lo = tile_offsets[t]
        for py in range(py0, py1):
            for px in range(px0, px1):
                last = last_idx[py, px]
                if last < 0:
                    continue
                v0 = v[py, px, 0]
                v1 = v[py, px, 1]
                v2 = v[py, px, 2]
                t_behind = final_t[py, px]
                s0 = bg[0] * t_behind
                s1 = bg[1] * t_behind
                s2 = bg[2] * t_behind
                for k in range(last, lo - 1, -1):
                    dx = px - gmu[k, 0]
                    dy = py - gmu[k, 1]
                    power = (-0.5 * (gconic[k, 0] * dx * dx + gconic[k, 2] * dy * dy)
                             - gconic[k, 1] * dx * dy)
                    if power < glp[k]:
                        continue
                    gval = np.exp(power)
                    w = galpha[k] * gval
                    clamped = w > clamp_w
                    if clamped:
                        w = clamp_w
                    if w < skip:
                        continue
                    one_minus = 1.0 - w
                    t_i = t_behind / one_minus
                    wt = w * t_i
                    buf[k, 0] += v0 * wt
                    buf[k, 1] += v1 * wt
                    buf[k, 2] += v2 * wt
                    if not clamped:
                        dldw = (t_i * (v0 * gcolor[k, 0] + v1 * gcolor[k, 1]
                                       + v2 * gcolor[k, 2])
                                - (v0 * s0 + v1 * s1 + v2 * s2) / one_minus)
                        buf[k, 3] += gval * dldw
                        dldpower = galpha[k] * gval * dldw
                        buf[k, 4] += dldpower * (gconic[k, 0] * dx + gconic[k, 1] * dy)
                        buf[k, 5] += dldpower * (gconic[k, 2] * dy + gconic[k, 1] * dx)
                        buf[k, 6] += -0.5 * dx * dx * dldpower
                        buf[k, 7] += -dx * dy * dldpower
                        buf[k, 8] += -0.5 * dy * dy * dldpower
                    buf_contrib[k] += 1
                    s0 += gcolor[k, 0] * wt
                    s1 += gcolor[k, 1] * wt
                    s2 += gcolor[k, 2] * wt
                    t_behind = t_i


@njit(cache=True)
def merge_grad_buffers(tile_indices, buf, buf_contrib,
                       g_color, g_alpha, g_mu, g_conic, n_contrib):
    """Fold per-(tile, gaussian) buffers into per-gaussian gradients.

    Sequential, in CSR order, so the result does not depend on how tiles
    were scheduled across threads.
    """
    for row in range(tile_indices.shape[0]):
        g = tile_indices[row]
        g_color[g, 0] += buf[row, 0]
        g_color[g, 1] += buf[row, 1]
        g_color[g, 2] += buf[row, 2]
        g_alpha[g] += buf[row, 3]
        g_mu[g, 0] += buf[row, 4]
        g_mu[g, 1] += buf[row, 5]
        g_conic[g, 0] += buf[row, 6]
        g_conic[g, 1] += buf[row, 7]
        g_conic[g, 2] += buf[row, 8]
        n_contrib[g] += buf_contrib[row]


@njit(cache=True, parallel=True)
def sep_corr_valid(planes, kernel, out):
    """Separable valid-mode correlation of a (P, H, W) stack.

    ``out`` is (P, H - len(kernel) + 1, W - len(kernel) + 1).  Inner loops
    run over the contiguous axis so they vectorize.
    """
    p, h, w = planes.shape
    kn = kernel.shape[0]
    hv = h - kn + 1
    wv = w - kn + 1
    for pi in prange(p):
        tmp = np.empty((hv, w))
        for i in range(hv):
            for j in range(w):
                tmp[i, j] = kernel[0] * planes[pi, i, j]
            for t in range(1, kn):
                kt = kernel[t]
                for j in range(w):
                    tmp[i, j] += kt * planes[pi, i + t, j]
        for i in range(hv):
            for j in range(wv):
                out[pi, i, j] = kernel[0] * tmp[i, j]
            for t in range(1, kn):
                kt = kernel[t]
                for j in range(wv):
                    out[pi, i, j] += kt * tmp[i, j + t]


@njit(cache=True, parallel=True)
def sep_corr_adjoint(grads, kernel, out):
    """Adjoint of :func:`sep_corr_valid`: scatter window gradients back.

    ``grads`` is (P, hv, wv); ``out`` (P, H, W) is overwritten.
    """
    p, hv, wv = grads.shape
    kn = kernel.shape[0]
    h = hv + kn - 1
    w = wv + kn - 1
    for pi in prange(p):
        tmp = np.empty((hv, w))
        for i in range(h):
            for j in range(w):
                out[pi, i, j] = 0.0
        for i in range(hv):
            for j in range(w):
                tmp[i, j] = 0.0
            for t in range(kn):
                kt = kernel[t]
                for j in range(wv):
                    tmp[i, j + t] += kt * grads[pi, i, j]
        for i in range(hv):
            for t in range(kn):
                kt = kernel[t]
                for j in range(w):
                    out[pi, i + t, j] += kt * tmp[i, j]


@njit(cache=True)
def ssim_pack_planes(x, y, planes):
    """Fill (x, y, x^2, y^2, xy) planes per channel from (H, W, C) images."""
    h, w, nc = x.shape
    for c in range(nc):
        for i in range(h):
            for j in range(w):
                xv = x[i, j, c]
                yv = y[i, j, c]
                planes[5 * c, i, j] = xv
                planes[5 * c + 1, i, j] = yv
                planes[5 * c + 2, i, j] = xv * xv
                planes[5 * c + 3, i, j] = yv * yv
                planes[5 * c + 4, i, j] = xv * yv


@njit(cache=True)
def ssim_grad_assemble(x, y, adj, grad):
    """dL/dx from the three back-scattered partial maps per channel."""
    h, w, nc = x.shape
    for c in range(nc):
        for i in range(h):
            for j in range(w):
                grad[i, j, c] = (adj[3 * c, i, j]
                                 + 2.0 * x[i, j, c] * adj[3 * c + 1, i, j]
                                 + y[i, j, c] * adj[3 * c + 2, i, j])


@njit(cache=True)
def ssim_terms_from_stats(stats, c1, c2, weight, s_out, g_out):
    """Per-window SSIM value and partials from the five window moments.

    ``stats`` is (C, 5, hv, wv) holding (mu_x, mu_y, mu_xx, mu_yy, mu_xy);
    ``s_out`` collects SSIM values, ``g_out`` (C, 3, hv, wv) the weighted
    partials with respect to (mu_x, corr(x^2), corr(x*y)).
    """
    c, _, hv, wv = stats.shape
    total = 0.0
    for ci in range(c):
        for i in range(hv):
            for j in range(wv):
                mu_x = stats[ci, 0, i, j]
                mu_y = stats[ci, 1, i, j]
                var_x = stats[ci, 2, i, j] - mu_x * mu_x
                var_y = stats[ci, 3, i, j] - mu_y * mu_y
                cov = stats[ci, 4, i, j] - mu_x * mu_y
                n1 = 2.0 * mu_x * mu_y + c1
                n2 = 2.0 * cov + c2
                d1 = mu_x * mu_x + mu_y * mu_y + c1
                d2 = var_x + var_y + c2
                inv_dd = 1.0 / (d1 * d2)
                s = n1 * n2 * inv_dd
                s_out[ci, i, j] = s
                total += s
                g_out[ci, 0, i, j] = weight * (2.0 * mu_y * (n2 - n1) * inv_dd
                                               + 2.0 * s * mu_x * (1.0 / d2 - 1.0 / d1))
                g_out[ci, 1, i, j] = weight * (-s / d2)
                g_out[ci, 2, i, j] = weight * (2.0 * n1 * inv_dd)
    return total / (c * hv * wv)
