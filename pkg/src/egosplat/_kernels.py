"""Numba per-pixel kernels for the Gaussian rasterizer.

All loops are serial so reductions happen in a fixed order and results are
bit-reproducible.
"""

import numba as nb
import numpy as np

ALPHA_MAX = 0.99


@nb.njit(cache=True)
def bin_tiles(order, bbox, tile, tiles_x, tiles_y):
    """Per-tile Gaussian lists, each list ordered like ``order`` (front to back)."""
    n_tiles = tiles_x * tiles_y
    counts = np.zeros(n_tiles + 1, dtype=np.int64)
    for k in range(order.shape[0]):
        g = order[k]
        tx0 = bbox[g, 0] // tile
        tx1 = bbox[g, 1] // tile
        ty0 = bbox[g, 2] // tile
        ty1 = bbox[g, 3] // tile
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                counts[ty * tiles_x + tx + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    entries = np.empty(offsets[-1], dtype=np.int64)
    for k in range(order.shape[0]):
        g = order[k]
        tx0 = bbox[g, 0] // tile
        tx1 = bbox[g, 1] // tile
        ty0 = bbox[g, 2] // tile
        ty1 = bbox[g, 3] // tile
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                t = ty * tiles_x + tx
                entries[fill[t]] = g
                fill[t] += 1
    return offsets, entries


@nb.njit(cache=True)
def forward(offsets, entries, tile, tiles_x, width, height, mask, use_mask,
            mean2d, conic, opac, color, depth, bbox, bg, min_t):
    out = np.empty((height, width, 3))
    t_final = np.ones((height, width))
    n_contrib = np.zeros((height, width), dtype=np.int64)
    out_depth = np.zeros((height, width))
    for py in range(height):
        ty = py // tile
        for px in range(width):
            if use_mask and not mask[py, px]:
                out[py, px, 0] = bg[0]
                out[py, px, 1] = bg[1]
                out[py, px, 2] = bg[2]
                continue
            t = ty * tiles_x + px // tile
            T = 1.0
            c0 = 0.0
            c1 = 0.0
            c2 = 0.0
            d = 0.0
            last = 0
            for k in range(offsets[t], offsets[t + 1]):
                g = entries[k]
                if px < bbox[g, 0] or px > bbox[g, 1] or py < bbox[g, 2] or py > bbox[g, 3]:
                    continue
                dx = px - mean2d[g, 0]
                dy = py - mean2d[g, 1]
                power = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) - conic[g, 1] * dx * dy
                alpha = opac[g] * np.exp(power)
                if alpha > ALPHA_MAX:
                    alpha = ALPHA_MAX
                test_t = T * (1.0 - alpha)
                if test_t < min_t:
                    break
                w = alpha * T
                c0 += color[g, 0] * w
                c1 += color[g, 1] * w
                c2 += color[g, 2] * w
                d += depth[g] * w
                T = test_t
                last = k - offsets[t] + 1
            out[py, px, 0] = c0 + T * bg[0]
            out[py, px, 1] = c1 + T * bg[1]
            out[py, px, 2] = c2 + T * bg[2]
            out_depth[py, px] = d
            t_final[py, px] = T
            n_contrib[py, px] = last
    return out, t_final, n_contrib, out_depth


@nb.njit(cache=True)
def backward(offsets, entries, tile, tiles_x, width, height, mask, use_mask,
             mean2d, conic, opac, color, bbox, bg, t_final, n_contrib, grad_out, n_gauss):
    g_mean2d = np.zeros((n_gauss, 2))
    g_conic = np.zeros((n_gauss, 3))
    g_opac = np.zeros(n_gauss)
    g_color = np.zeros((n_gauss, 3))
    for py in range(height):
        ty = py // tile
        for px in range(width):
            if use_mask and not mask[py, px]:
                continue
            d0 = grad_out[py, px, 0]
            d1 = grad_out[py, px, 1]
            d2 = grad_out[py, px, 2]
            if d0 == 0.0 and d1 == 0.0 and d2 == 0.0:
                continue
            t = ty * tiles_x + px // tile
            T = t_final[py, px]
            # color seen behind the current Gaussian, normalized by its transmittance
            b0 = bg[0]
            b1 = bg[1]
            b2 = bg[2]
            start = offsets[t]
            for k in range(start + n_contrib[py, px] - 1, start - 1, -1):
                g = entries[k]
                if px < bbox[g, 0] or px > bbox[g, 1] or py < bbox[g, 2] or py > bbox[g, 3]:
                    continue
                dx = px - mean2d[g, 0]
                dy = py - mean2d[g, 1]
                power = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) - conic[g, 1] * dx * dy
                gauss = np.exp(power)
                raw = opac[g] * gauss
                alpha = raw
                clamped = False
                if alpha > ALPHA_MAX:
                    alpha = ALPHA_MAX
                    clamped = True
                T = T / (1.0 - alpha)
                w = alpha * T
                g_color[g, 0] += d0 * w
                g_color[g, 1] += d1 * w
                g_color[g, 2] += d2 * w
                ca = color[g, 0]
                cb = color[g, 1]
                cc = color[g, 2]
                dl_dalpha = T * ((ca - b0) * d0 + (cb - b1) * d1 + (cc - b2) * d2)
                b0 = ca * alpha + (1.0 - alpha) * b0
                b1 = cb * alpha + (1.0 - alpha) * b1
                b2 = cc * alpha + (1.0 - alpha) * b2
                if clamped:
                    continue
                g_opac[g] += dl_dalpha * gauss
                dl_dpower = dl_dalpha * alpha
                g_mean2d[g, 0] += dl_dpower * (conic[g, 0] * dx + conic[g, 1] * dy)
                g_mean2d[g, 1] += dl_dpower * (conic[g, 1] * dx + conic[g, 2] * dy)
                g_conic[g, 0] += dl_dpower * (-0.5 * dx * dx)
                g_conic[g, 1] += dl_dpower * (-dx * dy)
                g_conic[g, 2] += dl_dpower * (-0.5 * dy * dy)
    return g_mean2d, g_conic, g_opac, g_color


@nb.njit(cache=True)
def blur2d(img, win):
    """Zero-padded separable correlation of an ``(H, W, C)`` array over its first two axes."""
    h, w, c = img.shape
    r = win.shape[0] // 2
    src = img.reshape(h, w * c)
    tmp = np.zeros((h, w * c))
    for y in range(h):
        for k in range(win.shape[0]):
            yy = y + k - r
            if yy < 0 or yy >= h:
                continue
            wk = win[k]
            for j in range(w * c):
                tmp[y, j] += wk * src[yy, j]
    out = np.zeros((h, w * c))
    for y in range(h):
        for k in range(win.shape[0]):
            shift = (k - r) * c
            lo = max(0, -shift)
            hi = min(w * c, w * c - shift)
            wk = win[k]
            for j in range(lo, hi):
                out[y, j] += wk * tmp[y, j + shift]
    return out.reshape(h, w, c)


@nb.njit(cache=True)
def ssim_terms(mx, my, exx, eyy, exy, mask, c1, c2, inv_count, want_grad):
    """Masked SSIM-map sum and, optionally, the per-pixel seeds of its gradient.

    Seeds are ``d/d(mx, exx, exy)`` of the masked mean, already scaled by
    ``inv_count``; they still need the adjoint blur.
    """
    h, w, c = mx.shape
    total = 0.0
    seeds = np.zeros((h, w, c, 3)) if want_grad else np.zeros((0, 0, 0, 3))
    for i in range(h):
        for j in range(w):
            if not mask[i, j]:
                continue
            for k in range(c):
                ux = mx[i, j, k]
                uy = my[i, j, k]
                a1 = 2.0 * ux * uy + c1
                a2 = 2.0 * (exy[i, j, k] - ux * uy) + c2
                b1 = ux * ux + uy * uy + c1
                b2 = (exx[i, j, k] - ux * ux) + (eyy[i, j, k] - uy * uy) + c2
                s = (a1 * a2) / (b1 * b2)
                total += s
                if want_grad:
                    sw = s * inv_count
                    seeds[i, j, k, 0] = sw * (2.0 * uy / a1 - 2.0 * uy / a2 - 2.0 * ux / b1 + 2.0 * ux / b2)
                    seeds[i, j, k, 1] = sw * (-1.0 / b2)
                    seeds[i, j, k, 2] = sw * (2.0 / a2)
    return total, seeds
