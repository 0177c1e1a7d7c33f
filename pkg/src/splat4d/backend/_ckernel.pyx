# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled tile compositing kernel. Contract identical to pykernel.py.

Loops pixels outer / splats inner per tile, walking each pixel's splat list
front to back (forward) or back to front (backward, recomputing alphas).
Entries whose Mahalanobis term already guarantees alpha < alpha_min are
skipped before the exp; the 1e-9 cushion on the log-space threshold keeps
the composited set identical to the plain test under IEEE rounding.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()

DEF MAX_PAYLOAD = 64


def _sigma_skip(opac, double alpha_min):
    """Per-splat sigma beyond which opac*exp(-sigma) < alpha_min is certain."""
    o = np.asarray(opac)
    if alpha_min <= 0.0:
        return np.full(o.shape[0], np.inf)
    return np.log(np.maximum(o, 1e-300) / alpha_min) + 1e-9


def composite_tiles(int h, int w, int tile,
                    double[:, ::1] means2d, double[:, ::1] conics,
                    double[::1] opac, double[:, ::1] payload,
                    long long[::1] order, long long[::1] tile_starts,
                    double[::1] bg,
                    double alpha_min, double alpha_max, double t_min):
    cdef int p_dim = payload.shape[1]
    if p_dim > MAX_PAYLOAD:
        raise ValueError("payload dimension exceeds kernel limit")
    cdef int ntx = (w + tile - 1) // tile
    cdef int nty = (h + tile - 1) // tile

    out_arr = np.empty((h, w, p_dim), dtype=np.float64)
    accum_arr = np.zeros((h, w), dtype=np.float64)
    tfin_arr = np.ones((h, w), dtype=np.float64)
    lp_arr = np.full((h, w), -1, dtype=np.int64)
    cdef double[:, :, ::1] out = out_arr
    cdef double[:, ::1] accum = accum_arr
    cdef double[:, ::1] tfin = tfin_arr
    cdef long long[:, ::1] lastp = lp_arr

    cdef int ty, tx, y0, x0, y1, x1, yy, xx, ch
    cdef long long ti, start, end, pos, i, lp
    cdef double px, py, dx, dy, a, b, c, sigma, alpha, t_run, wgt
    cdef double acc[MAX_PAYLOAD]
    cdef double[::1] sig_skip = _sigma_skip(opac, alpha_min)

    for ty in range(nty):
        for tx in range(ntx):
            ti = ty * ntx + tx
            start = tile_starts[ti]
            end = tile_starts[ti + 1]
            y0 = ty * tile
            x0 = tx * tile
            y1 = min(y0 + tile, h)
            x1 = min(x0 + tile, w)
            for yy in range(y0, y1):
                py = yy + 0.5
                for xx in range(x0, x1):
                    px = xx + 0.5
                    t_run = 1.0
                    lp = -1
                    for ch in range(p_dim):
                        acc[ch] = 0.0
                    for pos in range(start, end):
                        i = order[pos]
                        dx = px - means2d[i, 0]
                        dy = py - means2d[i, 1]
                        a = conics[i, 0]
                        b = conics[i, 1]
                        c = conics[i, 2]
                        sigma = 0.5 * (a * dx * dx + c * dy * dy) + b * dx * dy
                        if sigma > sig_skip[i]:
                            continue
                        alpha = opac[i] * exp(-sigma)
                        if alpha > alpha_max:
                            alpha = alpha_max
                        if alpha < alpha_min:
                            continue
                        wgt = alpha * t_run
                        for ch in range(p_dim):
                            acc[ch] += wgt * payload[i, ch]
                        accum[yy, xx] += wgt
                        t_run = t_run * (1.0 - alpha)
                        lp = pos
                        if t_run < t_min:
                            break
                    for ch in range(p_dim):
                        out[yy, xx, ch] = acc[ch] + t_run * bg[ch]
                    tfin[yy, xx] = t_run
                    lastp[yy, xx] = lp
    return out_arr, accum_arr, tfin_arr, lp_arr


def composite_tiles_backward(int h, int w, int tile,
                             double[:, ::1] means2d, double[:, ::1] conics,
                             double[::1] opac, double[:, ::1] payload,
                             long long[::1] order, long long[::1] tile_starts,
                             double[::1] bg,
                             double alpha_min, double alpha_max, double t_min,
                             double[:, ::1] t_final, long long[:, ::1] last_pos,
                             double[:, :, ::1] d_out, double[:, ::1] d_accum,
                             long long frozen=0):
    cdef int m_count = means2d.shape[0]
    cdef int p_dim = payload.shape[1]
    if p_dim > MAX_PAYLOAD:
        raise ValueError("payload dimension exceeds kernel limit")
    cdef int ntx = (w + tile - 1) // tile
    cdef int nty = (h + tile - 1) // tile

    dm_arr = np.zeros((m_count, 2), dtype=np.float64)
    dc_arr = np.zeros((m_count, 3), dtype=np.float64)
    do_arr = np.zeros(m_count, dtype=np.float64)
    dp_arr = np.zeros((m_count, p_dim), dtype=np.float64)
    cdef double[:, ::1] d_means2d = dm_arr
    cdef double[:, ::1] d_conics = dc_arr
    cdef double[::1] d_opac = do_arr
    cdef double[:, ::1] d_payload = dp_arr

    cdef int ty, tx, y0, x0, y1, x1, yy, xx, ch
    cdef long long ti, start, pos, i, lp
    cdef double px, py, dx, dy, a, b, c, sigma, g, raw, alpha, one_m
    cdef double t_after, t_before, wgt, g_bg, d_alpha, d_g, d_sigma, tf
    cdef double s_payload[MAX_PAYLOAD]
    cdef double s_w
    cdef double[::1] sig_skip = _sigma_skip(opac, alpha_min)

    for ty in range(nty):
        for tx in range(ntx):
            ti = ty * ntx + tx
            start = tile_starts[ti]
            y0 = ty * tile
            x0 = tx * tile
            y1 = min(y0 + tile, h)
            x1 = min(x0 + tile, w)
            for yy in range(y0, y1):
                py = yy + 0.5
                for xx in range(x0, x1):
                    lp = last_pos[yy, xx]
                    if lp < 0:
                        continue
                    px = xx + 0.5
                    tf = t_final[yy, xx]
                    t_after = tf
                    s_w = 0.0
                    for ch in range(p_dim):
                        s_payload[ch] = 0.0
                    g_bg = 0.0
                    for ch in range(p_dim):
                        g_bg += d_out[yy, xx, ch] * bg[ch]
                    for pos in range(lp, start - 1, -1):
                        i = order[pos]
                        dx = px - means2d[i, 0]
                        dy = py - means2d[i, 1]
                        a = conics[i, 0]
                        b = conics[i, 1]
                        c = conics[i, 2]
                        sigma = 0.5 * (a * dx * dx + c * dy * dy) + b * dx * dy
                        if sigma > sig_skip[i]:
                            continue
                        g = exp(-sigma)
                        raw = opac[i] * g
                        alpha = raw
                        if alpha > alpha_max:
                            alpha = alpha_max
                        if alpha < alpha_min:
                            continue
                        one_m = 1.0 - alpha
                        t_before = t_after / one_m
                        wgt = alpha * t_before
                        if i >= frozen:
                            d_alpha = 0.0
                            for ch in range(p_dim):
                                d_payload[i, ch] += wgt * d_out[yy, xx, ch]
                                d_alpha += d_out[yy, xx, ch] * (
                                    t_before * payload[i, ch] - s_payload[ch] / one_m)
                            d_alpha += d_accum[yy, xx] * (t_before - s_w / one_m)
                            d_alpha -= g_bg * tf / one_m
                            if raw <= alpha_max:
                                d_opac[i] += d_alpha * g
                                d_g = d_alpha * opac[i]
                                d_sigma = -d_g * g
                                d_conics[i, 0] += d_sigma * 0.5 * dx * dx
                                d_conics[i, 1] += d_sigma * dx * dy
                                d_conics[i, 2] += d_sigma * 0.5 * dy * dy
                                d_means2d[i, 0] -= d_sigma * (a * dx + b * dy)
                                d_means2d[i, 1] -= d_sigma * (b * dx + c * dy)
                        for ch in range(p_dim):
                            s_payload[ch] += wgt * payload[i, ch]
                        s_w += wgt
                        t_after = t_before
    return dm_arr, dc_arr, do_arr, dp_arr
