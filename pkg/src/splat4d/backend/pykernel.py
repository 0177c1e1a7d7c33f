"""Pure-numpy tile compositing kernel (reference / fallback implementation).

Both kernels share one contract. Splats arrive pre-projected: 2D means, conic
matrices (inverse 2D covariance, packed (a, b, c) for [[a, b], [b, c]]),
effective opacities and an arbitrary payload matrix. ``order`` holds splat
indices grouped per tile (row-major tiles), each group sorted front to back by
(depth, source index); ``tile_starts`` are prefix offsets into it.

Per pixel, front to back: alpha = min(alpha_max, opac * exp(-0.5 d^T C d)),
skipped below alpha_min; compositing stops once the running transmittance
drops below t_min (the splat that crosses the threshold still contributes).
Output gets bg * residual transmittance added on top.
"""

import numpy as np


def _tile_pixel_coords(h, w, tile, ty, tx):
    y0, x0 = ty * tile, tx * tile
    y1, x1 = min(y0 + tile, h), min(x0 + tile, w)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    return y0, x0, y1, x1, (xx + 0.5).ravel(), (yy + 0.5).ravel()


def composite_tiles(h, w, tile, means2d, conics, opac, payload, order,
                    tile_starts, bg, alpha_min, alpha_max, t_min):
    """Forward compositing. Returns (out, accum, t_final, last_pos).

    out: (h, w, P) composited payload incl. background term
    accum: (h, w) accumulated opacity (sum of composited weights)
    t_final: (h, w) residual transmittance
    last_pos: (h, w) int64 index into ``order`` of the last composited splat,
        -1 where nothing was composited.
    """
    p_dim = payload.shape[1]
    ntx = (w + tile - 1) // tile
    nty = (h + tile - 1) // tile
    out = np.empty((h, w, p_dim), dtype=np.float64)
    out[:] = bg  # tiles without splats keep the plain background
    accum = np.zeros((h, w), dtype=np.float64)
    t_final = np.ones((h, w), dtype=np.float64)
    last_pos = np.full((h, w), -1, dtype=np.int64)

    for ty in range(nty):
        for tx in range(ntx):
            ti = ty * ntx + tx
            start, end = tile_starts[ti], tile_starts[ti + 1]
            if end <= start:
                continue
            y0, x0, y1, x1, px, py = _tile_pixel_coords(h, w, tile, ty, tx)
            npix = px.size
            t_run = np.ones(npix, dtype=np.float64)
            o_run = np.zeros(npix, dtype=np.float64)
            c_run = np.zeros((npix, p_dim), dtype=np.float64)
            lp_run = np.full(npix, -1, dtype=np.int64)
            done = np.zeros(npix, dtype=bool)
            for pos in range(start, end):
                i = order[pos]
                dx = px - means2d[i, 0]
                dy = py - means2d[i, 1]
                a, b, c = conics[i]
                sigma = 0.5 * (a * dx * dx + c * dy * dy) + b * dx * dy
                alpha = np.minimum(alpha_max, opac[i] * np.exp(-sigma))
                m = (~done) & (alpha >= alpha_min)
                if not m.any():
                    continue
                wgt = np.where(m, alpha * t_run, 0.0)
                c_run += wgt[:, None] * payload[i]
                o_run += wgt
                t_run = np.where(m, t_run * (1.0 - alpha), t_run)
                lp_run[m] = pos
                done |= m & (t_run < t_min)
                if done.all():
                    break
            shape2 = (y1 - y0, x1 - x0)
            out[y0:y1, x0:x1] = (c_run + t_run[:, None] * bg).reshape(shape2 + (p_dim,))
            accum[y0:y1, x0:x1] = o_run.reshape(shape2)
            t_final[y0:y1, x0:x1] = t_run.reshape(shape2)
            last_pos[y0:y1, x0:x1] = lp_run.reshape(shape2)
    return out, accum, t_final, last_pos


def composite_tiles_backward(h, w, tile, means2d, conics, opac, payload, order,
                             tile_starts, bg, alpha_min, alpha_max, t_min,
                             t_final, last_pos, d_out, d_accum):
    """Adjoint of composite_tiles; recomputes alphas walking back to front.

    Returns (d_means2d, d_conics, d_opac, d_payload) with the conic gradient
    packed (da, db, dc) as total derivatives wrt the packed representation.
    """
    m_count, p_dim = payload.shape
    ntx = (w + tile - 1) // tile
    nty = (h + tile - 1) // tile
    d_means2d = np.zeros((m_count, 2), dtype=np.float64)
    d_conics = np.zeros((m_count, 3), dtype=np.float64)
    d_opac = np.zeros(m_count, dtype=np.float64)
    d_payload = np.zeros((m_count, p_dim), dtype=np.float64)

    for ty in range(nty):
        for tx in range(ntx):
            ti = ty * ntx + tx
            start, end = tile_starts[ti], tile_starts[ti + 1]
            if end <= start:
                continue
            y0, x0, y1, x1, px, py = _tile_pixel_coords(h, w, tile, ty, tx)
            g_out = d_out[y0:y1, x0:x1].reshape(-1, p_dim)
            g_acc = d_accum[y0:y1, x0:x1].ravel()
            tf = t_final[y0:y1, x0:x1].ravel()
            lp = last_pos[y0:y1, x0:x1].ravel()
            g_bg = g_out @ bg  # upstream pull on residual transmittance

            t_after = tf.copy()
            s_payload = np.zeros_like(g_out)
            s_w = np.zeros_like(g_acc)
            hi = int(lp.max())
            for pos in range(hi, start - 1, -1):
                i = order[pos]
                live = lp >= pos
                if not live.any():
                    continue
                dx = px - means2d[i, 0]
                dy = py - means2d[i, 1]
                a, b, c = conics[i]
                sigma = 0.5 * (a * dx * dx + c * dy * dy) + b * dx * dy
                g_gauss = np.exp(-sigma)
                raw = opac[i] * g_gauss
                alpha = np.minimum(alpha_max, raw)
                m = live & (alpha >= alpha_min)
                if not m.any():
                    continue
                one_m = 1.0 - alpha
                t_before = np.where(m, t_after / one_m, t_after)
                wgt = alpha * t_before

                d_pay_i = (wgt * m)[:, None] * g_out
                d_payload[i] += d_pay_i.sum(axis=0)

                d_alpha = (g_out * (t_before[:, None] * payload[i] - s_payload / one_m[:, None])).sum(axis=1)
                d_alpha += g_acc * (t_before - s_w / one_m)
                d_alpha -= g_bg * tf / one_m
                d_alpha = np.where(m, d_alpha, 0.0)

                unclamped = m & (raw <= alpha_max)
                d_raw = np.where(unclamped, d_alpha, 0.0)
                d_opac[i] += (d_raw * g_gauss).sum()
                d_g = d_raw * opac[i]
                d_sigma = -d_g * g_gauss
                d_conics[i, 0] += (d_sigma * 0.5 * dx * dx).sum()
                d_conics[i, 1] += (d_sigma * dx * dy).sum()
                d_conics[i, 2] += (d_sigma * 0.5 * dy * dy).sum()
                gx = d_sigma * (a * dx + b * dy)
                gy = d_sigma * (b * dx + c * dy)
                d_means2d[i, 0] += -gx.sum()
                d_means2d[i, 1] += -gy.sum()

                s_payload = np.where(m[:, None], s_payload + wgt[:, None] * payload[i], s_payload)
                s_w = np.where(m, s_w + wgt, s_w)
                t_after = t_before
    return d_means2d, d_conics, d_opac, d_payload
