"""Differentiable tile-based rasterizer for 4D Gaussian fields.

Forward: project every Gaussian at time t (vibrating position, life-faded
opacity, EWA covariance with a 0.3 px^2 low-pass), bin splats into 16x16
tiles sorted front-to-back by (view depth, source index), then composite
color, expected depth, identity embedding, speed and lifespan channels plus
accumulated opacity in one pass.

Backward: hand-written adjoint. The kernel returns gradients wrt each splat's
2D mean, conic, effective opacity and payload; the geometry chain here pushes
them through the projection (including the Jacobian's own dependence on the
camera-space point) down to all nine Gaussian parameter groups.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backend
from .scene import TWO_PI, Camera, Gaussian4D, GaussianField

TILE = 16
ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.99
T_MIN = 1e-4
LOWPASS = 0.3
NEAR = 0.05

DEFAULT_BACKGROUND = np.array([0.5, 0.5, 0.5])

# standard channel layout: rgb, depth, embedding, |v_inst|, beta
CH_COLOR = slice(0, 3)
CH_DEPTH = 3
CH_EMBED = slice(4, 12)
CH_VMAG = 12
CH_BETA = 13
N_CHANNELS = 14


@dataclass
class ProjectedSplat:
    """One Gaussian after projection into a camera at a fixed time."""

    mean2d: np.ndarray      # (2,)
    cov2d: np.ndarray       # (2, 2)
    conic: np.ndarray       # (3,) packed inverse covariance (a, b, c)
    radius: float           # 3-sigma screen radius
    depth: float            # camera-space z
    opacity: float          # life-faded opacity at t
    payload: np.ndarray     # standard channel payload


@dataclass
class RenderOutput:
    color: np.ndarray       # (H, W, 3)
    depth: np.ndarray       # (H, W) expected depth (not normalized by opacity)
    opacity: np.ndarray     # (H, W) accumulated alpha
    embedding: np.ndarray   # (H, W, 8)
    vmag: np.ndarray        # (H, W) composited instant speed magnitude
    beta: np.ndarray        # (H, W) composited lifespan


class RenderCache:
    """Everything the backward pass needs, for the splats that survived culling."""

    __slots__ = (
        "cam", "t", "idx", "n_total", "p_cam", "mean2d", "cov2d", "conic",
        "vis_m", "vis_v3", "rot", "sin_phase", "cos_phase", "life", "o_peak",
        "opac_eff", "vel_decay", "vnorm", "payload", "order", "tile_starts",
        "bg", "t_final", "last_pos", "field_view",
    )


def _project_arrays(field: GaussianField, cam: Camera, t: float, near=NEAR):
    """Vectorized projection; returns None if nothing survives culling."""
    n = len(field)
    if n == 0:
        return None
    l = field.cycle_length
    tau = field.tau
    phase = TWO_PI * (t - tau) / l
    sin_phase = np.sin(phase)
    cos_phase = np.cos(phase)
    p_world = field.mu + (l / TWO_PI) * sin_phase[:, None] * field.v

    p_cam = p_world @ cam.r_wc.T + cam.t_wc
    z = p_cam[:, 2]

    beta = field.beta
    dt = t - tau
    life = np.exp(-0.5 * dt * dt / (beta * beta))
    o_peak = field.o
    opac_eff = o_peak * life

    keep = (z > near) & (opac_eff >= ALPHA_MIN)
    idx = np.flatnonzero(keep)
    if idx.size == 0:
        return None

    p_cam = p_cam[idx]
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    mean2d = np.stack([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy], axis=1)

    rot = field.rotmats()[idx]
    s = field.s[idx]
    v3 = np.einsum("nij,nj,nkj->nik", rot, s * s, rot)

    m = idx.size
    jac = np.zeros((m, 2, 3), dtype=np.float64)
    jac[:, 0, 0] = cam.fx / z
    jac[:, 0, 2] = -cam.fx * x / (z * z)
    jac[:, 1, 1] = cam.fy / z
    jac[:, 1, 2] = -cam.fy * y / (z * z)
    mw = jac @ cam.r_wc  # (m, 2, 3)
    cov2d = np.einsum("nij,njk,nlk->nil", mw, v3, mw)
    cov2d[:, 0, 0] += LOWPASS
    cov2d[:, 1, 1] += LOWPASS

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = 3.0 * np.sqrt(lam_max)

    return {
        "idx": idx, "p_cam": p_cam, "mean2d": mean2d, "cov2d": cov2d,
        "conic": conic, "radius": radius, "depth": z,
        "opac_eff": opac_eff[idx], "o_peak": o_peak[idx], "life": life[idx],
        "sin_phase": sin_phase[idx], "cos_phase": cos_phase[idx],
        "rot": rot, "v3": v3, "m": mw,
    }


def _bin_splats(mean2d, radius, depth, h, w, tile=TILE):
    """Assign splats to tiles; per tile sort front-to-back by (depth, index)."""
    ntx = (w + tile - 1) // tile
    nty = (h + tile - 1) // tile
    n_tiles = ntx * nty
    m = mean2d.shape[0]
    if m == 0:
        return (np.zeros(0, dtype=np.int64),
                np.zeros(n_tiles + 1, dtype=np.int64))
    x0 = np.clip(np.floor((mean2d[:, 0] - radius) / tile).astype(np.int64), 0, ntx - 1)
    x1 = np.clip(np.floor((mean2d[:, 0] + radius) / tile).astype(np.int64), 0, ntx - 1)
    y0 = np.clip(np.floor((mean2d[:, 1] - radius) / tile).astype(np.int64), 0, nty - 1)
    y1 = np.clip(np.floor((mean2d[:, 1] + radius) / tile).astype(np.int64), 0, nty - 1)
    # drop splats entirely off-image
    on = ((mean2d[:, 0] + radius >= 0) & (mean2d[:, 0] - radius < w)
          & (mean2d[:, 1] + radius >= 0) & (mean2d[:, 1] - radius < h))

    counts = np.where(on, (x1 - x0 + 1) * (y1 - y0 + 1), 0)
    total = int(counts.sum())
    if total == 0:
        return (np.zeros(0, dtype=np.int64),
                np.zeros(n_tiles + 1, dtype=np.int64))
    splat_of_pair = np.repeat(np.arange(m, dtype=np.int64), counts)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    offs = np.arange(total, dtype=np.int64) - np.repeat(starts, counts)
    wspan = (x1 - x0 + 1)
    wpair = np.repeat(wspan, counts)
    dy = offs // wpair
    dx = offs - dy * wpair
    tiles = (np.repeat(y0, counts) + dy) * ntx + (np.repeat(x0, counts) + dx)

    ordv = np.lexsort((splat_of_pair, depth[splat_of_pair], tiles))
    tiles_sorted = tiles[ordv]
    order = splat_of_pair[ordv]
    tile_starts = np.zeros(n_tiles + 1, dtype=np.int64)
    np.cumsum(np.bincount(tiles_sorted, minlength=n_tiles), out=tile_starts[1:])
    return order, tile_starts


def visible_in_window(field, cam, t, left, right, top, bottom, slack=1.0,
                      near=NEAR):
    """Row indices of splats whose footprint can reach a pixel window.

    The window is inclusive, [left..right] x [top..bottom], in the camera's
    own pixel coordinates. Uses the same 3-sigma disk test as tile binning,
    widened by ``slack`` pixels so that re-projecting through a cropped
    camera (whose principal point differs by an integer shift) never loses a
    borderline splat to rounding. Splats culled by the near plane or the
    opacity floor are excluded; they cannot contribute to any pixel.
    """
    proj = _project_arrays(field, cam, t, near)
    if proj is None:
        return np.zeros(0, dtype=np.int64)
    m2 = proj["mean2d"]
    r = proj["radius"] + slack
    on = ((m2[:, 0] + r >= left) & (m2[:, 0] - r < right + 1)
          & (m2[:, 1] + r >= top) & (m2[:, 1] - r < bottom + 1))
    return proj["idx"][on]


def _standard_payload(field: GaussianField, proj):
    idx = proj["idx"]
    m = idx.size
    payload = np.zeros((m, N_CHANNELS), dtype=np.float64)
    payload[:, CH_COLOR] = field.c[idx]
    payload[:, CH_DEPTH] = proj["depth"]
    payload[:, CH_EMBED] = field.e[idx]
    vel_decay = np.exp(-field.beta[idx] / (2.0 * field.cycle_length))
    vnorm = np.linalg.norm(field.v[idx], axis=1)
    payload[:, CH_VMAG] = vnorm * vel_decay
    payload[:, CH_BETA] = field.beta[idx]
    return payload, vel_decay, vnorm


def render(field: GaussianField, cam: Camera, t=None, background=None,
           with_cache=False, near=NEAR):
    """Render all standard channels. Returns RenderOutput (+ cache if asked)."""
    if t is None:
        t = cam.t
    if background is None:
        background = DEFAULT_BACKGROUND
    h, w = cam.height, cam.width
    bg = np.zeros(N_CHANNELS, dtype=np.float64)
    bg[CH_COLOR] = np.asarray(background, dtype=np.float64)

    proj = _project_arrays(field, cam, t, near=near)
    if proj is None:
        empty = _empty_forward(h, w, bg)
        out, accum, t_final, last_pos = empty
        payload = np.zeros((0, N_CHANNELS))
        proj = None
    else:
        payload, vel_decay, vnorm = _standard_payload(field, proj)
        order, tile_starts = _bin_splats(proj["mean2d"], proj["radius"],
                                         proj["depth"], h, w)
        out, accum, t_final, last_pos = backend.composite_tiles(
            h, w, TILE, proj["mean2d"], proj["conic"], proj["opac_eff"],
            payload, order, tile_starts, bg, ALPHA_MIN, ALPHA_MAX, T_MIN)

    result = RenderOutput(
        color=out[:, :, CH_COLOR], depth=out[:, :, CH_DEPTH],
        opacity=accum, embedding=out[:, :, CH_EMBED],
        vmag=out[:, :, CH_VMAG], beta=out[:, :, CH_BETA],
    )
    if not with_cache:
        return result

    cache = RenderCache()
    cache.cam, cache.t, cache.bg = cam, t, bg
    cache.n_total = len(field)
    cache.field_view = field
    if proj is None:
        cache.idx = np.zeros(0, dtype=np.int64)
    else:
        cache.idx = proj["idx"]
        cache.p_cam = proj["p_cam"]
        cache.mean2d = proj["mean2d"]
        cache.cov2d = proj["cov2d"]
        cache.conic = proj["conic"]
        cache.vis_m = proj["m"]
        cache.vis_v3 = proj["v3"]
        cache.rot = proj["rot"]
        cache.sin_phase = proj["sin_phase"]
        cache.cos_phase = proj["cos_phase"]
        cache.life = proj["life"]
        cache.o_peak = proj["o_peak"]
        cache.opac_eff = proj["opac_eff"]
        cache.vel_decay = vel_decay
        cache.vnorm = vnorm
        cache.payload = payload
        cache.order = order
        cache.tile_starts = tile_starts
        cache.t_final = t_final
        cache.last_pos = last_pos
    return result, cache


def _empty_forward(h, w, bg):
    out = np.empty((h, w, bg.size), dtype=np.float64)
    out[:] = bg
    return (out, np.zeros((h, w)), np.ones((h, w)),
            np.full((h, w), -1, dtype=np.int64))


def render_payload(field: GaussianField, cam: Camera, t=None, payload=None,
                   bg_payload=None, near=NEAR):
    """Forward-only render of an arbitrary per-Gaussian payload matrix.

    ``payload`` has one row per Gaussian of the full field; rows of culled
    Gaussians are ignored. Returns (out, accum_opacity, t_final).
    """
    if t is None:
        t = cam.t
    h, w = cam.height, cam.width
    p_dim = payload.shape[1]
    if bg_payload is None:
        bg_payload = np.zeros(p_dim, dtype=np.float64)
    bg_payload = np.ascontiguousarray(bg_payload, dtype=np.float64)
    proj = _project_arrays(field, cam, t, near=near)
    if proj is None:
        out, accum, t_final, _ = _empty_forward(h, w, bg_payload)
        return out, accum, t_final
    order, tile_starts = _bin_splats(proj["mean2d"], proj["radius"],
                                     proj["depth"], h, w)
    pay = np.ascontiguousarray(payload[proj["idx"]], dtype=np.float64)
    out, accum, t_final, _ = backend.composite_tiles(
        h, w, TILE, proj["mean2d"], proj["conic"], proj["opac_eff"],
        pay, order, tile_starts, bg_payload, ALPHA_MIN, ALPHA_MAX, T_MIN)
    return out, accum, t_final


def _quat_rot_grad(q, d_rot):
    """Gradient through R(q/|q|) given dL/dR; returns dL/dq for the raw q."""
    qn = np.linalg.norm(q, axis=1, keepdims=True)
    qh = q / qn
    w, x, y, z = qh[:, 0], qh[:, 1], qh[:, 2], qh[:, 3]
    zeros = np.zeros_like(w)

    def mat(rows):
        return 2.0 * np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)

    dr_dw = mat([[zeros, -z, y], [z, zeros, -x], [-y, x, zeros]])
    dr_dx = mat([[zeros, y, z], [y, -2 * x, -w], [z, w, -2 * x]])
    dr_dy = mat([[-2 * y, x, w], [x, zeros, z], [-w, z, -2 * y]])
    dr_dz = mat([[-2 * z, -w, x], [w, -2 * z, y], [x, y, zeros]])

    d_qh = np.stack([
        np.einsum("nij,nij->n", d_rot, dr_dw),
        np.einsum("nij,nij->n", d_rot, dr_dx),
        np.einsum("nij,nij->n", d_rot, dr_dy),
        np.einsum("nij,nij->n", d_rot, dr_dz),
    ], axis=1)
    # normalization chain: d/dq of q/|q|
    inner = np.sum(d_qh * qh, axis=1, keepdims=True)
    return (d_qh - qh * inner) / qn


def render_backward(cache: RenderCache, d_color=None, d_depth=None,
                    d_opacity=None, d_embedding=None, d_vmag=None, d_beta=None):
    """Analytic backward through compositing, projection and the 4D attributes.

    Channel gradient maps may be omitted (treated as zero). Returns a dict of
    gradients wrt constrained parameters, full field sized: mu, q (raw), s, o,
    c, e, v, tau, beta, plus 'mean2d' (per-splat screen-space gradient, useful
    for densification bookkeeping).
    """
    cam, t = cache.cam, cache.t
    h, w = cam.height, cam.width
    n = cache.n_total
    field = cache.field_view
    l = field.cycle_length

    grads = {
        "mu": np.zeros((n, 3)), "q": np.zeros((n, 4)), "s": np.zeros((n, 3)),
        "o": np.zeros(n), "c": np.zeros((n, 3)), "e": np.zeros((n, 8)),
        "v": np.zeros((n, 3)), "tau": np.zeros(n), "beta": np.zeros(n),
        "mean2d": np.zeros((n, 2)),
    }
    if cache.idx.size == 0:
        return grads

    d_out = np.zeros((h, w, N_CHANNELS), dtype=np.float64)
    if d_color is not None:
        d_out[:, :, CH_COLOR] = d_color
    if d_depth is not None:
        d_out[:, :, CH_DEPTH] = d_depth
    if d_embedding is not None:
        d_out[:, :, CH_EMBED] = d_embedding
    if d_vmag is not None:
        d_out[:, :, CH_VMAG] = d_vmag
    if d_beta is not None:
        d_out[:, :, CH_BETA] = d_beta
    d_accum = np.zeros((h, w), dtype=np.float64)
    if d_opacity is not None:
        d_accum[:] = d_opacity

    d_mean2d, d_conic, d_opac, d_payload = backend.composite_tiles_backward(
        h, w, TILE, cache.mean2d, cache.conic, cache.opac_eff, cache.payload,
        cache.order, cache.tile_starts, cache.bg, ALPHA_MIN, ALPHA_MAX, T_MIN,
        cache.t_final, cache.last_pos, d_out, d_accum)

    idx = cache.idx
    p_cam = cache.p_cam
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    fx, fy = cam.fx, cam.fy

    # conic -> 2D covariance
    cmat = np.empty((idx.size, 2, 2))
    cmat[:, 0, 0] = cache.conic[:, 0]
    cmat[:, 0, 1] = cmat[:, 1, 0] = cache.conic[:, 1]
    cmat[:, 1, 1] = cache.conic[:, 2]
    dcmat = np.empty_like(cmat)
    dcmat[:, 0, 0] = d_conic[:, 0]
    dcmat[:, 0, 1] = dcmat[:, 1, 0] = 0.5 * d_conic[:, 1]
    dcmat[:, 1, 1] = d_conic[:, 2]
    d_cov2d = -cmat @ dcmat @ cmat

    # cov2d = M V3 M^T (+ const): gradients to M, V3, then J and params
    mw, v3 = cache.vis_m, cache.vis_v3
    d_m = 2.0 * d_cov2d @ mw @ v3
    d_v3 = np.einsum("nji,njk,nkl->nil", mw, d_cov2d, mw)
    d_jac = d_m @ cam.r_wc.T

    # view-space point gradient
    d_pc = np.zeros_like(p_cam)
    zz = z * z
    d_pc[:, 0] = d_mean2d[:, 0] * fx / z
    d_pc[:, 1] = d_mean2d[:, 1] * fy / z
    d_pc[:, 2] = (-d_mean2d[:, 0] * fx * x / zz - d_mean2d[:, 1] * fy * y / zz)
    # J's own dependence on the point
    d_pc[:, 0] += d_jac[:, 0, 2] * (-fx / zz)
    d_pc[:, 1] += d_jac[:, 1, 2] * (-fy / zz)
    d_pc[:, 2] += (d_jac[:, 0, 0] * (-fx / zz)
                   + d_jac[:, 0, 2] * (2.0 * fx * x / (zz * z))
                   + d_jac[:, 1, 1] * (-fy / zz)
                   + d_jac[:, 1, 2] * (2.0 * fy * y / (zz * z)))
    # depth payload channel
    d_pc[:, 2] += d_payload[:, CH_DEPTH]

    d_pw = d_pc @ cam.r_wc

    # position model chain
    sin_phase, cos_phase = cache.sin_phase, cache.cos_phase
    v_vis = field.v[idx]
    grads["mu"][idx] = d_pw
    d_v = d_pw * ((l / TWO_PI) * sin_phase)[:, None]
    d_tau = -cos_phase * np.sum(d_pw * v_vis, axis=1)

    # covariance chain
    rot, s_vis = cache.rot, field.s[idx]
    d_diag = np.einsum("nji,njk,nki->ni", rot, d_v3, rot)
    d_s = 2.0 * s_vis * d_diag
    d_rot = 2.0 * d_v3 @ rot * (s_vis * s_vis)[:, None, :]
    d_q = _quat_rot_grad(field.q_raw[idx], d_rot)

    # opacity chain: opac_eff = o * life(t)
    life, o_peak, opac_eff = cache.life, cache.o_peak, cache.opac_eff
    beta_vis = field.beta[idx]
    dt = t - field.tau[idx]
    d_o = d_opac * life
    d_tau += d_opac * opac_eff * dt / (beta_vis * beta_vis)
    d_beta_ = d_opac * opac_eff * dt * dt / (beta_vis ** 3)

    # payload chains
    d_c = d_payload[:, CH_COLOR]
    d_e = d_payload[:, CH_EMBED]
    d_vm = d_payload[:, CH_VMAG]
    vnorm, vel_decay = cache.vnorm, cache.vel_decay
    safe = vnorm > 0
    vdir = np.zeros_like(v_vis)
    vdir[safe] = v_vis[safe] / vnorm[safe, None]
    d_v += (d_vm * vel_decay)[:, None] * vdir
    d_beta_ += d_vm * vnorm * vel_decay * (-1.0 / (2.0 * l))
    d_beta_ += d_payload[:, CH_BETA]

    grads["q"][idx] = d_q
    grads["s"][idx] = d_s
    grads["o"][idx] = d_o
    grads["c"][idx] = d_c
    grads["e"][idx] = d_e
    grads["v"][idx] = d_v
    grads["tau"][idx] = d_tau
    grads["beta"][idx] = d_beta_
    grads["mean2d"][idx] = d_mean2d
    return grads


def project(g: Gaussian4D, cam: Camera, t: float, l: float):
    """Project a single Gaussian; None when culled (behind near or faded out)."""
    field = GaussianField.from_gaussians([g], cycle_length=l)
    proj = _project_arrays(field, cam, t)
    if proj is None:
        return None
    payload, _, _ = _standard_payload(field, proj)
    return ProjectedSplat(
        mean2d=proj["mean2d"][0], cov2d=proj["cov2d"][0], conic=proj["conic"][0],
        radius=float(proj["radius"][0]), depth=float(proj["depth"][0]),
        opacity=float(proj["opac_eff"][0]), payload=payload[0],
    )


def composite_pixel(alphas, payloads, background=None, t_min=T_MIN):
    """Reference front-to-back compositing of one pixel.

    ``alphas``: sequence of per-splat alphas, already sorted front to back.
    ``payloads``: matching payload vectors. Compositing stops once the running
    transmittance drops below ``t_min`` (the crossing splat still contributes);
    pass t_min=0 for the exact untruncated sum. Returns (out, accum_opacity).
    """
    alphas = np.asarray(alphas, dtype=np.float64)
    payloads = np.asarray(payloads, dtype=np.float64)
    if payloads.ndim == 1 and alphas.size:
        payloads = payloads.reshape(alphas.size, -1)
    if alphas.size:
        p_dim = payloads.shape[1]
    elif background is not None:
        p_dim = np.asarray(background).size
    else:
        p_dim = 1
    out = np.zeros(p_dim, dtype=np.float64)
    accum = 0.0
    t_run = 1.0
    for alpha, pay in zip(alphas, payloads):
        wgt = alpha * t_run
        out += wgt * pay
        accum += wgt
        t_run = t_run * (1.0 - alpha)
        if t_run < t_min:
            break
    if background is not None:
        out += t_run * np.asarray(background, dtype=np.float64)
    return out, accum
