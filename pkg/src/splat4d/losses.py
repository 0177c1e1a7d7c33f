"""Training losses with hand-written gradients.

Every loss returns its scalar value together with analytic gradients for
whatever it touches (rendered maps, embeddings, classifier weights, raw field
parameters). Image-space losses expect float64 maps from the rasterizer;
field-space losses (3d identity, consistency) index the field directly and
return gradient arrays of full field size, zero outside the touched subset.
"""

from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.ndimage import correlate1d

from .scene import EMBED_DIM, GaussianField

EPS_LOG = 1e-6
EPS_EXIST = 5e-4
EPS_V = 1e-8

SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _ssim_kernel():
    half = (SSIM_WIN - 1) // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / SSIM_SIGMA) ** 2)
    return k / k.sum()


_KERNEL = _ssim_kernel()
_PAD = (SSIM_WIN - 1) // 2


def _win_mean(img):
    t = correlate1d(img, _KERNEL, axis=0, mode="constant")
    t = correlate1d(t, _KERNEL, axis=1, mode="constant")
    return t[_PAD:-_PAD, _PAD:-_PAD]


def _win_adjoint(coeff, shape):
    full = np.zeros(shape, dtype=np.float64)
    full[_PAD:-_PAD, _PAD:-_PAD] = coeff
    t = correlate1d(full, _KERNEL, axis=0, mode="constant")
    return correlate1d(t, _KERNEL, axis=1, mode="constant")


def _ssim_stats(x, y):
    mx, my = _win_mean(x), _win_mean(y)
    vx = _win_mean(x * x) - mx * mx
    vy = _win_mean(y * y) - my * my
    cxy = _win_mean(x * y) - mx * my
    a1 = 2.0 * mx * my + SSIM_C1
    a2 = 2.0 * cxy + SSIM_C2
    b1 = mx * mx + my * my + SSIM_C1
    b2 = vx + vy + SSIM_C2
    return mx, my, a1, a2, b1, b2


def ssim(x, y):
    """Mean SSIM index, 11x11 Gaussian window (sigma 1.5), valid-region crop."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("shape mismatch")
    if min(x.shape) < SSIM_WIN:
        raise ValueError(f"image smaller than the {SSIM_WIN}x{SSIM_WIN} window")
    _, _, a1, a2, b1, b2 = _ssim_stats(x, y)
    return float(np.mean(a1 * a2 / (b1 * b2)))


def ssim_with_grad(x, y, weight=None):
    """SSIM value and gradient wrt y.

    ``weight``: optional per-pixel weighting over the valid (cropped) region;
    the value becomes a weighted mean. Used for masked image losses.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("shape mismatch")
    if min(x.shape) < SSIM_WIN:
        raise ValueError(f"image smaller than the {SSIM_WIN}x{SSIM_WIN} window")
    mx, my, a1, a2, b1, b2 = _ssim_stats(x, y)
    denom = b1 * b2
    s_map = a1 * a2 / denom

    if weight is None:
        w = np.full(s_map.shape, 1.0 / s_map.size)
    else:
        tot = weight.sum()
        if tot <= 0:
            return 0.0, np.zeros_like(y)
        w = weight / tot
    value = float(np.sum(w * s_map))

    # partials of S wrt the windowed statistics, premultiplied by w
    d_my = w * (2.0 * mx * a2 / denom - s_map * 2.0 * my / b1)
    d_vy = w * (-s_map / b2)
    d_cxy = w * (2.0 * a1 / denom)

    # chain through mu_y = G*y, var_y = G*y^2 - mu_y^2, cov = G*xy - mu_x mu_y
    c_mu = d_my - 2.0 * d_vy * my - d_cxy * mx
    grad = (_win_adjoint(c_mu, y.shape)
            + 2.0 * y * _win_adjoint(d_vy, y.shape)
            + x * _win_adjoint(d_cxy, y.shape))
    return value, grad


def _to_gray(img):
    return img.mean(axis=2) if img.ndim == 3 else img


def loss_image(target, pred, lam_ssim=0.2, mask=None, literal_ssim=False):
    """Photometric loss: (1-lam)*L1 + lam*(1 - SSIM) on channel-mean gray.

    ``literal_ssim`` swaps the structural term for +SSIM (kept only for
    comparison runs; it rewards dissimilarity). ``mask`` restricts the loss:
    pixels outside it contribute exactly zero value and gradient (the
    prediction is replaced by the target there before windowing).
    Returns (value, d_pred).
    """
    target = np.asarray(target, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if target.shape != pred.shape:
        raise ValueError("shape mismatch")

    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        n_kept = int(mask.sum())
        if n_kept == 0:
            return 0.0, np.zeros_like(pred)
        m3 = mask[:, :, None] if pred.ndim == 3 else mask
        pred_eff = np.where(m3, pred, target)
    else:
        n_kept = target.shape[0] * target.shape[1]
        pred_eff = pred

    diff = pred_eff - target
    n_ch = target.shape[2] if target.ndim == 3 else 1
    l1 = np.abs(diff).sum() / (n_kept * n_ch)
    d_l1 = np.sign(diff) / (n_kept * n_ch)

    gray_t = _to_gray(target)
    gray_p = _to_gray(pred_eff)
    w = None
    if mask is not None:
        w = mask[_PAD:-_PAD, _PAD:-_PAD].astype(np.float64)
    if w is not None and w.sum() == 0:
        # no window center survives the crop: structural term drops out
        s_val, d_gray, s_scale = 1.0, np.zeros_like(gray_p), 0.0
    else:
        s_val, d_gray = ssim_with_grad(gray_t, gray_p, weight=w)
        s_scale = lam_ssim if literal_ssim else -lam_ssim

    if literal_ssim:
        value = (1.0 - lam_ssim) * l1 + lam_ssim * s_val
    else:
        value = (1.0 - lam_ssim) * l1 + lam_ssim * (1.0 - s_val)

    grad = (1.0 - lam_ssim) * d_l1
    if pred.ndim == 3:
        grad = grad + s_scale * d_gray[:, :, None] / pred.shape[2]
    else:
        grad = grad + s_scale * d_gray
    if mask is not None:
        grad = np.where(m3, grad, 0.0)
    return float(value), grad


def loss_depth(pred, gt, valid):
    """Masked mean absolute depth error. Returns (value, d_pred)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    n = int(valid.sum())
    if n == 0:
        return 0.0, np.zeros_like(pred)
    diff = np.where(valid, pred - gt, 0.0)
    value = np.abs(diff).sum() / n
    grad = np.sign(diff) / n
    return float(value), grad


def loss_opacity_sky(opacity, sky_mask, region=None):
    """Entropy sharpening of accumulated opacity plus sky transparency.

    value = -(1/hw) sum O log O - (1/hw) sum_sky log(1 - O), with O clamped
    to [EPS_LOG, 1-EPS_LOG] before the logs (no gradient outside the clamp).
    When ``region`` is given, only those pixels count and hw becomes the
    region size. Returns (value, d_opacity).
    """
    o_raw = np.asarray(opacity, dtype=np.float64)
    sky = np.asarray(sky_mask, dtype=bool)
    if region is not None:
        region = np.asarray(region, dtype=bool)
        sky = sky & region
        hw = int(region.sum())
        if hw == 0:
            return 0.0, np.zeros_like(o_raw)
    else:
        region = np.ones_like(sky)
        hw = o_raw.size
    o = np.clip(o_raw, EPS_LOG, 1.0 - EPS_LOG)
    inside = (o_raw > EPS_LOG) & (o_raw < 1.0 - EPS_LOG) & region
    value = -np.where(region, o * np.log(o), 0.0).sum() / hw
    value -= np.where(sky, np.log(1.0 - o), 0.0).sum() / hw
    grad = -(np.log(o) + 1.0) / hw
    grad = grad + np.where(sky, 1.0 / (1.0 - o), 0.0) / hw
    grad = np.where(inside, grad, 0.0)
    return float(value), grad


MLP_MAGIC = b"MLP0"


class IdClassifier:
    """Small MLP over identity embeddings: 8 -> 64 (relu) -> C+1 logits."""

    HIDDEN = 64

    def __init__(self, num_classes, seed=0):
        if num_classes < 1:
            raise ValueError("need at least one dynamic class")
        rng = np.random.default_rng(seed)
        self.num_classes = int(num_classes)  # dynamic classes; outputs C+1
        n_out = self.num_classes + 1
        self.w1 = rng.normal(0.0, np.sqrt(2.0 / EMBED_DIM),
                             size=(EMBED_DIM, self.HIDDEN))
        self.b1 = np.zeros(self.HIDDEN)
        self.w2 = rng.normal(0.0, np.sqrt(2.0 / self.HIDDEN),
                             size=(self.HIDDEN, n_out))
        self.b2 = np.zeros(n_out)

    @property
    def n_outputs(self):
        return self.num_classes + 1

    def params(self):
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def logits(self, emb):
        emb = np.asarray(emb, dtype=np.float64)
        if emb.shape[-1] != EMBED_DIM:
            raise ValueError(f"embedding dim {emb.shape[-1]} != {EMBED_DIM}")
        flat = emb.reshape(-1, EMBED_DIM)
        h = np.maximum(flat @ self.w1 + self.b1, 0.0)
        out = h @ self.w2 + self.b2
        return out.reshape(emb.shape[:-1] + (self.n_outputs,))

    def probs(self, emb):
        return softmax(self.logits(emb))

    def predict(self, emb):
        return np.argmax(self.logits(emb), axis=-1)

    def _forward_cached(self, flat_emb):
        pre = flat_emb @ self.w1 + self.b1
        h = np.maximum(pre, 0.0)
        return h, pre > 0.0, h @ self.w2 + self.b2

    def backward(self, flat_emb, h, gate, d_logits):
        """Given cached forward pieces, return (d_emb, weight grads)."""
        d_h = (d_logits @ self.w2.T) * gate
        grads = {
            "w2": h.T @ d_logits,
            "b2": d_logits.sum(axis=0),
            "w1": flat_emb.T @ d_h,
            "b1": d_h.sum(axis=0),
        }
        return d_h @ self.w1.T, grads

    def save(self, path):
        arrays = [self.w1, self.b1, self.w2, self.b2]
        with open(path, "wb") as f:
            f.write(MLP_MAGIC)
            f.write(np.uint32(len(arrays)).tobytes())
            for a in arrays:
                f.write(np.uint32(a.ndim).tobytes())
                f.write(np.asarray(a.shape, dtype=np.uint32).tobytes())
                f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            if f.read(4) != MLP_MAGIC:
                raise ValueError(f"{path}: not a classifier checkpoint")
            (count,) = np.frombuffer(f.read(4), dtype=np.uint32)
            arrays = []
            for _ in range(count):
                (ndim,) = np.frombuffer(f.read(4), dtype=np.uint32)
                shape = tuple(np.frombuffer(f.read(4 * ndim), dtype=np.uint32))
                n = int(np.prod(shape))
                buf = f.read(4 * n)
                if len(buf) != 4 * n:
                    raise ValueError(f"{path}: truncated classifier checkpoint")
                arrays.append(np.frombuffer(buf, dtype="<f4")
                              .astype(np.float64).reshape(shape))
        w1, b1, w2, b2 = arrays
        clf = cls(num_classes=w2.shape[1] - 1)
        clf.w1, clf.b1, clf.w2, clf.b2 = w1, b1, w2, b2
        return clf


def softmax(logits):
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def loss_id(classifier, emb_map, labels):
    """Pixel cross-entropy between classified embeddings and ID labels.

    ``emb_map``: (h, w, 8) rendered embedding channels; ``labels``: (h, w)
    integer classes in [0, C]. Returns (value, d_emb_map, classifier grads).
    """
    emb_map = np.asarray(emb_map, dtype=np.float64)
    labels = np.asarray(labels)
    if labels.max(initial=0) >= classifier.n_outputs:
        raise ValueError("label class out of range")
    flat = emb_map.reshape(-1, EMBED_DIM)
    lab = labels.reshape(-1)
    n = flat.shape[0]
    h, gate, logits = classifier._forward_cached(flat)
    p = softmax(logits)
    picked = p[np.arange(n), lab]
    value = float(-np.log(np.maximum(picked, EPS_LOG)).mean())
    d_logits = p.copy()
    d_logits[np.arange(n), lab] -= 1.0
    d_logits /= n
    d_emb, w_grads = classifier.backward(flat, h, gate, d_logits)
    return value, d_emb.reshape(emb_map.shape), w_grads


def loss_dyn_reg(vmag_map, beta_map, dyn_mask):
    """Suppress velocity and push life-span up outside the dynamic mask.

    Returns (l_vmag, l_beta, d_vmag_map, d_beta_map); l_beta is negated so
    that minimizing it grows the rendered life-span.
    """
    vmag_map = np.asarray(vmag_map, dtype=np.float64)
    beta_map = np.asarray(beta_map, dtype=np.float64)
    keep = ~np.asarray(dyn_mask, dtype=bool)
    n = int(keep.sum())
    if n == 0:
        return 0.0, 0.0, np.zeros_like(vmag_map), np.zeros_like(beta_map)
    l_v = float(vmag_map[keep].sum() / n)
    l_b = float(-beta_map[keep].sum() / n)
    d_v = np.where(keep, 1.0 / n, 0.0)
    d_b = np.where(keep, -1.0 / n, 0.0)
    return l_v, l_b, d_v, d_b


def existing_gaussians(field: GaussianField, t, eps=EPS_EXIST):
    """Indices with time-modulated opacity strictly above eps at time t."""
    return np.flatnonzero(field.opacities_at(t) > eps)


@dataclass
class GaussianPartition:
    exist: np.ndarray
    dynamic: np.ndarray
    static: np.ndarray
    instances: dict = dc_field(default_factory=dict)


def partition_gaussians(field, t, classifier, eps=EPS_EXIST):
    """Split existing Gaussians into static / per-instance dynamic sets.

    Class 0 is static/background; classes 1..C map to dynamic instances.
    """
    exist = existing_gaussians(field, t, eps)
    if exist.size == 0:
        return GaussianPartition(exist, exist.copy(), exist.copy(),
                                 {k: np.zeros(0, dtype=np.int64)
                                  for k in range(1, classifier.n_outputs)})
    cls = classifier.predict(field.e[exist])
    dynamic = exist[cls > 0]
    static = exist[cls == 0]
    instances = {k: exist[cls == k] for k in range(1, classifier.n_outputs)}
    return GaussianPartition(exist, dynamic, static, instances)


def knn_brute(query_pos, ref_pos, k, exclude=None):
    """Exact k nearest neighbours, ties broken by smaller reference index.

    ``exclude``: optional (nq,) array of reference indices to mask out per
    query (used for self-exclusion). Returns (nq, k_eff) indices into ref.
    """
    query_pos = np.atleast_2d(query_pos)
    ref_pos = np.atleast_2d(ref_pos)
    nr = ref_pos.shape[0]
    avail = nr - (1 if exclude is not None else 0)
    k_eff = min(k, avail)
    if k_eff <= 0:
        return np.zeros((query_pos.shape[0], 0), dtype=np.int64)
    d2 = ((query_pos[:, None, :] - ref_pos[None, :, :]) ** 2).sum(axis=2)
    if exclude is not None:
        d2[np.arange(query_pos.shape[0]), exclude] = np.inf
    idx = np.argsort(d2, axis=1, kind="stable")[:, :k_eff]
    return idx.astype(np.int64)


def knn_exact(query_pos, ref_pos, k, exclude=None):
    """Same contract as knn_brute but tree-accelerated for large point sets.

    Agrees with knn_brute except on exact distance ties (which brute breaks
    by smaller index; the tree breaks arbitrarily). Deterministic for fixed
    inputs either way.
    """
    query_pos = np.atleast_2d(query_pos)
    ref_pos = np.atleast_2d(ref_pos)
    nr = ref_pos.shape[0]
    if nr * query_pos.shape[0] <= 65536:
        return knn_brute(query_pos, ref_pos, k, exclude=exclude)
    from scipy.spatial import cKDTree
    avail = nr - (1 if exclude is not None else 0)
    k_eff = min(k, avail)
    if k_eff <= 0:
        return np.zeros((query_pos.shape[0], 0), dtype=np.int64)
    tree = cKDTree(ref_pos)
    ask = k_eff + (1 if exclude is not None else 0)
    _, idx = tree.query(query_pos, k=ask, workers=1)
    idx = np.atleast_2d(idx.reshape(query_pos.shape[0], ask))
    if exclude is not None:
        # drop the excluded reference wherever it appears, keep k_eff others
        out = np.empty((query_pos.shape[0], k_eff), dtype=np.int64)
        hit = idx == np.asarray(exclude)[:, None]
        for row in range(idx.shape[0]):
            keep = idx[row][~hit[row]]
            out[row] = keep[:k_eff]
        return out
    return idx[:, :k_eff].astype(np.int64)


def loss_3d_identity(field, t, classifier, k=5, eps=EPS_EXIST,
                     partition=None, neighbors=None):
    """KL pull of nearby static Gaussians toward dynamic anchors' classes.

    Anchor distributions are targets (no gradient); the classifier itself is
    held fixed here, so the only gradient is to static embeddings.
    ``partition`` and ``neighbors`` (indices into partition.static, one row
    per dynamic anchor) may be supplied to reuse precomputed structure.
    Returns (value, d_e) with d_e of full field size.
    """
    d_e = np.zeros_like(field.e)
    part = partition if partition is not None \
        else partition_gaussians(field, t, classifier, eps)
    if part.dynamic.size == 0 or part.static.size == 0:
        return 0.0, d_e

    if neighbors is None:
        pos = field.positions_at(t)
        neighbors = knn_brute(pos[part.dynamic], pos[part.static], k)
    nbr = neighbors
    k_eff = nbr.shape[1]
    if k_eff == 0:
        return 0.0, d_e

    p_anchor = softmax(classifier.logits(field.e[part.dynamic]))
    flat_stat = field.e[part.static]
    h, gate, logits_s = classifier._forward_cached(flat_stat)
    q_all = softmax(logits_s)

    norm = 1.0 / (k_eff * part.dynamic.size)
    value = 0.0
    d_logits_s = np.zeros_like(logits_s)
    log_p = np.log(np.maximum(p_anchor, EPS_LOG))
    log_q = np.log(np.maximum(q_all, EPS_LOG))
    for j in range(part.dynamic.size):
        cols = nbr[j]
        kl = (p_anchor[j] * (log_p[j] - log_q[cols])).sum(axis=1)
        value += kl.sum()
        np.add.at(d_logits_s, cols, q_all[cols] - p_anchor[j])
    value *= norm
    d_logits_s *= norm
    d_stat, _ = classifier.backward(flat_stat, h, gate, d_logits_s)
    d_e[part.static] = d_stat
    return float(value), d_e


def loss_consistency(field, t, partition, k=5, lam_mag=0.4, lam_dir=0.2,
                     neighbors=None):
    """Within-instance agreement of decayed velocity and life-span.

    Per instance: lam_mag * L_mag + lam_dir * L_dir + (1-lam_mag-lam_dir) *
    L_beta over k-nearest within-instance neighbour pairs, averaged over all
    instance classes. Gradients flow through the decayed velocities (into v
    and beta), the per-instance mean-velocity and mean-beta denominators, and
    the direct beta differences. ``neighbors`` may carry precomputed
    per-instance index arrays keyed like partition.instances.
    Returns (value, d_v, d_beta).
    """
    n_field = len(field)
    d_v = np.zeros((n_field, 3))
    d_beta = np.zeros(n_field)
    if not partition.instances:
        return 0.0, d_v, d_beta

    lam_beta = 1.0 - lam_mag - lam_dir
    beta = field.beta
    decay = np.exp(-beta / (2.0 * field.cycle_length))
    u_all = field.v * decay[:, None]
    pos = field.positions_at(t)

    total = 0.0
    for inst in sorted(partition.instances):
        gi = partition.instances[inst]
        n = gi.size
        if n < 2:
            continue
        if neighbors is not None and inst in neighbors:
            nbr = neighbors[inst]
        else:
            nbr = knn_brute(pos[gi], pos[gi], k, exclude=np.arange(n))
        k_eff = nbr.shape[1]
        if k_eff == 0:
            continue
        norm = 1.0 / (k_eff * n)
        u = u_all[gi]
        b = beta[gi]
        du = np.zeros_like(u)
        db = np.zeros_like(b)

        u_mean = u.mean(axis=0)
        m = np.linalg.norm(u_mean)
        diff = u[:, None, :] - u[nbr]              # (n, k, 3)
        dist = np.linalg.norm(diff, axis=2)
        if m > EPS_V:
            a_sum = dist.sum()
            l_mag = norm * a_sum / m
            safe = np.where(dist > 0.0, dist, 1.0)
            unit = diff / safe[:, :, None]
            unit[dist == 0.0] = 0.0
            coeff = lam_mag * norm / m
            np.add.at(du, np.arange(n), coeff * unit.sum(axis=1))
            np.add.at(du, nbr.ravel(), -coeff * unit.reshape(-1, 3))
            du += (-lam_mag * norm * a_sum / m ** 3) * u_mean / n
        else:
            l_mag = 0.0

        nu = np.linalg.norm(u, axis=1)
        ok = (nu[:, None] > EPS_V) & (nu[nbr] > EPS_V)
        dots = (u[:, None, :] * u[nbr]).sum(axis=2)
        denom = np.where(ok, nu[:, None] * nu[nbr], 1.0)
        cosv = np.where(ok, dots / denom, 1.0)  # degenerate pairs contribute 0
        l_dir = (0.5 * norm) * (1.0 - cosv).sum()
        # d(1-cos)/du_j = -(u_k/(|u_j||u_k|) - cos*u_j/|u_j|^2), same with j<->k
        cj = np.where(ok, 1.0, 0.0) * (0.5 * norm) * lam_dir
        nj = np.where(nu > EPS_V, nu, 1.0)
        g_j = -(u[nbr] / denom[:, :, None] -
                (cosv / nj[:, None] ** 2)[:, :, None] * u[:, None, :])
        g_k = -(u[:, None, :] / denom[:, :, None] -
                (cosv / np.where(nu[nbr] > EPS_V, nu[nbr], 1.0) ** 2)[:, :, None]
                * u[nbr])
        np.add.at(du, np.arange(n), (cj[:, :, None] * g_j).sum(axis=1))
        np.add.at(du, nbr.ravel(), (cj[:, :, None] * g_k).reshape(-1, 3))

        b_mean = b.mean()
        bdiff = b[:, None] - b[nbr]
        b_sum = np.abs(bdiff).sum()
        l_beta = norm * b_sum / b_mean
        sg = np.sign(bdiff)
        cb = lam_beta * norm / b_mean
        np.add.at(db, np.arange(n), cb * sg.sum(axis=1))
        np.add.at(db, nbr.ravel(), -cb * sg.ravel())
        db += (-lam_beta * norm * b_sum / b_mean ** 2) / n

        total += lam_mag * l_mag + lam_dir * l_dir + lam_beta * l_beta
        # chain decayed velocity u = v * exp(-beta/(2l)) back to (v, beta)
        d_v[gi] += du * decay[gi][:, None]
        d_beta[gi] += db - (du * u).sum(axis=1) / (2.0 * field.cycle_length)

    n_inst = len(partition.instances)
    scale = 1.0 / n_inst
    return float(total * scale), d_v * scale, d_beta * scale
