"""Adam training state for a Gaussian field plus densification and schedule.

Parameters live in unconstrained storage (log scales, logit opacity, raw
quaternions); gradients arrive in constrained space from the rasterizer and
losses and are chained to storage space here. Non-finite gradient elements
skip their update and are counted instead of poisoning the moments.
"""

from dataclasses import dataclass

import numpy as np

from .scene import GaussianField

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-15

DEFAULT_LRS = {
    "mu": 1.6e-4, "q_raw": 1e-3, "log_s": 5e-3, "logit_o": 5e-2,
    "c": 2.5e-3, "e": 2.5e-3, "v": 1e-3, "tau": 5e-4, "log_beta": 2e-2,
}
CLASSIFIER_LR = 5e-4
MU_LR_FINAL_SCALE = 0.01

BETA_MAX = 1e3
BETA_MIN = 1e-4

DENSIFY_INTERVAL = 100
DENSIFY_WINDOW = (500, 0.5)        # (start iteration, end fraction of total)
DENSIFY_GRAD_THRESHOLD = 2e-4      # on NDC-scaled positional gradients
PRUNE_OPACITY = 5e-3
SPLIT_FACTOR = 1.6
SPLIT_SIZE_THRESHOLD = 0.05        # world units: larger splats split, smaller clone
HARD_CAP = 100_000

_STORAGE_OF = {
    "mu": "mu", "q": "q_raw", "s": "log_s", "o": "logit_o", "c": "c",
    "e": "e", "v": "v", "tau": "tau", "beta": "log_beta",
}


def constrained_to_storage(field: GaussianField, grads: dict) -> dict:
    """Chain constrained-space gradients to the unconstrained storage arrays."""
    out = {}
    for name, g in grads.items():
        if name not in _STORAGE_OF or g is None:
            continue
        if name == "s":
            out["log_s"] = g * field.s
        elif name == "o":
            o = field.o
            out["logit_o"] = g * o * (1.0 - o)
        elif name == "beta":
            out["log_beta"] = g * field.beta
        else:
            out[_STORAGE_OF[name]] = g
    return out


def _adam_update(param, m, v, g, lr, t, skip_counter):
    """In-place Adam on one array; returns updated skip count."""
    finite = np.isfinite(g)
    n_bad = int(param.size - finite.sum())
    if n_bad:
        skip_counter += n_bad
        g = np.where(finite, g, 0.0)
    m *= ADAM_BETA1
    m += (1.0 - ADAM_BETA1) * g
    v *= ADAM_BETA2
    v += (1.0 - ADAM_BETA2) * g * g
    mhat = m / (1.0 - ADAM_BETA1 ** t)
    vhat = v / (1.0 - ADAM_BETA2 ** t)
    step = lr * mhat / (np.sqrt(vhat) + ADAM_EPS)
    param -= np.where(finite, step, 0.0)
    return skip_counter


class FieldOptimizer:
    """Adam over the nine field parameter groups with 3DGS-style densify."""

    def __init__(self, field: GaussianField, total_iters, lrs=None,
                 mu_lr_final=MU_LR_FINAL_SCALE):
        self.field = field
        self.total_iters = int(total_iters)
        self.lrs = dict(DEFAULT_LRS)
        if lrs:
            self.lrs.update(lrs)
        self.mu_lr_final = mu_lr_final
        self.t = 0
        self.skipped = 0
        self.moments = {name: (np.zeros_like(getattr(field, name)),
                               np.zeros_like(getattr(field, name)))
                        for name in DEFAULT_LRS}
        self._reset_densify_stats()

    def _reset_densify_stats(self):
        n = len(self.field)
        self.grad2d_accum = np.zeros(n)
        self.grad2d_count = np.zeros(n)
        self.grad_mu_accum = np.zeros((n, 3))

    def record_densify_stats(self, grads, cam):
        """Accumulate NDC-scaled screen gradients for the densify heuristic."""
        g2d = grads.get("mean2d")
        if g2d is None:
            return
        scaled = np.linalg.norm(
            g2d * np.array([cam.width / 2.0, cam.height / 2.0]), axis=1)
        seen = scaled > 0.0
        self.grad2d_accum += np.where(seen, scaled, 0.0)
        self.grad2d_count += seen
        if "mu" in grads:
            self.grad_mu_accum += np.where(seen[:, None], grads["mu"], 0.0)

    def mu_lr(self):
        frac = self.t / max(self.total_iters, 1)
        return self.lrs["mu"] * self.mu_lr_final ** min(frac, 1.0)

    def step(self, grads):
        """One Adam step from constrained-space gradients (missing keys frozen)."""
        storage = constrained_to_storage(self.field, grads)
        self.t += 1
        for name, g in storage.items():
            lr = self.mu_lr() if name == "mu" else self.lrs[name]
            m, v = self.moments[name]
            self.skipped = _adam_update(getattr(self.field, name), m, v,
                                        np.asarray(g, dtype=np.float64),
                                        lr, self.t, self.skipped)
        self._post_step()

    def _post_step(self):
        f = self.field
        norms = np.linalg.norm(f.q_raw, axis=1, keepdims=True)
        bad = (norms[:, 0] == 0.0) | ~np.isfinite(norms[:, 0])
        if bad.any():
            f.q_raw[bad] = np.array([1.0, 0.0, 0.0, 0.0])
            norms = np.linalg.norm(f.q_raw, axis=1, keepdims=True)
        f.q_raw /= norms
        np.clip(f.tau, 0.0, 1.0, out=f.tau)
        np.clip(f.log_beta, np.log(BETA_MIN), np.log(BETA_MAX), out=f.log_beta)

    def _resize(self, keep_idx, n_new):
        for name, (m, v) in self.moments.items():
            self.moments[name] = (self._carry(m, keep_idx, n_new),
                                  self._carry(v, keep_idx, n_new))

    @staticmethod
    def _carry(buf, keep_idx, n_new):
        out = np.zeros((len(keep_idx) + n_new,) + buf.shape[1:])
        out[:len(keep_idx)] = buf[keep_idx]
        return out

    def densify_and_prune(self, grad_threshold=DENSIFY_GRAD_THRESHOLD,
                          prune_opacity=PRUNE_OPACITY,
                          split_size=SPLIT_SIZE_THRESHOLD,
                          hard_cap=HARD_CAP, densify=True):
        """Clone/split high-gradient Gaussians, prune faint ones, fix buffers."""
        f = self.field
        n = len(f)
        avg = np.where(self.grad2d_count > 0,
                       self.grad2d_accum / np.maximum(self.grad2d_count, 1), 0.0)
        hot = avg > grad_threshold
        s = f.s
        s_max = s.max(axis=1)
        if not densify or n >= hard_cap:
            hot[:] = False
        clone = hot & (s_max <= split_size)
        split = hot & (s_max > split_size)

        finite_ok = np.isfinite(f.mu).all(axis=1) & np.isfinite(f.log_s).all(axis=1)
        keep = (f.o >= prune_opacity) & finite_ok & ~split
        keep_idx = np.flatnonzero(keep)
        stats = {"split": int(split.sum()),
                 "pruned": int(n - keep.sum() - split.sum())}

        pieces = [f.subset(keep_idx)]
        n_new = 0

        clone_idx = np.flatnonzero(clone & keep)
        stats["cloned"] = int(clone_idx.size)
        if clone_idx.size:
            children = f.subset(clone_idx)
            g = self.grad_mu_accum[clone_idx]
            norm = np.linalg.norm(g, axis=1, keepdims=True)
            direction = np.where(norm > 0, g / np.maximum(norm, 1e-30), 0.0)
            children.mu = children.mu - 0.5 * s_max[clone_idx, None] * direction
            pieces.append(children)
            n_new += clone_idx.size

        split_idx = np.flatnonzero(split)
        if split_idx.size:
            parents = f.subset(split_idx)
            axis_id = np.argmax(parents.s, axis=1)
            rot = parents.rotmats()
            major = rot[np.arange(split_idx.size), :, axis_id]
            offset = 0.5 * parents.s.max(axis=1)[:, None] * major
            for sign in (+1.0, -1.0):
                child = parents.copy()
                child.mu = parents.mu + sign * offset
                child.log_s = parents.log_s - np.log(SPLIT_FACTOR)
                pieces.append(child)
            n_new += 2 * split_idx.size

        self.field = pieces[0] if len(pieces) == 1 else GaussianField.concatenate(pieces)
        self._resize(keep_idx, n_new)
        self._reset_densify_stats()
        return stats

    def save_state(self, path):
        arrays = {"t": np.array([self.t]), "skipped": np.array([self.skipped])}
        for name, (m, v) in self.moments.items():
            arrays[f"m_{name}"] = m
            arrays[f"v_{name}"] = v
        np.savez(path, **arrays)

    def load_state(self, path):
        data = np.load(path)
        self.t = int(data["t"][0])
        self.skipped = int(data["skipped"][0])
        for name in self.moments:
            self.moments[name] = (data[f"m_{name}"], data[f"v_{name}"])


class ClassifierOptimizer:
    """Plain Adam over the MLP weight dict."""

    def __init__(self, classifier, lr=CLASSIFIER_LR):
        self.classifier = classifier
        self.lr = lr
        self.t = 0
        self.skipped = 0
        self.moments = {k: (np.zeros_like(p), np.zeros_like(p))
                        for k, p in classifier.params().items()}

    def step(self, grads):
        self.t += 1
        for name, g in grads.items():
            m, v = self.moments[name]
            self.skipped = _adam_update(getattr(self.classifier, name), m, v,
                                        np.asarray(g, dtype=np.float64),
                                        self.lr, self.t, self.skipped)


@dataclass
class Schedule:
    """Staged loss activation: base photometric losses always on, the rest
    switch on at fixed fractions of the run, in a fixed order."""

    total: int
    frac_id: float = 0.10
    frac_vel: float = 0.20
    frac_3d: float = 0.60
    frac_consist: float = 0.70

    def __post_init__(self):
        fr = [self.frac_id, self.frac_vel, self.frac_3d, self.frac_consist]
        if any(b < a for a, b in zip(fr, fr[1:])):
            raise ValueError("activation fractions must be nondecreasing")

    def active(self, iteration):
        on = {"image", "depth", "opacity"}
        frac = iteration / max(self.total, 1)
        if frac >= self.frac_id:
            on.add("id")
        if frac >= self.frac_vel:
            on.add("vel")
        if frac >= self.frac_3d:
            on.add("threed")
        if frac >= self.frac_consist:
            on.add("consist")
        return on

    def densify_window(self, iteration, start=DENSIFY_WINDOW[0],
                       end_frac=DENSIFY_WINDOW[1]):
        return start <= iteration <= end_frac * self.total
