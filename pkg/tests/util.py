"""Shared test helpers: fixture fields, cameras, finite differences."""

import numpy as np

from splat4d.scene import Camera, GaussianField, look_at_camera

PARAM_SHAPES = {
    "mu": (3,), "q": (4,), "s": (3,), "o": (), "c": (3,), "e": (8,),
    "v": (3,), "tau": (), "beta": (),
}


def simple_camera(width=16, height=16, fx=20.0, fy=20.0, t=0.5):
    r = np.eye(3)
    return Camera(fx=fx, fy=fy, cx=width / 2.0, cy=height / 2.0,
                  width=width, height=height, r_wc=r, t_wc=np.zeros(3), t=t)


def random_field(n, seed=0, cycle_length=0.4, spread=1.2, depth_range=(3.0, 6.0),
                 num_classes=0):
    """Gaussians in front of the identity camera, safely away from clamps."""
    rng = np.random.default_rng(seed)
    mu = np.zeros((n, 3))
    mu[:, 0] = rng.uniform(-spread, spread, n)
    mu[:, 1] = rng.uniform(-spread, spread, n)
    mu[:, 2] = rng.uniform(*depth_range, n)
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    s = rng.uniform(0.2, 0.5, (n, 3))
    o = rng.uniform(0.45, 0.85, n)
    c = rng.uniform(0.1, 0.9, (n, 3))
    e = rng.normal(size=(n, 8)) * 0.5
    v = rng.uniform(-0.8, 0.8, (n, 3))
    tau = rng.uniform(0.35, 0.65, n)
    beta = rng.uniform(0.25, 0.7, n)
    return GaussianField.from_constrained(
        mu=mu, q=q, s=s, o=o, c=c, e=e, v=v, tau=tau, beta=beta,
        cycle_length=cycle_length, num_classes=num_classes)


def perturb_field(field, name, index, flat_axis, h):
    """Copy of ``field`` with one constrained parameter element shifted by h."""
    f = field.copy()
    if name == "mu":
        f.mu[index, flat_axis] += h
    elif name == "q":
        f.q_raw[index, flat_axis] += h
    elif name == "s":
        s = f.s[index, flat_axis] + h
        f.log_s[index, flat_axis] = np.log(s)
    elif name == "o":
        o = f.o[index] + h
        f.logit_o[index] = np.log(o / (1.0 - o))
    elif name == "c":
        f.c[index, flat_axis] += h
    elif name == "e":
        f.e[index, flat_axis] += h
    elif name == "v":
        f.v[index, flat_axis] += h
    elif name == "tau":
        f.tau[index] += h
    elif name == "beta":
        b = f.beta[index] + h
        f.log_beta[index] = np.log(b)
    else:
        raise KeyError(name)
    return f


def fd_param_grads(loss_fn, field, names=None, h=1e-6):
    """Central finite differences of ``loss_fn(field) -> scalar`` per parameter."""
    names = names or list(PARAM_SHAPES)
    out = {}
    n = len(field)
    for name in names:
        shape = PARAM_SHAPES[name]
        width = int(np.prod(shape)) if shape else 1
        g = np.zeros((n, width))
        for i in range(n):
            for a in range(width):
                lo = loss_fn(perturb_field(field, name, i, a, -h))
                hi = loss_fn(perturb_field(field, name, i, a, +h))
                g[i, a] = (hi - lo) / (2.0 * h)
        out[name] = g.reshape((n,) + shape)
    return out


def rel_err(a, b, floor=1e-7):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return np.abs(a - b) / denom


def max_rel_err(analytic, fd, floor=1e-7):
    analytic = np.asarray(analytic, dtype=np.float64)
    fd = np.asarray(fd, dtype=np.float64)
    if fd.size == 0:
        return 0.0
    return float(rel_err(analytic, fd, floor=floor).max())
