"""Timing comparison of the compiled and pure-numpy compositing kernels.

Both backends implement the same tile compositing contract; this drives them
through the full render + backward path on random fields of growing size and
prints a table with per-call times and the compiled-kernel speedup.

    python benchmarks/bench_backends.py [--sizes 2000,10000,30000] [--res 64]
"""

import argparse
import time

import numpy as np

from splat4d import backend
from splat4d.rasterizer import render, render_backward
from splat4d.scene import GaussianField, look_at_camera


def random_field(n, seed=0):
    rng = np.random.default_rng(seed)
    mu = rng.uniform([-2.5, -2.0, 0.0], [2.5, 2.0, 2.5], size=(n, 3))
    q = rng.normal(size=(n, 4))
    return GaussianField.from_constrained(
        mu=mu, q=q / np.linalg.norm(q, axis=1, keepdims=True),
        s=rng.uniform(0.02, 0.12, size=(n, 3)),
        o=rng.uniform(0.2, 0.95, size=n),
        c=rng.uniform(size=(n, 3)), e=rng.normal(size=(n, 8)) * 0.3,
        v=rng.normal(size=(n, 3)) * 0.2, tau=rng.uniform(size=n),
        beta=rng.uniform(0.1, 2.0, size=n))


def camera(res):
    return look_at_camera((0.0, -6.0, 1.5), (0.0, 0.0, 1.0), (0.0, 0.0, 1.0),
                          fx=1.1 * res, fy=1.1 * res, cx=res / 2.0,
                          cy=res / 2.0, width=res, height=res, t=0.5)


def best_of(fn, repeats=3):
    fn()   # warmup
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def with_impl(impl):
    backend.composite_tiles = impl.composite_tiles
    backend.composite_tiles_backward = impl.composite_tiles_backward


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--sizes", default="2000,10000,30000")
    ap.add_argument("--res", type=int, default=64)
    args = ap.parse_args()
    sizes = [int(s) for s in args.sizes.split(",")]

    impls = backend.available_backends()
    if "cython" not in impls:
        print("compiled kernel not importable; timing python only")
    cam = camera(args.res)
    d_color = np.ones((args.res, args.res, 3))

    print(f"render {args.res}x{args.res}, best of 3 "
          f"(default backend: {backend.BACKEND})")
    print(f"{'n':>7} {'step':>12} "
          + " ".join(f"{name + ' [ms]':>13}" for name in impls)
          + ("  speedup" if len(impls) > 1 else ""))
    saved = (backend.composite_tiles, backend.composite_tiles_backward)
    try:
        for n in sizes:
            field = random_field(n)
            rows = {"forward": {}, "fwd+bwd": {}}
            for name, impl in impls.items():
                with_impl(impl)
                rows["forward"][name] = best_of(lambda: render(field, cam))

                def step():
                    _, cache = render(field, cam, with_cache=True)
                    render_backward(cache, d_color=d_color)
                rows["fwd+bwd"][name] = best_of(step)
            for step_name, vals in rows.items():
                line = f"{n:>7} {step_name:>12} " + " ".join(
                    f"{1e3 * vals[name]:>13.2f}" for name in impls)
                if "cython" in vals and "python" in vals:
                    line += f"  {vals['python'] / vals['cython']:>6.1f}x"
                print(line)
    finally:
        backend.composite_tiles, backend.composite_tiles_backward = saved


if __name__ == "__main__":
    main()
