"""Compositing kernel backends.

The compiled Cython kernel is preferred; a pure-numpy implementation with the
same contract is the fallback. Selection happens once at import and can be
forced with SPLAT4D_BACKEND=python or SPLAT4D_BACKEND=cython.
"""

import os

_requested = os.environ.get("SPLAT4D_BACKEND", "auto").strip().lower()

if _requested in ("auto", "", "cython", "c"):
    try:
        from . import _ckernel as _impl
        BACKEND = "cython"
    except ImportError:
        if _requested in ("cython", "c"):
            raise
        from . import pykernel as _impl
        BACKEND = "python"
elif _requested in ("python", "py", "numpy"):
    from . import pykernel as _impl
    BACKEND = "python"
else:
    raise ValueError(f"unknown SPLAT4D_BACKEND value: {_requested!r}")

composite_tiles = _impl.composite_tiles
composite_tiles_backward = _impl.composite_tiles_backward


def available_backends():
    """Names of importable kernel implementations (for tests and benchmarks)."""
    out = {}
    from . import pykernel
    out["python"] = pykernel
    try:
        from . import _ckernel
        out["cython"] = _ckernel
    except ImportError:
        pass
    return out
