"""Backend dispatch for the hot numeric kernels.

Numba-jitted kernels are the default. Set ``GBX_BACKEND=numpy`` to force the
pure-numpy fallbacks: same results within float tolerance, no JIT warmup.
``gbx bench`` compares the two backends on representative workloads.
"""
import os

from . import kernels_numpy

_requested = os.environ.get("GBX_BACKEND", "numba").lower()
if _requested not in ("numba", "numpy"):
    raise ValueError(f"GBX_BACKEND must be 'numba' or 'numpy', got {_requested!r}")

BACKEND = "numpy"
if _requested == "numba":
    try:
        from . import kernels_numba as _impl
        BACKEND = "numba"
    except ImportError:
        _impl = kernels_numpy
else:
    _impl = kernels_numpy

im2col = _impl.im2col
col2im = _impl.col2im
trace_rays = _impl.trace_rays
shade_hits = _impl.shade_hits


def get_backends():
    """All importable backend modules, keyed by name (for benchmarks/tests)."""
    out = {"numpy": kernels_numpy}
    try:
        from . import kernels_numba
        out["numba"] = kernels_numba
    except ImportError:
        pass
    return out
