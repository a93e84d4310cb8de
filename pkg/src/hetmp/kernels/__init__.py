"""Edge-level kernels with a compiled core and a numpy fallback.

The compiled module is used when it imports; ``HETMP_BACKEND=python``
forces the fallback. Both backends accumulate in edge order, so they agree
bit for bit.
"""
import os

from . import _fallback

BACKEND = "python"
_impl = _fallback

if os.environ.get("HETMP_BACKEND", "").lower() != "python":
    try:
        from . import _ckernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:
        _impl = _fallback

spmm = _impl.spmm
scatter_add_rows = _impl.scatter_add_rows
edge_dot = _impl.edge_dot
segment_sum = _impl.segment_sum
sample_neighbors = _impl.sample_neighbors

__all__ = [
    "BACKEND",
    "spmm",
    "scatter_add_rows",
    "edge_dot",
    "segment_sum",
    "sample_neighbors",
]
