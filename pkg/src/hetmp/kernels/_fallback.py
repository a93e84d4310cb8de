"""Pure numpy implementations of the edge-level kernels.

Every routine accumulates in edge order so results match the compiled
backend bit for bit.
"""
import numpy as np


def spmm(x, src, dst, weight, n_out):
    """out[dst[e]] += weight[e] * x[src[e]] for every edge e."""
    out = np.zeros((n_out, x.shape[1]), dtype=x.dtype)
    if len(src) == 0:
        return out
    rows = x[src]
    if weight is not None:
        rows = rows * weight.astype(x.dtype, copy=False)[:, None]
    np.add.at(out, dst, rows)
    return out


def scatter_add_rows(x, index, n_out):
    out = np.zeros((n_out, x.shape[1]), dtype=x.dtype)
    if len(index):
        np.add.at(out, index, x)
    return out


def edge_dot(a, b, src, dst):
    """Per-edge inner product <a[src[e]], b[dst[e]]>."""
    out = np.zeros(len(src), dtype=a.dtype)
    if len(src) == 0:
        return out
    lhs, rhs = a[src], b[dst].astype(a.dtype, copy=False)
    # column by column so the summation order matches the compiled loop
    for k in range(a.shape[1]):
        out += lhs[:, k] * rhs[:, k]
    return out


def segment_sum(values, index, n_out):
    out = np.zeros(n_out, dtype=values.dtype)
    if len(index):
        np.add.at(out, index, values)
    return out


def sample_neighbors(indptr, indices, targets, fanout, keys):
    """Pick up to ``fanout`` in-neighbors for every target.

    ``keys`` holds one uniform draw per candidate edge, laid out target by
    target in CSR order. Segments longer than ``fanout`` keep the edges
    with the smallest keys (ties by position); kept edges stay in CSR
    order. Returns global source ids and the local target position of
    each kept edge.
    """
    starts = indptr[targets]
    degs = indptr[targets + 1] - starts
    total = int(degs.sum())
    if total == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    seg = np.repeat(np.arange(len(targets), dtype=np.int64), degs)
    offsets = np.cumsum(degs) - degs
    pos = np.arange(total, dtype=np.int64) - np.repeat(offsets, degs)
    edge_ids = np.repeat(starts, degs) + pos
    keep = np.ones(total, dtype=bool)
    long_seg = degs[seg] > fanout
    if long_seg.any():
        order = np.lexsort((pos, keys[:total], seg))
        rank = np.empty(total, dtype=np.int64)
        sorted_seg = seg[order]
        first = np.searchsorted(sorted_seg, sorted_seg, side="left")
        rank[order] = np.arange(total, dtype=np.int64) - first
        keep = ~long_seg | (rank < fanout)
    return indices[edge_ids[keep]].astype(np.int64), seg[keep]
