# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled edge-level kernels. Same contracts as ``_fallback``."""
import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef fused real:
    float
    double


def _spmm(const real[:, ::1] x, const long long[::1] src, const long long[::1] dst,
          const real[::1] w, bint has_w, real[:, ::1] out):
    cdef Py_ssize_t e, k, s, t
    cdef Py_ssize_t n_edges = src.shape[0]
    cdef Py_ssize_t d = x.shape[1]
    cdef real c
    with nogil:
        for e in range(n_edges):
            s = src[e]
            t = dst[e]
            if has_w:
                c = w[e]
                for k in range(d):
                    out[t, k] += c * x[s, k]
            else:
                for k in range(d):
                    out[t, k] += x[s, k]


def spmm(x, src, dst, weight, n_out):
    x = np.ascontiguousarray(x)
    out = np.zeros((n_out, x.shape[1]), dtype=x.dtype)
    if len(src) == 0:
        return out
    src = np.ascontiguousarray(src, dtype=np.int64)
    dst = np.ascontiguousarray(dst, dtype=np.int64)
    if weight is None:
        w = np.zeros(1, dtype=x.dtype)
        _spmm(x, src, dst, w, False, out)
    else:
        w = np.ascontiguousarray(weight, dtype=x.dtype)
        _spmm(x, src, dst, w, True, out)
    return out


def scatter_add_rows(x, index, n_out):
    x = np.ascontiguousarray(x)
    out = np.zeros((n_out, x.shape[1]), dtype=x.dtype)
    if len(index) == 0:
        return out
    src = np.arange(len(index), dtype=np.int64)
    _spmm(x, src, np.ascontiguousarray(index, dtype=np.int64),
          np.zeros(1, dtype=x.dtype), False, out)
    return out


def _edge_dot(const real[:, ::1] a, const real[:, ::1] b, const long long[::1] src,
              const long long[::1] dst, real[::1] out):
    cdef Py_ssize_t e, k, s, t
    cdef Py_ssize_t d = a.shape[1]
    cdef real acc
    with nogil:
        for e in range(src.shape[0]):
            s = src[e]
            t = dst[e]
            acc = 0
            for k in range(d):
                acc = acc + a[s, k] * b[t, k]
            out[e] = acc


def edge_dot(a, b, src, dst):
    a = np.ascontiguousarray(a)
    b = np.ascontiguousarray(b, dtype=a.dtype)
    out = np.zeros(len(src), dtype=a.dtype)
    if len(src):
        _edge_dot(a, b, np.ascontiguousarray(src, dtype=np.int64),
                  np.ascontiguousarray(dst, dtype=np.int64), out)
    return out


def _segment_sum(const real[::1] values, const long long[::1] index, real[::1] out):
    cdef Py_ssize_t i
    with nogil:
        for i in range(index.shape[0]):
            out[index[i]] += values[i]


def segment_sum(values, index, n_out):
    values = np.ascontiguousarray(values)
    out = np.zeros(n_out, dtype=values.dtype)
    if len(index):
        _segment_sum(values, np.ascontiguousarray(index, dtype=np.int64), out)
    return out


def _sample(const long long[::1] indptr, const long long[::1] indices,
            const long long[::1] targets, Py_ssize_t fanout, const double[::1] keys,
            long long[::1] out_src, long long[::1] out_dst, unsigned char[::1] mask):
    cdef Py_ssize_t i, j, k, start, deg, base = 0, n_out = 0, best
    cdef Py_ssize_t picked
    with nogil:
        for i in range(targets.shape[0]):
            start = indptr[targets[i]]
            deg = indptr[targets[i] + 1] - start
            if deg <= fanout:
                for j in range(deg):
                    out_src[n_out] = indices[start + j]
                    out_dst[n_out] = i
                    n_out += 1
            else:
                for j in range(deg):
                    mask[j] = 0
                # repeated minimum selection; fanout is small
                for picked in range(fanout):
                    best = -1
                    for j in range(deg):
                        if mask[j]:
                            continue
                        if best < 0 or keys[base + j] < keys[base + best]:
                            best = j
                    mask[best] = 1
                for j in range(deg):
                    if mask[j]:
                        out_src[n_out] = indices[start + j]
                        out_dst[n_out] = i
                        n_out += 1
            base += deg
    return n_out


def sample_neighbors(indptr, indices, targets, fanout, keys):
    indptr = np.ascontiguousarray(indptr, dtype=np.int64)
    indices = np.ascontiguousarray(indices, dtype=np.int64)
    targets = np.ascontiguousarray(targets, dtype=np.int64)
    keys = np.ascontiguousarray(keys, dtype=np.float64)
    degs = indptr[targets + 1] - indptr[targets]
    total = int(degs.sum())
    if total == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    max_deg = int(degs.max())
    out_src = np.empty(total, dtype=np.int64)
    out_dst = np.empty(total, dtype=np.int64)
    mask = np.zeros(max_deg, dtype=np.uint8)
    n = _sample(indptr, indices, targets, fanout, keys, out_src, out_dst, mask)
    return out_src[:n], out_dst[:n]
