import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hetmp import kernels
from hetmp.kernels import _fallback

ck = pytest.importorskip("hetmp.kernels._ckernels")


def _same(a, b):
    assert a.dtype == b.dtype and a.shape == b.shape
    np.testing.assert_array_equal(a, b)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 30), st.integers(0, 80), st.integers(1, 9),
       st.sampled_from([np.float32, np.float64]), st.integers(0, 2**32 - 1))
def test_backends_agree_bit_for_bit(n, e, d, dtype, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, d)).astype(dtype)
    y = rng.normal(size=(n, d)).astype(dtype)
    src, dst = rng.integers(0, n, e), rng.integers(0, n, e)
    w = rng.random(e).astype(dtype)
    for weight in (None, w):
        _same(_fallback.spmm(x, src, dst, weight, n), ck.spmm(x, src, dst, weight, n))
    _same(_fallback.scatter_add_rows(x[src], dst, n), ck.scatter_add_rows(x[src], dst, n))
    _same(_fallback.edge_dot(x, y, src, dst), ck.edge_dot(x, y, src, dst))
    _same(_fallback.segment_sum(w, dst, n), ck.segment_sum(w, dst, n))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 20), st.integers(0, 120), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_samplers_agree_and_respect_fanout(n, e, fanout, seed):
    rng = np.random.default_rng(seed)
    dst = np.sort(rng.integers(0, n, e))
    indices = rng.integers(0, n, e)
    indptr = np.concatenate([[0], np.cumsum(np.bincount(dst, minlength=n))])
    targets = rng.permutation(n)[: rng.integers(1, n + 1)]
    keys = rng.random(e)
    a = _fallback.sample_neighbors(indptr, indices, targets, fanout, keys)
    b = ck.sample_neighbors(indptr, indices, targets, fanout, keys)
    _same(a[0], b[0])
    _same(a[1], b[1])
    counts = np.bincount(a[1], minlength=len(targets))
    degs = indptr[targets + 1] - indptr[targets]
    np.testing.assert_array_equal(counts, np.minimum(degs, fanout))


def test_spmm_hand_example():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = kernels.spmm(x, np.array([0, 1, 1]), np.array([0, 0, 1]), np.array([1.0, 0.5, 2.0]), 2)
    np.testing.assert_array_equal(out, [[2.5, 4.0], [6.0, 8.0]])


def test_fallback_selected_by_environment():
    code = "import hetmp.kernels as k; print(k.BACKEND)"
    env = dict(os.environ, HETMP_BACKEND="python")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
    assert kernels.BACKEND in ("cython", "python")
