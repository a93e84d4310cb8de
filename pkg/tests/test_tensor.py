import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hetmp import tensor as T
from hetmp.tensor import Tape, Tensor

from _util import numeric_grad


def _check_op(build, leaves, tol=1e-6):
    """Compare tape gradients of sum(w * build()) with central differences."""
    rng = np.random.default_rng(0)
    probe = None

    def loss():
        nonlocal probe
        out = build()
        if probe is None:
            probe = Tensor(rng.normal(size=out.shape))
        return T.sum_all(T.mul(out, probe))

    for leaf in leaves:
        leaf.grad = None
    with Tape() as tape:
        T.backward(tape, loss())
    for leaf in leaves:
        num = numeric_grad(lambda: loss().item(), leaf)
        np.testing.assert_allclose(leaf.grad, num, rtol=tol, atol=tol)


def _leaf(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


@pytest.mark.parametrize("name", ["add", "sub", "mul", "matmul", "linear", "linear_bias",
                                  "concat_cols", "concat_rows", "slice_cols", "select_rows",
                                  "mean_rows", "relu", "add_n", "broadcast_mul"])
def test_structural_gradients(name):
    rng = np.random.default_rng(1)
    a, b = _leaf(rng, 4, 3), _leaf(rng, 4, 3)
    w, bias = _leaf(rng, 2, 3), _leaf(rng, 1, 2)
    c = _leaf(rng, 3, 5)
    row = _leaf(rng, 1, 3)
    builds = {
        "add": (lambda: T.add(a, b), [a, b]),
        "sub": (lambda: T.sub(a, b), [a, b]),
        "mul": (lambda: T.mul(a, b), [a, b]),
        "matmul": (lambda: T.matmul(a, c), [a, c]),
        "linear": (lambda: T.linear(a, w), [a, w]),
        "linear_bias": (lambda: T.linear(a, w, bias), [a, w, bias]),
        "concat_cols": (lambda: T.concat_cols([a, b]), [a, b]),
        "concat_rows": (lambda: T.concat_rows([a, row]), [a, row]),
        "slice_cols": (lambda: T.slice_cols(a, 1, 3), [a]),
        "select_rows": (lambda: T.select_rows(a, [0, 2, 2, 3]), [a]),
        "mean_rows": (lambda: T.mean_rows(a), [a]),
        "relu": (lambda: T.relu(a), [a]),
        "add_n": (lambda: T.add_n([a, b, a]), [a, b]),
        "broadcast_mul": (lambda: T.mul(a, row), [a, row]),
    }
    build, leaves = builds[name]
    _check_op(build, leaves)


def test_spmm_gradient_including_weights():
    rng = np.random.default_rng(2)
    x = _leaf(rng, 5, 3)
    w = _leaf(rng, 7, 1)
    src = rng.integers(0, 5, 7)
    dst = rng.integers(0, 4, 7)
    _check_op(lambda: T.spmm(x, src, dst, 4, weight=w), [x, w])
    const = rng.random(7)
    _check_op(lambda: T.spmm(x, src, dst, 4, weight=const), [x])


@pytest.mark.parametrize("mode", ["sum", "softmax"])
def test_normalize_gradients(mode):
    rng = np.random.default_rng(3)
    e = Tensor(rng.uniform(0.5, 2.0, (6, 1)), requires_grad=True)
    seg = np.array([0, 0, 1, 1, 1, 2])
    _check_op(lambda: T.normalize_sum(e, seg, 3, mode=mode), [e])


def test_normalizer_gradients():
    rng = np.random.default_rng(4)
    x, node = _leaf(rng, 4, 5), _leaf(rng, 4, 5)
    gamma, beta = _leaf(rng, 1, 5), _leaf(rng, 1, 5)
    s = _leaf(rng, 1, 1)
    _check_op(lambda: T.l2norm_rows(x), [x])
    _check_op(lambda: T.row_norm(x), [x])
    _check_op(lambda: T.layernorm(x, gamma, beta), [x, gamma, beta])
    _check_op(lambda: T.msgnorm(x, node, s), [x, node, s])


def test_cross_entropy_value_and_gradient():
    rng = np.random.default_rng(5)
    z = _leaf(rng, 4, 3)
    y = np.array([0, 2, 1, 2])
    p = np.exp(z.data) / np.exp(z.data).sum(axis=1, keepdims=True)
    expected = -np.mean(np.log(p[np.arange(4), y]))
    assert T.cross_entropy(z, y).item() == pytest.approx(expected, rel=1e-12)
    with Tape() as tape:
        T.backward(tape, T.cross_entropy(z, y))
    onehot = np.eye(3)[y]
    np.testing.assert_allclose(z.grad, (p - onehot) / 4, atol=1e-12)


def test_sum_normalization_zero_denominator_falls_back_to_uniform():
    e = Tensor(np.array([[1.0], [-1.0], [2.0]]), requires_grad=True)
    with Tape() as tape:
        a = T.normalize_sum(e, [0, 0, 1], 2)
        T.backward(tape, T.sum_all(T.mul(a, Tensor(np.array([[1.0], [3.0], [1.0]])))))
    np.testing.assert_array_equal(a.data.ravel(), [0.5, 0.5, 1.0])
    np.testing.assert_array_equal(e.grad[:2], 0.0)


def test_softmax_normalization_is_shift_invariant():
    e = np.array([[1.0], [2.0], [3.0]])
    a = T.normalize_sum(Tensor(e), [0, 0, 0], 1, mode="softmax").data
    b = T.normalize_sum(Tensor(e + 100), [0, 0, 0], 1, mode="softmax").data
    np.testing.assert_allclose(a, b, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_l2norm_rows_unit_or_zero(rows, cols, seed):
    x = np.random.default_rng(seed).normal(size=(rows, cols))
    x[0] = 0.0
    y = T.l2norm_rows(Tensor(x)).data
    norms = np.linalg.norm(y, axis=1)
    assert norms[0] == 0.0
    np.testing.assert_allclose(norms[1:], 1.0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(2, 8), st.integers(0, 2**32 - 1))
def test_layernorm_standardizes_rows(rows, cols, seed):
    x = np.random.default_rng(seed).normal(size=(rows, cols)) * 5 + 3
    y = T.layernorm(Tensor(x), Tensor(np.ones((1, cols))), Tensor(np.zeros((1, cols))), eps=0.0).data
    np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=1), 1.0, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 8), st.floats(0.1, 3.0), st.integers(0, 2**32 - 1))
def test_msgnorm_output_norm_is_scaled_node_norm(rows, cols, s, seed):
    rng = np.random.default_rng(seed)
    m, z = rng.normal(size=(rows, cols)), rng.normal(size=(rows, cols))
    out = T.msgnorm(Tensor(m), Tensor(z), Tensor(np.array([[s]]))).data
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), s * np.linalg.norm(z, axis=1), rtol=1e-12)


def test_leaf_gradients_accumulate_and_shapes_are_checked():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    for _ in range(2):
        with Tape() as tape:
            T.backward(tape, T.sum_all(x))
    np.testing.assert_array_equal(x.grad, 2.0)
    with pytest.raises(T.DimensionError):
        with Tape() as tape:
            T.backward(tape, T.mul_scalar(x, 1.0))
    with pytest.raises(T.DimensionError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(T.DimensionError):
        Tensor(np.ones((2, 2, 2)))


def test_backward_requires_loss_from_same_tape():
    x = Tensor(np.ones((1, 1)), requires_grad=True)
    with Tape():
        loss = T.sum_all(x)
    with pytest.raises(ValueError):
        with Tape() as other:
            T.backward(other, loss)


def test_no_tape_records_nothing():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    y = T.relu(x)
    assert y._node is None


def test_checked_mode_raises_on_non_finite():
    T.set_checked(True)
    try:
        with pytest.raises(T.NonFiniteError):
            T.mul_scalar(Tensor(np.array([[np.nan]])), 1.0)
    finally:
        T.set_checked(False)


def test_dropout_scaling_and_eval_passthrough():
    x = Tensor(np.ones((200, 50)))
    y = T.dropout(x, 0.5, np.random.default_rng(0))
    assert set(np.unique(y.data)) <= {0.0, 2.0}
    assert abs(y.data.mean() - 1.0) < 0.05
    assert T.dropout(x, 0.5, None, training=False) is x
    with pytest.raises(ValueError):
        T.dropout(x, 1.0, np.random.default_rng(0))
