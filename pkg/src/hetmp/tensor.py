"""Dense 2-D tensors with a reverse-mode tape.

Every value is a 2-D numpy array; vectors are ``(1, n)`` rows and scalars
``(1, 1)``. Operations record themselves on the innermost active
:class:`Tape` whenever one of their inputs requires a gradient. Calling
:func:`backward` replays the tape in exact reverse recording order.

    >>> w = Tensor(np.eye(2), requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_all(matmul(w, Tensor(np.ones((2, 1)))))
    >>> backward(tape, loss)
"""
from __future__ import annotations

import os
from typing import Callable, Sequence

import numpy as np

from . import kernels

_tapes: list["Tape"] = []
_checked = os.environ.get("HETMP_CHECKED", "") == "1"
_corrupted: set[str] = set()


class DimensionError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def set_checked(flag: bool) -> None:
    """Raise NonFiniteError whenever an op produces NaN or Inf."""
    global _checked
    _checked = bool(flag)


def corrupt_backward(op_names) -> None:
    """Test hook: scale the backward rule of the named ops by 1.5."""
    _corrupted.clear()
    _corrupted.update(op_names or ())


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_node", "__weakref__")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise DimensionError(f"tensors are 2-D, got shape {arr.shape}")
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def rows(self):
        return self.data.shape[0]

    @property
    def cols(self):
        return self.data.shape[1]

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return mul_scalar(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full((1, 1), x, dtype=like.dtype))


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; nested tapes shadow outer ones.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple, Callable]] = []

    def __enter__(self):
        _tapes.append(self)
        return self

    def __exit__(self, *exc):
        _tapes.remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def reset(self):
        for out, _, _ in self.records:
            out._node = None
        self.records.clear()


def _record(name: str, out: Tensor, inputs: Sequence[Tensor], rule: Callable) -> Tensor:
    if _checked and not np.all(np.isfinite(out.data)):
        raise NonFiniteError(f"{name} produced a non-finite value")
    if not _tapes or not any(t.requires_grad for t in inputs):
        return out
    tape = _tapes[-1]
    if name in _corrupted:
        inner = rule

        def rule(g, _inner=inner):
            return tuple(None if gi is None else 1.5 * gi for gi in _inner(g))

    out.requires_grad = True
    out._node = (id(tape), len(tape.records))
    tape.records.append((out, tuple(inputs), rule))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf reachable from ``loss``.

    Leaf gradients accumulate across calls; intermediate gradients are
    discarded.
    """
    if loss.shape != (1, 1):
        raise DimensionError(f"loss must be a 1x1 scalar, got {loss.shape}")
    if loss._node is None or loss._node[0] != id(tape):
        raise ValueError("loss was not recorded on this tape")
    tid = id(tape)
    pending = {id(loss): np.ones_like(loss.data)}
    for out, inputs, rule in reversed(tape.records):
        g = pending.pop(id(out), None)
        if g is None:
            continue
        for inp, gi in zip(inputs, rule(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is not None and inp._node[0] == tid:
                key = id(inp)
                if key in pending:
                    pending[key] = pending[key] + gi
                else:
                    pending[key] = gi
            elif inp.grad is None:
                inp.grad = np.array(gi, dtype=inp.dtype)
            else:
                inp.grad = inp.grad + gi


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out = Tensor(a.data + b.data)
    return _record("add", out, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    out = Tensor(a.data - b.data)
    return _record("sub", out, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    out = Tensor(a.data * b.data)
    return _record("mul", out, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def mul_scalar(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    out = Tensor(a.data * c)
    return _record("mul_scalar", out, (a,), lambda g: (g * c,))


def add_n(tensors: Sequence[Tensor]) -> Tensor:
    """Sum equal-shape tensors in the given order."""
    if not tensors:
        raise ValueError("add_n needs at least one tensor")
    shape = tensors[0].shape
    for t in tensors:
        if t.shape != shape:
            raise DimensionError(f"add_n: shape {t.shape} != {shape}")
    acc = tensors[0].data.copy()
    for t in tensors[1:]:
        acc += t.data
    out = Tensor(acc)
    return _record("add_n", out, tuple(tensors), lambda g: tuple(g for _ in tensors))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0).astype(x.dtype, copy=False))
    return _record("relu", out, (x,), lambda g: (g * mask,))


def dropout(x: Tensor, p: float, rng: np.random.Generator | None = None,
            training: bool = True) -> Tensor:
    """Inverted dropout; the mask is a constant of the tape."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0:
        return x
    keep = rng.random(x.shape) >= p
    scale = (keep / (1.0 - p)).astype(x.dtype)
    out = Tensor(x.data * scale)
    return _record("dropout", out, (x,), lambda g: (g * scale,))


# ----------------------------------------------------------------- structural


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)
    return _record("matmul", out, (a, b),
                   lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ w.T (+ bias)`` with ``w`` stored as (out, in)."""
    if x.cols != w.cols:
        raise DimensionError(f"linear: input has {x.cols} cols, weight is {w.shape}")
    y = x.data @ w.data.T
    if bias is not None:
        if bias.shape != (1, w.rows):
            raise DimensionError(f"linear: bias {bias.shape} for weight {w.shape}")
        y = y + bias.data
        out = Tensor(y)
        return _record("linear", out, (x, w, bias),
                       lambda g: (g @ w.data, g.T @ x.data, g.sum(axis=0, keepdims=True)))
    out = Tensor(y)
    return _record("linear", out, (x, w), lambda g: (g @ w.data, g.T @ x.data))


def concat_cols(tensors: Sequence[Tensor]) -> Tensor:
    rows = {t.rows for t in tensors}
    if len(rows) != 1:
        raise DimensionError(f"concat_cols: row counts differ {sorted(rows)}")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=1))
    bounds = np.cumsum([0] + [t.cols for t in tensors])
    return _record("concat_cols", out, tuple(tensors),
                   lambda g: tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(tensors))))


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    cols = {t.cols for t in tensors}
    if len(cols) != 1:
        raise DimensionError(f"concat_rows: column counts differ {sorted(cols)}")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=0))
    bounds = np.cumsum([0] + [t.rows for t in tensors])
    return _record("concat_rows", out, tuple(tensors),
                   lambda g: tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(tensors))))


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    out = Tensor(x.data[:, start:stop])
    width = x.cols

    def rule(g):
        full = np.zeros((g.shape[0], width), dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return _record("slice_cols", out, (x,), rule)


def select_rows(x: Tensor, index) -> Tensor:
    """Gather rows; the adjoint scatters back with summation."""
    index = np.asarray(index, dtype=np.int64)
    n = x.rows
    if len(index) and (index.min() < 0 or index.max() >= n):
        raise IndexError(f"select_rows: index out of range for {n} rows")
    out = Tensor(x.data[index])
    return _record("select_rows", out, (x,),
                   lambda g: (kernels.scatter_add_rows(g, index, n),))


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.array([[x.data.sum()]], dtype=x.dtype))
    return _record("sum_all", out, (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_rows(x: Tensor) -> Tensor:
    """Column-wise mean, shape (1, cols)."""
    n = x.rows
    if n == 0:
        raise DimensionError("mean_rows of an empty tensor")
    out = Tensor(x.data.mean(axis=0, keepdims=True))
    return _record("mean_rows", out, (x,),
                   lambda g: (np.broadcast_to(g / n, x.shape).astype(x.dtype),))


# ---------------------------------------------------------------- graph ops


def spmm(x: Tensor, src, dst, n_out: int, weight=None) -> Tensor:
    """Weighted gather-scatter: ``out[dst[e]] += w[e] * x[src[e]]``.

    ``weight`` may be None (all ones), a constant array of length E, or an
    (E, 1) Tensor, in which case it is differentiated as well.
    """
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    w_t = weight if isinstance(weight, Tensor) else None
    w = w_t.data.reshape(-1) if w_t is not None else weight
    out = Tensor(kernels.spmm(x.data, src, dst, w, n_out))
    n_in = x.rows

    def rule(g):
        gx = kernels.spmm(g, dst, src, w, n_in)
        if w_t is None:
            return (gx,)
        gw = kernels.edge_dot(x.data, g, src, dst).reshape(-1, 1)
        return (gx, gw)

    inputs = (x,) if w_t is None else (x, w_t)
    return _record("spmm", out, inputs, rule)


def normalize_sum(e: Tensor, segment, n_segments: int, tol: float = 1e-12,
                  mode: str = "sum") -> Tensor:
    """Per-segment normalisation of an (E, 1) column.

    ``mode="sum"`` gives ``e_i / sum_j e_j``; a segment whose sum has
    magnitude ``<= tol`` falls back to uniform weights (zero gradient).
    ``mode="softmax"`` exponentiates first.
    """
    segment = np.asarray(segment, dtype=np.int64)
    vals = e.data.reshape(-1)
    count = kernels.segment_sum(np.ones(len(vals), dtype=vals.dtype), segment, n_segments)
    if mode == "softmax":
        seg_max = np.full(n_segments, -np.inf, dtype=vals.dtype)
        np.maximum.at(seg_max, segment, vals)
        ex = np.exp(vals - seg_max[segment])
        denom = kernels.segment_sum(ex, segment, n_segments)
        w = ex / denom[segment]
        out = Tensor(w.reshape(-1, 1))

        def rule(g):
            gv = g.reshape(-1)
            dot = kernels.segment_sum(gv * w, segment, n_segments)
            return ((w * (gv - dot[segment])).reshape(-1, 1),)

        return _record("normalize_softmax", out, (e,), rule)
    if mode != "sum":
        raise ValueError(f"unknown normalisation mode {mode!r}")
    total = kernels.segment_sum(vals, segment, n_segments)
    ok = np.abs(total) > tol
    safe = np.where(ok, total, 1).astype(vals.dtype)
    ok_e = ok[segment]
    w = np.where(ok_e, vals / safe[segment], 1 / np.maximum(count[segment], 1))
    w = w.astype(vals.dtype)
    out = Tensor(w.reshape(-1, 1))

    def rule(g):
        gv = g.reshape(-1)
        dot = kernels.segment_sum(gv * w, segment, n_segments)
        ge = (gv - dot[segment]) / safe[segment]
        return (np.where(ok_e, ge, 0).astype(vals.dtype).reshape(-1, 1),)

    return _record("normalize_sum", out, (e,), rule)


# -------------------------------------------------------------- normalisers


def row_norm(x: Tensor) -> Tensor:
    """Euclidean norm of each row, shape (rows, 1). Subgradient 0 at 0."""
    n = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    out = Tensor(n)
    safe = np.where(n > 0, n, 1)

    def rule(g):
        return (np.where(n > 0, g * x.data / safe, 0).astype(x.dtype),)

    return _record("row_norm", out, (x,), rule)


def l2norm_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Divide each row by ``max(||row||, eps)``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    n = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    big = n > eps
    denom = np.where(big, n, eps).astype(x.dtype)
    y = x.data / denom
    out = Tensor(y)

    def rule(g):
        proj = np.where(big, (g * y).sum(axis=1, keepdims=True), 0)
        return (((g - y * proj) / denom).astype(x.dtype),)

    return _record("l2norm_rows", out, (x,), rule)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row standardisation (population variance), then affine."""
    d = x.cols
    if gamma.shape != (1, d) or beta.shape != (1, d):
        raise DimensionError(f"layernorm: gamma/beta must be (1, {d})")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).astype(x.dtype)
    out = Tensor(xhat * gamma.data + beta.data)

    def rule(g):
        gh = g * gamma.data
        gx = inv * (gh - gh.mean(axis=1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=1, keepdims=True))
        return (gx.astype(x.dtype),
                (g * xhat).sum(axis=0, keepdims=True),
                g.sum(axis=0, keepdims=True))

    return _record("layernorm", out, (x, gamma, beta), rule)


def msgnorm(message: Tensor, node: Tensor, s: Tensor, eps: float = 1e-12) -> Tensor:
    """``s * ||node_row|| * message_row / max(||message_row||, eps)``."""
    if message.shape != node.shape:
        raise DimensionError(f"msgnorm: {message.shape} vs {node.shape}")
    if s.shape != (1, 1) and s.shape != (message.rows, 1):
        raise DimensionError(f"msgnorm: scale must be (1, 1) or per-row, got {s.shape}")
    return mul(mul(l2norm_rows(message, eps), row_norm(node)), s)


# ----------------------------------------------------------------------- loss


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood under a log-sum-exp softmax."""
    targets = np.asarray(targets, dtype=np.int64)
    n, c = logits.shape
    if len(targets) != n:
        raise DimensionError(f"cross_entropy: {n} rows but {len(targets)} targets")
    if n == 0:
        raise DimensionError("cross_entropy of an empty batch")
    if targets.min() < 0 or targets.max() >= c:
        raise IndexError(f"cross_entropy: target outside [0, {c})")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(n)
    loss = -logp[rows, targets].mean()
    out = Tensor(np.array([[loss]], dtype=logits.dtype))

    def rule(g):
        p = np.exp(logp)
        p[rows, targets] -= 1
        return ((p * (g[0, 0] / n)).astype(logits.dtype),)

    return _record("cross_entropy", out, (logits,), rule)
