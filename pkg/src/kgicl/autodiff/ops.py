"""Differentiable ops used by the prompt encoder and the KG reasoner.

Every op takes Tensors (numpy arrays are promoted to constants on the
tape of the first Tensor argument) and records itself on that tape.
Reductions accumulate in float64 and cast back to the tape dtype.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .tape import ShapeError, Tape, Tensor

LN_EPS = 1e-5


def _tape(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Tensor) and x.tape is not None:
            return x.tape
    raise ValueError("no tape among op inputs")


def _lift(tape: Tape, x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return tape.constant(x)


def _check(cond: bool, op: str, *shapes):
    if not cond:
        raise ShapeError(f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}")


def _index_add(n: int, idx: np.ndarray, vals: np.ndarray) -> np.ndarray:
    out = np.zeros((n,) + vals.shape[1:], dtype=np.float64)
    np.add.at(out, idx, vals.astype(np.float64, copy=False))
    return out


def matmul(a, b, trans_b: bool = False) -> Tensor:
    tape = _tape(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    A, B = a.data, b.data
    _check(A.ndim == 2 and B.ndim == 2, "matmul", A.shape, B.shape)
    inner = B.shape[1] if trans_b else B.shape[0]
    _check(A.shape[1] == inner, "matmul", A.shape, B.shape)
    out = A @ B.T if trans_b else A @ B

    def backward(g):
        if trans_b:
            return g @ B, g.T @ A
        return g @ B.T, A.T @ g

    return tape.record("matmul", out, (a, b), backward)


def add(a, b) -> Tensor:
    tape = _tape(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _check(a.shape == b.shape, "add", a.shape, b.shape)
    return tape.record("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    tape = _tape(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _check(a.shape == b.shape, "sub", a.shape, b.shape)
    return tape.record("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def scalar_mul(a: Tensor, c: float) -> Tensor:
    tape = _tape(a)
    return tape.record("scalar_mul", a.data * c, (a,), lambda g: (g * c,))


def scale_rows(a, col) -> Tensor:
    """Multiply each row of an (n, d) tensor by the matching entry of an (n, 1) column."""
    tape = _tape(a, col)
    a, col = _lift(tape, a), _lift(tape, col)
    A, C = a.data, col.data
    _check(A.ndim == 2 and C.shape == (A.shape[0], 1), "scale_rows", A.shape, C.shape)

    def backward(g):
        return g * C, np.sum(g.astype(np.float64) * A, axis=1, keepdims=True)

    return tape.record("scale_rows", A * C, (a, col), backward)


def concat_lastdim(xs: Sequence) -> Tensor:
    tape = _tape(*xs)
    xs = [_lift(tape, x) for x in xs]
    lead = xs[0].shape[:-1]
    _check(all(x.shape[:-1] == lead for x in xs), "concat_lastdim", *[x.shape for x in xs])
    widths = [x.shape[-1] for x in xs]
    splits = np.cumsum(widths)[:-1]
    out = np.concatenate([x.data for x in xs], axis=-1)
    return tape.record("concat_lastdim", out, xs, lambda g: np.split(g, splits, axis=-1))


def relu(x: Tensor) -> Tensor:
    tape = _tape(x)
    X = x.data
    return tape.record("relu", np.maximum(X, 0), (x,), lambda g: (g * (X > 0),))


def sigmoid(x: Tensor) -> Tensor:
    tape = _tape(x)
    X = x.data.astype(np.float64)
    y = np.empty_like(X)
    pos = X >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-X[pos]))
    ex = np.exp(X[~pos])
    y[~pos] = ex / (1.0 + ex)
    return tape.record("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def layer_norm(x, gain, bias, eps: float = LN_EPS) -> Tensor:
    """Row-wise normalisation over the last dim with learnable gain and bias of shape (d,)."""
    tape = _tape(x, gain, bias)
    x, gain, bias = _lift(tape, x), _lift(tape, gain), _lift(tape, bias)
    X = x.data.astype(np.float64)
    d = X.shape[-1]
    _check(X.ndim == 2 and gain.shape == (d,) and bias.shape == (d,),
           "layer_norm", X.shape, gain.shape, bias.shape)
    mu = X.mean(axis=1, keepdims=True)
    xc = X - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    G = gain.data.astype(np.float64)
    out = xhat * G + bias.data

    def backward(g):
        g = g.astype(np.float64)
        gx_hat = g * G
        gx = inv * (gx_hat - gx_hat.mean(axis=1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=1, keepdims=True))
        return gx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return tape.record("layer_norm", out, (x, gain, bias), backward)


def segment_max(x: Tensor, seg: np.ndarray, num_segments: int) -> Tensor:
    """Column-wise max of rows sharing a segment id; empty segments give zeros.

    Ties route the gradient to the first row (lowest index) attaining the max.
    """
    tape = _tape(x)
    X = x.data
    seg = np.asarray(seg, dtype=np.int64)
    _check(X.ndim == 2 and seg.shape == (X.shape[0],), "segment_max", X.shape, seg.shape)
    out = np.zeros((num_segments, X.shape[1]), dtype=X.dtype)
    if X.shape[0] == 0:
        return tape.record("segment_max", out, (x,), lambda g: (np.zeros_like(X),))
    order = np.argsort(seg, kind="stable")
    sorted_seg = seg[order]
    starts = np.flatnonzero(np.r_[True, sorted_seg[1:] != sorted_seg[:-1]])
    present = sorted_seg[starts]
    Xs = X[order]
    mx = np.maximum.reduceat(Xs, starts, axis=0)
    out[present] = mx
    # first row (in original index order) hitting the max, per (segment, column)
    hit = Xs == out[sorted_seg]
    big = np.iinfo(np.int64).max
    cand = np.where(hit, order[:, None], big)
    arg = np.minimum.reduceat(cand, starts, axis=0)

    def backward(g):
        gx = np.zeros(X.shape, dtype=np.float64)
        cols = np.broadcast_to(np.arange(X.shape[1]), arg.shape)
        np.add.at(gx, (arg, cols), g[present])
        return (gx,)

    return tape.record("segment_max", out, (x,), backward)


def segment_mean(x: Tensor, seg: np.ndarray, num_segments: int) -> Tensor:
    tape = _tape(x)
    X = x.data
    seg = np.asarray(seg, dtype=np.int64)
    _check(X.ndim == 2 and seg.shape == (X.shape[0],), "segment_mean", X.shape, seg.shape)
    counts = np.bincount(seg, minlength=num_segments).astype(np.float64)
    total = _index_add(num_segments, seg, X)
    denom = np.maximum(counts, 1.0)[:, None]
    out = total / denom

    def backward(g):
        return ((g / denom)[seg],)

    return tape.record("segment_mean", out, (x,), backward)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    tape = _tape(x)
    X = x.data
    idx = np.asarray(idx, dtype=np.int64)
    _check(idx.ndim == 1 and (idx.size == 0 or (idx.min() >= 0 and idx.max() < X.shape[0])),
           "gather_rows", X.shape, idx.shape)
    n = X.shape[0]
    return tape.record("gather_rows", X[idx], (x,), lambda g: (_index_add(n, idx, g),))


def scatter_rows(x: Tensor, idx: np.ndarray, num_rows: int) -> Tensor:
    """Sum rows of ``x`` into a zero matrix of ``num_rows`` rows at ``idx``."""
    tape = _tape(x)
    X = x.data
    idx = np.asarray(idx, dtype=np.int64)
    _check(X.ndim == 2 and idx.shape == (X.shape[0],)
           and (idx.size == 0 or (idx.min() >= 0 and idx.max() < num_rows)),
           "scatter_rows", X.shape, idx.shape)
    out = _index_add(num_rows, idx, X)
    return tape.record("scatter_rows", out, (x,), lambda g: (g[idx],))


def reduce_logsumexp(x: Tensor) -> Tensor:
    """Row-wise log-sum-exp of an (n, m) tensor, returning shape (n,)."""
    tape = _tape(x)
    X = x.data.astype(np.float64)
    _check(X.ndim == 2 and X.shape[1] > 0, "reduce_logsumexp", X.shape)
    m = X.max(axis=1, keepdims=True)
    e = np.exp(X - m)
    s = e.sum(axis=1, keepdims=True)
    out = (m + np.log(s))[:, 0]
    soft = e / s
    return tape.record("reduce_logsumexp", out, (x,), lambda g: (g[:, None] * soft,))


def dot(a, b) -> Tensor:
    """Full contraction sum(a * b) to a scalar."""
    tape = _tape(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _check(a.shape == b.shape, "dot", a.shape, b.shape)
    A, B = a.data, b.data
    out = np.asarray(np.sum(A.astype(np.float64) * B))

    def backward(g):
        return g * B, g * A

    return tape.record("dot", out, (a, b), backward)


def reshape(x: Tensor, shape) -> Tensor:
    tape = _tape(x)
    X = x.data
    _check(int(np.prod(shape)) == X.size, "reshape", X.shape, tuple(shape))
    return tape.record("reshape", X.reshape(shape), (x,), lambda g: (g.reshape(X.shape),))


OPS = {
    "matmul": matmul, "add": add, "sub": sub, "scalar_mul": scalar_mul,
    "scale_rows": scale_rows, "concat_lastdim": concat_lastdim, "relu": relu,
    "sigmoid": sigmoid, "layer_norm": layer_norm, "segment_max": segment_max,
    "segment_mean": segment_mean, "gather_rows": gather_rows,
    "scatter_rows": scatter_rows, "reduce_logsumexp": reduce_logsumexp,
    "dot": dot, "reshape": reshape,
}


def forward_op(kind: str, *inputs, **attrs) -> Tensor:
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **attrs)
