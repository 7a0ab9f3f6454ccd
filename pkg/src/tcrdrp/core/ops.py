"""Differentiable tensor operations.

Broadcasting is deliberately narrow: elementwise binary ops accept equal
shapes or a scalar operand. Row-vector biases and constant masks have their
own explicit ops (:func:`bias_add`, :func:`apply_mask`).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
from numpy.lib.stride_tricks import sliding_window_view

from tcrdrp.core.tensor import ShapeError, Tensor, active_tape, as_tensor

__all__ = [
    "add", "sub", "mul", "mul_scalar", "square", "relu", "sigmoid",
    "matmul", "einsum", "concat", "reshape", "transpose", "reduce_sum", "reduce_mean",
    "take", "bias_add", "apply_mask", "propagate", "softmax_masked",
    "masked_max", "conv1d", "layer_norm", "BatchNormState", "batch_norm",
    "dropout",
]


def _finish(op: str, inputs: Sequence[Tensor], out: np.ndarray, vjp) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise FloatingPointError(f"{op}: non-finite value in forward output")
    tape = active_tape()
    if tape is None or not any(t.tracked() for t in inputs):
        return Tensor._wrap(out)
    return tape.record(op, inputs, out, vjp)


def _is_scalar(t: Tensor) -> bool:
    return t.ndim == 0


def _check_binary(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum()).reshape(t.shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("add", a, b)
    out = a.values + b.values
    return _finish("add", (a, b), out, lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("sub", a, b)
    out = a.values - b.values
    return _finish("sub", (a, b), out, lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)))


def mul(a, b) -> Tensor:
    """Elementwise product."""
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("mul", a, b)
    av, bv = a.values, b.values
    out = av * bv
    return _finish(
        "mul", (a, b), out,
        lambda g: (_unbroadcast(g * bv, a), _unbroadcast(g * av, b)),
    )


def mul_scalar(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _finish("mul_scalar", (x,), x.values * c, lambda g: (g * c,))


def square(x: Tensor) -> Tensor:
    v = x.values
    return _finish("square", (x,), v * v, lambda g: (2.0 * g * v,))


def relu(x: Tensor) -> Tensor:
    pos = x.values > 0
    return _finish("relu", (x,), np.where(pos, x.values, 0.0), lambda g: (g * pos,))


def sigmoid(x: Tensor) -> Tensor:
    v = x.values
    e = np.exp(-np.abs(v))
    out = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _finish("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` may carry leading batch axes; ``b`` is either a single matrix
    shared across the batch or has exactly the same leading axes as ``a``.
    """
    av, bv = a.values, b.values
    if av.ndim < 2 or bv.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {av.shape} and {bv.shape}")
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {av.shape} @ {bv.shape}")
    if bv.ndim > 2 and av.shape[:-2] != bv.shape[:-2]:
        raise ShapeError(f"matmul: batch axes differ, {av.shape} @ {bv.shape}")
    out = av @ bv

    def vjp(g):
        ga = g @ _swap(bv)
        if bv.ndim == 2:
            k, n = bv.shape
            gb = av.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = _swap(av) @ g
        return ga, gb

    return _finish("matmul", (a, b), out, vjp)


def einsum(subscripts: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand :func:`numpy.einsum` without repeated or ellipsis indices.

    Every index of an operand must appear in the output or in the other
    operand, so both gradients are again plain einsums.
    """
    try:
        lhs, out_idx = subscripts.replace(" ", "").split("->")
        ia, ib = lhs.split(",")
    except ValueError as exc:
        raise ShapeError(f"einsum: expected 'ab,bc->ac' style subscripts, got {subscripts!r}") from exc
    for own, other in ((ia, ib), (ib, ia)):
        if len(set(own)) != len(own) or any(c not in out_idx and c not in other for c in own):
            raise ShapeError(f"einsum: unsupported subscripts {subscripts!r}")
    av, bv = a.values, b.values
    try:
        out = np.einsum(subscripts, av, bv, optimize=True)
    except ValueError as exc:
        raise ShapeError(f"einsum {subscripts!r}: {a.shape} and {b.shape}: {exc}") from exc

    def vjp(g):
        return (np.einsum(f"{out_idx},{ib}->{ia}", g, bv, optimize=True),
                np.einsum(f"{out_idx},{ia}->{ib}", g, av, optimize=True))

    return _finish("einsum", (a, b), np.asarray(out), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: no operands")
    ndim = tensors[0].ndim
    ax = axis % ndim
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != ref[i] for i in range(ndim) if i != ax):
            raise ShapeError(f"concat(axis={axis}): incompatible shapes {[t.shape for t in tensors]}")
    out = np.concatenate([t.values for t in tensors], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return _finish("concat", tuple(tensors), out, lambda g: tuple(np.split(g, bounds, axis=ax)))


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.values.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from exc
    old = x.shape
    return _finish("reshape", (x,), out, lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: bad axes {axes} for shape {x.shape}")
    inv = np.argsort([a % x.ndim for a in axes])
    return _finish("transpose", (x,), np.transpose(x.values, axes), lambda g: (np.transpose(g, inv),))


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.values.sum(axis=axis, keepdims=keepdims)
    shape = x.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _finish("reduce_sum", (x,), np.asarray(out), vjp)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if x.size == 0:
        raise ShapeError("reduce_mean: empty tensor")
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul_scalar(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather slices of ``x`` along ``axis``; repeated indices accumulate gradient."""
    idx = np.asarray(indices, dtype=np.intp)
    ax = axis % x.ndim
    out = np.take(x.values, idx, axis=ax)
    shape = x.shape

    def vjp(g):
        if ax == 0:
            # segment sum as a sparse product; far faster than ufunc.at
            flat = idx.ravel()
            n = flat.size
            scatter = sp.csr_matrix((np.ones(n), (flat, np.arange(n))), shape=(shape[0], n))
            return (np.asarray(scatter @ g.reshape(n, -1)).reshape(shape),)
        gx = np.zeros(shape)
        moved = np.moveaxis(gx, ax, 0)
        gm = np.moveaxis(g, list(range(ax, ax + idx.ndim)), list(range(idx.ndim)))
        np.add.at(moved, idx, gm)
        return (gx,)

    return _finish("take", (x,), out, vjp)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a vector along the last axis of ``x``."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"bias_add: bias {b.shape} does not match last axis of {x.shape}")
    lead = tuple(range(x.ndim - 1))
    return _finish("bias_add", (x, b), x.values + b.values, lambda g: (g, g.sum(axis=lead)))


def apply_mask(x: Tensor, mask) -> Tensor:
    """Multiply by a constant 0/1 array broadcastable to ``x``."""
    m = np.asarray(mask, dtype=np.float64)
    try:
        out = x.values * m
    except ValueError as exc:
        raise ShapeError(f"apply_mask: mask {m.shape} incompatible with {x.shape}") from exc
    if out.shape != x.shape:
        raise ShapeError(f"apply_mask: mask {m.shape} would broadcast {x.shape} to {out.shape}")
    return _finish("apply_mask", (x,), out, lambda g: (g * m,))


def propagate(adjacency, x: Tensor) -> Tensor:
    """Left-multiply by a constant (dense or sparse) matrix."""
    if adjacency.shape[1] != x.shape[0]:
        raise ShapeError(f"propagate: adjacency {adjacency.shape} vs features {x.shape}")
    adj_t = adjacency.T
    out = np.asarray(adjacency @ x.values)
    return _finish("propagate", (x,), out, lambda g: (np.asarray(adj_t @ g),))


def softmax_masked(x: Tensor, mask=None, axis: int = -1) -> Tensor:
    """Softmax along ``axis``; masked-out positions are exactly zero."""
    v = x.values
    if mask is None:
        keep = np.ones(v.shape, dtype=bool)
    else:
        try:
            keep = np.broadcast_to(np.asarray(mask, dtype=bool), v.shape)
        except ValueError as exc:
            raise ShapeError(f"softmax_masked: mask shape incompatible with {v.shape}") from exc
    if not np.all(keep.any(axis=axis)):
        raise ValueError("softmax_masked: a row has every position masked")
    shifted = np.where(keep, v, -np.inf)
    shifted = shifted - shifted.max(axis=axis, keepdims=True)
    e = np.where(keep, np.exp(shifted), 0.0)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _finish("softmax_masked", (x,), out, vjp)


def masked_max(x: Tensor, mask, axis: int = 0) -> Tensor:
    """Max over ``axis`` restricted to positions where ``mask`` is true.

    ``mask`` has the shape of ``x`` truncated after ``axis``; it is broadcast
    over the trailing axes.
    """
    v = x.values
    ax = axis % v.ndim
    m = np.asarray(mask, dtype=bool)
    m = m.reshape(m.shape + (1,) * (v.ndim - m.ndim))
    try:
        m = np.broadcast_to(m, v.shape)
    except ValueError as exc:
        raise ShapeError(f"masked_max: mask incompatible with {v.shape}") from exc
    if not np.all(m.any(axis=ax)):
        raise ValueError("masked_max: empty mask")
    filled = np.where(m, v, -np.inf)
    arg = np.expand_dims(filled.argmax(axis=ax), ax)
    out = np.take_along_axis(v, arg, axis=ax).squeeze(ax)
    shape = v.shape

    def vjp(g):
        gx = np.zeros(shape)
        np.put_along_axis(gx, arg, np.expand_dims(g, ax), axis=ax)
        return (gx,)

    return _finish("masked_max", (x,), out, vjp)


def conv1d(x: Tensor, kernels: Tensor, stride: int = 1) -> Tensor:
    """Valid cross-correlation, no padding.

    ``x`` is ``(channels_in, length)`` or batched ``(batch, channels_in, length)``;
    ``kernels`` is ``(channels_out, channels_in, width)``.
    """
    xv, w = x.values, kernels.values
    unbatched = xv.ndim == 2
    if unbatched:
        xv = xv[None]
    if xv.ndim != 3 or w.ndim != 3:
        raise ShapeError(f"conv1d: expected 3-D input and kernels, got {x.shape} and {kernels.shape}")
    if stride < 1:
        raise ValueError("conv1d: stride must be >= 1")
    bsz, cin, length = xv.shape
    cout, wcin, k = w.shape
    if wcin != cin:
        raise ShapeError(f"conv1d: kernel expects {wcin} channels, input has {cin}")
    if k > length:
        raise ShapeError(f"conv1d: kernel width {k} exceeds input length {length}")
    lout = (length - k) // stride + 1
    patches = sliding_window_view(xv, k, axis=2)[:, :, ::stride, :][:, :, :lout, :]
    cols = patches.transpose(0, 2, 1, 3).reshape(bsz * lout, cin * k)
    wmat = w.reshape(cout, cin * k)
    out = (cols @ wmat.T).reshape(bsz, lout, cout).transpose(0, 2, 1)
    if unbatched:
        out = out[0]

    def vjp(g):
        if unbatched:
            g = g[None]
        g2 = g.transpose(0, 2, 1).reshape(bsz * lout, cout)
        gw = (g2.T @ cols).reshape(cout, cin, k)
        dcols = (g2 @ wmat).reshape(bsz, lout, cin, k)
        gx = np.zeros((bsz, cin, length))
        span = stride * (lout - 1) + 1
        for j in range(k):
            gx[:, :, j:j + span:stride] += dcols[:, :, :, j].transpose(0, 2, 1)
        return (gx[0] if unbatched else gx), gw

    return _finish("conv1d", (x, kernels), np.ascontiguousarray(out), vjp)


def _normalize_grad(g_hat, x_hat, inv_std, axes):
    mean_g = g_hat.mean(axis=axes, keepdims=True)
    mean_gx = (g_hat * x_hat).mean(axis=axes, keepdims=True)
    return inv_std * (g_hat - mean_g - x_hat * mean_gx)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must be ({d},), got {gain.shape}, {bias.shape}")
    v = x.values
    mu = v.mean(axis=-1, keepdims=True)
    var = v.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (v - mu) * inv_std
    gv = gain.values
    out = x_hat * gv + bias.values
    lead = tuple(range(v.ndim - 1))

    def vjp(g):
        gx = _normalize_grad(g * gv, x_hat, inv_std, -1)
        return gx, (g * x_hat).sum(axis=lead), g.sum(axis=lead)

    return _finish("layer_norm", (x, gain, bias), out, vjp)


@dataclass
class BatchNormState:
    """Running statistics for one batch-norm layer (mutated in train mode)."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5

    @classmethod
    def fresh(cls, features: int) -> "BatchNormState":
        return cls(np.zeros(features), np.ones(features))


def batch_norm(x: Tensor, gain: Tensor, bias: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Batch normalization over ``(batch, features)`` or ``(batch, channels, length)``.

    Train mode normalizes with the batch statistics and updates ``state``;
    eval mode uses only the running statistics.
    """
    v = x.values
    if v.ndim not in (2, 3):
        raise ShapeError(f"batch_norm: expected 2-D or 3-D input, got {v.shape}")
    c = v.shape[1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"batch_norm: gain/bias must be ({c},)")
    axes = (0,) if v.ndim == 2 else (0, 2)
    bshape = (1, c) if v.ndim == 2 else (1, c, 1)
    gv = gain.values.reshape(bshape)
    if training:
        if v.shape[0] < 2:
            raise ValueError("batch_norm: train mode needs a batch of at least 2")
        mu = v.mean(axis=axes, keepdims=True)
        var = v.var(axis=axes, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + state.eps)
        x_hat = (v - mu) * inv_std
        m = state.momentum
        state.running_mean = m * state.running_mean + (1 - m) * mu.reshape(c)
        state.running_var = m * state.running_var + (1 - m) * var.reshape(c)

        def vjp(g):
            gx = _normalize_grad(g * gv, x_hat, inv_std, axes)
            return gx, (g * x_hat).sum(axis=axes), g.sum(axis=axes)
    else:
        inv_std = 1.0 / np.sqrt(state.running_var.reshape(bshape) + state.eps)
        x_hat = (v - state.running_mean.reshape(bshape)) * inv_std

        def vjp(g):
            return g * gv * inv_std, (g * x_hat).sum(axis=axes), g.sum(axis=axes)

    out = x_hat * gv + bias.values.reshape(bshape)
    return _finish("batch_norm", (x, gain, bias), out, vjp)


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1 / (1 - rate)`` at train time."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout: train mode needs a random generator")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _finish("dropout", (x,), x.values * keep, lambda g: (g * keep,))
