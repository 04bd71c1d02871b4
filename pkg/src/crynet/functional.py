"""Differentiable building blocks: convolution, dense layers, pooling, softmax.

Feature maps are ``(C, T)`` or batched ``(B, C, T)``.  Every function here
records its own backward rule and reports FLOPs to an active counter using
these conventions:

* ``conv1d``: ``2*C_in*C_out*k*T_out`` per sample, plus ``C_out*T_out`` with bias
* ``dense``: ``2*M*N`` per row, plus ``M`` with bias
* ``softmax``: 5 per element (max, subtract, exp, sum, divide)
* ``max_pool_time``: ``k - 1`` comparisons per output element
* ``batch_norm_1d``: 4 per element in eval mode, 7 in train mode
* averaging pools: 1 per input element
* concatenation, splitting and reshaping: free
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    EmptyTimeError,
    InputTooShortError,
    ShapeMismatchError,
    TimeMismatchError,
)
from .tensor import Tensor, as_tensor, record_flops, record_kinks, relu, sigmoid

__all__ = [
    "conv1d",
    "dense",
    "pointwise",
    "softmax",
    "global_avg_pool_time",
    "max_pool_time",
    "concat_channels",
    "split_channels",
    "batch_norm_1d",
    "same_padding",
]


def same_padding(kernel_size: int, dilation: int = 1) -> tuple[int, int]:
    """Left/right pad that keeps T fixed; the odd element goes right."""
    span = (kernel_size - 1) * dilation
    return span // 2, span - span // 2


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return x.reshape(1, *x.shape), True
    if x.ndim != 3:
        raise ShapeMismatchError(f"expected (C, T) or (B, C, T), got {x.shape}")
    return x, False


def conv1d(x, weight, bias=None, dilation: int = 1, padding: str = "same") -> Tensor:
    """1-D dilated convolution (cross-correlation, as in every DL framework).

    ``out[o, t] = bias[o] + sum_{i, j} weight[o, i, j] * xpad[i, t + j*dilation]``
    """
    x, squeeze = _batched(as_tensor(x))
    weight = as_tensor(weight)
    if weight.ndim != 3 or weight.shape[1] != x.shape[1]:
        raise ShapeMismatchError(
            f"kernel {weight.shape} does not match input channels {x.shape[1]}"
        )
    if dilation < 1:
        raise ValueError("dilation must be >= 1")
    c_out, c_in, k = weight.shape
    span = (k - 1) * dilation
    t_in = x.shape[2]
    if padding == "same":
        left, right = same_padding(k, dilation)
    elif padding == "valid":
        if t_in < span + 1:
            raise InputTooShortError(f"T={t_in} shorter than receptive field {span + 1}")
        left = right = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (left, right))) if left or right else x.data
    t_out = xp.shape[2] - span
    w = weight.data

    out = np.zeros((x.shape[0], c_out, t_out))
    for j in range(k):
        out += np.matmul(w[:, :, j], xp[:, :, j * dilation: j * dilation + t_out])
    flops = 2 * x.shape[0] * c_in * c_out * k * t_out
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise ShapeMismatchError(f"bias {bias.shape} != ({c_out},)")
        out += bias.data[None, :, None]
        flops += x.shape[0] * c_out * t_out
        parents.append(bias)
    record_flops("conv1d", flops)

    def backward_fn(g):
        gx = gw = gb = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, :, j * dilation: j * dilation + t_out] += np.matmul(w[:, :, j].T, g)
            gx = gxp[:, :, left: left + t_in]
        if weight.requires_grad:
            gw = np.empty_like(w)
            for j in range(k):
                gw[:, :, j] = np.einsum("bot,bit->oi", g, xp[:, :, j * dilation: j * dilation + t_out])
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2))
        return (gx, gw, gb)[: len(parents)]

    result = Tensor._from_op(out, parents, backward_fn, "conv1d")
    return result.reshape(c_out, t_out) if squeeze else result


def dense(x, weight, bias=None) -> Tensor:
    """``y = W x + b`` for a vector ``x`` (N,) or a batch (B, N)."""
    x, weight = as_tensor(x), as_tensor(weight)
    vector = x.ndim == 1
    xb = x.data[None, :] if vector else x.data
    if weight.ndim != 2 or xb.ndim != 2 or weight.shape[1] != xb.shape[1]:
        raise ShapeMismatchError(f"dense weight {weight.shape} vs input {x.shape}")
    out = xb @ weight.data.T
    flops = 2 * out.size * weight.shape[1]
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeMismatchError(f"bias {bias.shape} != ({weight.shape[0]},)")
        out = out + bias.data
        flops += out.size
        parents.append(bias)
    record_flops("dense", flops)

    def backward_fn(g):
        g2 = g[None, :] if vector else g
        gx = g2 @ weight.data if x.requires_grad else None
        if gx is not None and vector:
            gx = gx[0]
        gw = g2.T @ xb if weight.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0) if bias.requires_grad else None)
        return grads

    return Tensor._from_op(out[0] if vector else out, parents, backward_fn, "dense")


def pointwise(x, fn: str) -> Tensor:
    if fn == "relu":
        return relu(x)
    if fn == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown pointwise function {fn!r}")


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    record_flops("softmax", 5 * out.size)

    def backward_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(out, (x,), backward_fn, "softmax")


def global_avg_pool_time(x) -> Tensor:
    """Mean over the last (time) axis: (C, T) -> (C,), (B, C, T) -> (B, C)."""
    if np.shape(x.data if isinstance(x, Tensor) else x)[-1] == 0:
        raise EmptyTimeError("cannot average over zero time steps")
    x = as_tensor(x)
    t = x.shape[-1]
    out = x.data.mean(axis=-1)
    record_flops("avg_pool", x.size)

    def backward_fn(g):
        return (np.broadcast_to(g[..., None] / t, x.shape).copy(),)

    return Tensor._from_op(out, (x,), backward_fn, "avg_pool")


def max_pool_time(x, kernel_size: int = 3, stride: int = 1) -> Tensor:
    """Sliding max over time with -inf "same" padding; ties go to the earliest index."""
    if kernel_size < 1 or stride < 1:
        raise ValueError("kernel_size and stride must be >= 1")
    x, squeeze = _batched(as_tensor(x))
    b, c, t = x.shape
    left, right = same_padding(kernel_size)
    xp = np.pad(x.data, ((0, 0), (0, 0), (left, right)), constant_values=-np.inf)
    windows = sliding_window_view(xp, kernel_size, axis=2)[:, :, ::stride]
    idx = windows.argmax(axis=-1)
    if kernel_size > 1:
        top2 = np.sort(windows, axis=-1)[..., -2:]
        record_kinks(top2[..., 1] - top2[..., 0])
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    t_out = out.shape[2]
    src = np.arange(t_out) * stride + idx  # positions in the padded signal
    record_flops("max_pool", (kernel_size - 1) * out.size)

    def backward_fn(g):
        gxp = np.zeros((b * c, xp.shape[2]))
        rows = np.repeat(np.arange(b * c), t_out)
        np.add.at(gxp, (rows, src.reshape(-1)), g.reshape(-1))
        return (gxp.reshape(b, c, -1)[:, :, left: left + t],)

    result = Tensor._from_op(out, (x,), backward_fn, "max_pool")
    return result.reshape(c, t_out) if squeeze else result


def concat_channels(parts: Sequence[Tensor], axis: int = -2) -> Tensor:
    """Stack feature maps along the channel axis, in argument order."""
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeMismatchError("nothing to concatenate")
    ref = parts[0]
    ax = axis % ref.ndim
    for p in parts[1:]:
        if p.ndim != ref.ndim:
            raise ShapeMismatchError("parts differ in rank")
        other = tuple(d for i, d in enumerate(p.shape) if i != ax)
        if other != tuple(d for i, d in enumerate(ref.shape) if i != ax):
            raise TimeMismatchError(f"cannot concatenate {p.shape} with {ref.shape}")
    out = np.concatenate([p.data for p in parts], axis=ax)
    bounds = np.cumsum([p.shape[ax] for p in parts])[:-1]

    def backward_fn(g):
        return np.split(g, bounds, axis=ax)

    return Tensor._from_op(out, parts, backward_fn, "concat")


def split_channels(x, sizes: Sequence[int], axis: int = -2) -> list[Tensor]:
    """Inverse of :func:`concat_channels`."""
    x = as_tensor(x)
    ax = axis % x.ndim
    if sum(sizes) != x.shape[ax]:
        raise ShapeMismatchError(f"sizes {list(sizes)} do not sum to {x.shape[ax]}")
    outs = []
    start = 0
    for size in sizes:
        sl = [slice(None)] * x.ndim
        sl[ax] = slice(start, start + size)
        sl = tuple(sl)

        def backward_fn(g, sl=sl):
            full = np.zeros_like(x.data)
            full[sl] = g
            return (full,)

        outs.append(Tensor._from_op(x.data[sl].copy(), (x,), backward_fn, "split"))
        start += size
    return outs


def batch_norm_1d(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel standardisation over batch and time, then ``gamma * xhat + beta``.

    ``x`` is ``(B, C)`` or ``(B, C, T)``.  In training mode the batch
    statistics are used and the running buffers are updated in place.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim not in (2, 3) or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeMismatchError(f"batch_norm_1d: x {x.shape}, gamma {gamma.shape}")
    axes = (0,) if x.ndim == 2 else (0, 2)
    bshape = (1, -1) if x.ndim == 2 else (1, -1, 1)
    n = x.size // x.shape[1]
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        unbiased = var * n / (n - 1) if n > 1 else var
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mu, var = running_mean.copy(), running_var.copy()
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * inv_std.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)
    record_flops("batch_norm", (7 if training else 4) * x.size)

    def backward_fn(g):
        ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(bshape)
            if training:
                s1 = dxhat.sum(axis=axes, keepdims=True)
                s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
                gx = inv_std.reshape(bshape) * (dxhat - s1 / n - xhat * s2 / n)
            else:
                gx = dxhat * inv_std.reshape(bshape)
        return gx, ggamma, gbeta

    return Tensor._from_op(out, (x, gamma, beta), backward_fn, "batch_norm")
