"""Attention blocks of the improved ECAPA-TDNN.

All blocks take feature maps shaped ``(B, C, T)`` (a bare ``(C, T)`` map is
accepted and returned unbatched).  Channel gates are vectors of shape
``(B, C)``; the temporal attention map is kept time-last as ``(B, 1, T)``.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import functional as F
from .errors import HeadIndivisibleError, ScaleIndivisibleError, ShapeMismatchError
from .nn import Conv1d, ConvReluBN, Flops, Module, kaiming_uniform
from .tensor import Tensor, as_tensor, clamp_min, parameter


def _as_batch(x) -> tuple[Tensor, bool]:
    x = as_tensor(x)
    if x.ndim == 2:
        return x.reshape(1, *x.shape), True
    if x.ndim != 3:
        raise ShapeMismatchError(f"expected (C, T) or (B, C, T), got {x.shape}")
    return x, False


def _unbatch(x: Tensor, squeeze: bool) -> Tensor:
    return x.reshape(x.shape[1:]) if squeeze else x


def _numel(shape) -> int:
    return int(np.prod(shape))


class SEBlock(Module):
    """Squeeze-and-excitation: time-mean, bottleneck MLP, sigmoid gate, channel rescale.

    ``w1`` is ``(C/r, C)`` and ``w2`` is ``(C, C/r)``; neither carries a bias.
    """

    def __init__(self, channels: int, reduction: int = 4,
                 rng: np.random.Generator | None = None) -> None:
        super().__init__()
        if channels % reduction:
            raise ShapeMismatchError(f"channels {channels} not divisible by r={reduction}")
        rng = rng or np.random.default_rng(0)
        hidden = channels // reduction
        self.reduction = reduction
        self.w1 = parameter(kaiming_uniform(rng, (hidden, channels), channels))
        self.w2 = parameter(kaiming_uniform(rng, (channels, hidden), hidden))

    @property
    def channels(self) -> int:
        return self.w1.shape[1]

    def gate(self, x) -> Tensor:
        """Channel weights ``s = sigmoid(W2 relu(W1 z))`` with ``z`` the time-mean, shape (B, C)."""
        x, _ = _as_batch(x)
        if x.shape[1] != self.channels:
            raise ShapeMismatchError(f"SE expects {self.channels} channels, got {x.shape[1]}")
        z = F.global_avg_pool_time(x)
        return F.dense(F.dense(z, self.w1).relu(), self.w2).sigmoid()

    def forward(self, x) -> Tensor:
        x, squeeze = _as_batch(x)
        s = self.gate(x)
        return _unbatch(x * s.reshape(*s.shape, 1), squeeze)

    def analytic_flops(self, shape):
        b, c, t = shape
        h = self.w1.shape[0]
        flops = Flops(avg_pool=b * c * t, dense=2 * b * h * c + 2 * b * c * h,
                      relu=b * h, sigmoid=b * c, mul=b * c * t)
        return flops, tuple(shape)


def se_block(x, params: SEBlock) -> Tensor:
    return params(x)


def rse_block(x, params: SEBlock) -> Tensor:
    """Residual SE: ``x + SE(x)``."""
    return x + se_block(x, params)


class MultiScaleChannelAttention(Module):
    """MCA: parallel dilated convolutions plus a max-pool branch, gated channel-wise.

    ``entry`` (1x1) feeds the three dilated branches; ``pool_proj`` (1x1) feeds
    the max-pool branch.  The four C-channel outputs are concatenated to 4C and
    rescaled by a 4C-wide sigmoid gate.
    """

    def __init__(self, in_channels: int, channels: int,
                 kernel_sizes: Sequence[int] = (3, 5, 7),
                 dilations: Sequence[int] = (1, 2, 3),
                 reduction: int = 4, pool_size: int = 3,
                 rng: np.random.Generator | None = None) -> None:
        super().__init__()
        if len(kernel_sizes) != len(dilations):
            raise ShapeMismatchError("one dilation per branch kernel is required")
        rng = rng or np.random.default_rng(0)
        width = (len(kernel_sizes) + 1) * channels
        if width % reduction:
            raise ShapeMismatchError(f"gate width {width} not divisible by r={reduction}")
        self.pool_size = pool_size
        self.gate_bypass = False
        self.entry = Conv1d(in_channels, channels, 1, rng=rng)
        self.branches = [Conv1d(channels, channels, k, d, rng=rng)
                         for k, d in zip(kernel_sizes, dilations)]
        self.pool_proj = Conv1d(in_channels, channels, 1, rng=rng)
        self.w1 = parameter(kaiming_uniform(rng, (width // reduction, width), width))
        self.w2 = parameter(kaiming_uniform(rng, (width, width // reduction), width // reduction))

    def features(self, x: Tensor) -> Tensor:
        """The concatenated multi-scale map ``[F3, F5, F7, M]`` before gating."""
        e = self.entry(x)
        parts = [branch(e) for branch in self.branches]
        parts.append(F.max_pool_time(self.pool_proj(x), self.pool_size))
        return F.concat_channels(parts)

    def gate(self, cat: Tensor) -> Tensor:
        z = F.global_avg_pool_time(cat)
        return F.dense(F.dense(z, self.w1).relu(), self.w2).sigmoid()

    def forward(self, x) -> Tensor:
        x, squeeze = _as_batch(x)
        cat = self.features(x)
        if self.gate_bypass:
            return _unbatch(cat, squeeze)
        s = self.gate(cat)
        return _unbatch(cat * s.reshape(*s.shape, 1), squeeze)

    def analytic_flops(self, shape):
        b, _, t = shape
        flops, (_, c, _) = self.entry.analytic_flops(shape)
        for branch in self.branches:
            flops += branch.analytic_flops((b, c, t))[0]
        flops += self.pool_proj.analytic_flops(shape)[0]
        flops["max_pool"] += (self.pool_size - 1) * b * c * t
        width = c * (len(self.branches) + 1)
        if not self.gate_bypass:
            hidden = self.w1.shape[0]
            flops += Flops(avg_pool=b * width * t, dense=4 * b * hidden * width,
                           relu=b * hidden, sigmoid=b * width, mul=b * width * t)
        return flops, (b, width, t)


def mca_block(x, params: MultiScaleChannelAttention) -> Tensor:
    return params(x)


class TemporalAttention(Module):
    """Per-frame weights: channel mean -> 1-D conv (k=7, same) -> sigmoid, shape (B, 1, T)."""

    def __init__(self, kernel_size: int = 7, rng: np.random.Generator | None = None) -> None:
        super().__init__()
        self.conv = Conv1d(1, 1, kernel_size, rng=rng)

    def forward(self, x) -> Tensor:
        x, _ = _as_batch(x)
        return self.conv(x.mean(axis=1, keepdims=True)).sigmoid()

    def analytic_flops(self, shape):
        b, c, t = shape
        flops = Flops(mean=b * c * t, sigmoid=b * t)
        flops += self.conv.analytic_flops((b, 1, t))[0]
        return flops, (b, 1, t)


def temporal_attention(x, params: TemporalAttention) -> Tensor:
    return params(x)


def tcia_fuse(x, x_rse, a_t, a_c, conv: Conv1d) -> Tensor:
    """Rank-1 temporal-channel mask applied to ``x_rse``, projected and added back to ``x``.

    ``a_t`` is (B, 1, T) and ``a_c`` is (B, C); the mask is their outer
    product (B, C, T).
    """
    x, squeeze = _as_batch(x)
    x_rse, _ = _as_batch(x_rse)
    a_t, a_c = as_tensor(a_t), as_tensor(a_c)
    if a_c.ndim == 1:
        a_c = a_c.reshape(1, -1)
    if a_t.ndim == 1:
        a_t = a_t.reshape(1, 1, -1)
    if x.shape != x_rse.shape or a_t.shape[-1] != x.shape[2] or a_c.shape[-1] != x.shape[1]:
        raise ShapeMismatchError("tcia_fuse: inconsistent shapes")
    mask = a_c.reshape(*a_c.shape, 1) * a_t
    return _unbatch(x + conv(mask * x_rse), squeeze)


class TemporalChannelAttention(Module):
    """RSE path plus temporal attention, fused through a rank-1 mask and a 1x1 conv."""

    def __init__(self, channels: int, reduction: int = 4, kernel_size: int = 7,
                 rng: np.random.Generator | None = None) -> None:
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.se = SEBlock(channels, reduction, rng=rng)
        self.temporal = TemporalAttention(kernel_size, rng=rng)
        self.fuse = Conv1d(channels, channels, 1, rng=rng)

    def forward(self, x) -> Tensor:
        x, squeeze = _as_batch(x)
        a_c = self.se.gate(x)
        x_rse = x + x * a_c.reshape(*a_c.shape, 1)
        a_t = self.temporal(x)
        return _unbatch(tcia_fuse(x, x_rse, a_t, a_c, self.fuse), squeeze)

    def analytic_flops(self, shape):
        b, c, t = shape
        flops, _ = self.se.analytic_flops(shape)  # gate + x*s
        flops["add"] += b * c * t                 # x + SE(x)
        flops += self.temporal.analytic_flops(shape)[0]
        flops["mul"] += 2 * b * c * t             # outer product, mask * x_rse
        flops += self.fuse.analytic_flops(shape)[0]
        flops["add"] += b * c * t
        return flops, tuple(shape)


class Res2DilatedConv(Module):
    """Res2Net-style hierarchical dilated convolution over ``scale`` channel groups.

    Group 0 passes through; group i>0 sees its own slice plus the previous
    group's output.
    """

    def __init__(self, channels: int, kernel_size: int = 3, dilation: int = 1,
                 scale: int = 4, rng: np.random.Generator | None = None) -> None:
        super().__init__()
        if channels % scale:
            raise ScaleIndivisibleError(f"channels {channels} not divisible by scale {scale}")
        self.scale = scale
        width = channels // scale
        self.units = [ConvReluBN(width, width, kernel_size, dilation, rng=rng)
                      for _ in range(scale - 1)]

    def forward(self, x: Tensor) -> Tensor:
        width = x.shape[1] // self.scale
        groups = F.split_channels(x, [width] * self.scale)
        outs = [groups[0]]
        y = None
        for i, unit in enumerate(self.units, start=1):
            y = unit(groups[i] if y is None else groups[i] + y)
            outs.append(y)
        return F.concat_channels(outs)

    def analytic_flops(self, shape):
        b, c, t = shape
        width = c // self.scale
        flops = Flops()
        for i, unit in enumerate(self.units):
            if i:
                flops["add"] += b * width * t
            flops += unit.analytic_flops((b, width, t))[0]
        return flops, tuple(shape)


class Res2Block(Module):
    """SE-Res2Block, optionally preceded by temporal-channel interactive attention.

    ``[rse ->] 1x1 conv -> Res2 dilated conv -> 1x1 conv -> SE -> + input``.
    With ``use_rse=False`` this is the baseline ECAPA-TDNN block.
    """

    def __init__(self, channels: int, dilation: int, kernel_size: int = 3,
                 scale: int = 4, reduction: int = 4, use_rse: bool = True,
                 rng: np.random.Generator | None = None) -> None:
        super().__init__()
        if channels % scale:
            raise ScaleIndivisibleError(f"channels {channels} not divisible by scale {scale}")
        rng = rng or np.random.default_rng(0)
        self.rse = TemporalChannelAttention(channels, reduction, rng=rng) if use_rse else None
        self.conv_in = ConvReluBN(channels, channels, 1, rng=rng)
        self.res2 = Res2DilatedConv(channels, kernel_size, dilation, scale, rng=rng)
        self.conv_out = ConvReluBN(channels, channels, 1, rng=rng)
        self.se = SEBlock(channels, reduction, rng=rng)

    def forward(self, x) -> Tensor:
        x, squeeze = _as_batch(x)
        h = self.rse(x) if self.rse is not None else x
        h = self.conv_out(self.res2(self.conv_in(h)))
        return _unbatch(self.se(h) + x, squeeze)

    def analytic_flops(self, shape):
        flops = Flops()
        if self.rse is not None:
            flops += self.rse.analytic_flops(shape)[0]
        for layer in (self.conv_in, self.res2, self.conv_out, self.se):
            flops += layer.analytic_flops(shape)[0]
        flops["add"] += _numel(shape)
        return flops, tuple(shape)


def mca_rse_res2block(x, params: Res2Block) -> Tensor:
    return params(x)


class DifferentialAttention(Module):
    """Two softmax attention maps per head, combined as ``A1 - lam * A2``.

    Input ``Z`` is ``(N, C)`` or ``(B, N, C)``.  Per head,
    ``R = (A1 - lam A2) V`` with ``V = Z W_V``; heads are concatenated and the
    result recalibrates ``Z`` elementwise: output ``R * Z``.
    """

    def __init__(self, dim: int, heads: int = 4, lambda_init: float = 0.5,
                 rng: np.random.Generator | None = None) -> None:
        super().__init__()
        if dim % heads:
            raise HeadIndivisibleError(f"dim {dim} not divisible by {heads} heads")
        rng = rng or np.random.default_rng(0)
        self.heads = heads
        self.w_q1 = parameter(kaiming_uniform(rng, (dim, dim), dim))
        self.w_k1 = parameter(kaiming_uniform(rng, (dim, dim), dim))
        self.w_q2 = parameter(kaiming_uniform(rng, (dim, dim), dim))
        self.w_k2 = parameter(kaiming_uniform(rng, (dim, dim), dim))
        self.w_v = parameter(kaiming_uniform(rng, (dim, dim), dim))
        self.lam = parameter(np.array(lambda_init))

    @property
    def dim(self) -> int:
        return self.w_v.shape[0]

    def _heads(self, t: Tensor) -> Tensor:
        b, n, c = t.shape
        return t.reshape(b, n, self.heads, c // self.heads).transpose(0, 2, 1, 3)

    def attention_maps(self, z: Tensor) -> tuple[Tensor, Tensor]:
        """Per-head softmax maps ``A1`` and ``A2``, each (B, h, N, N)."""
        scale = 1.0 / np.sqrt(self.dim // self.heads)
        maps = []
        for wq, wk in ((self.w_q1, self.w_k1), (self.w_q2, self.w_k2)):
            q, k = self._heads(z @ wq), self._heads(z @ wk)
            maps.append(F.softmax((q @ k.transpose(0, 1, 3, 2)) * scale, axis=-1))
        return maps[0], maps[1]

    def combined_weights(self, z) -> Tensor:
        z, _ = self._as_tokens(z)
        a1, a2 = self.attention_maps(z)
        return a1 - self.lam * a2

    def _as_tokens(self, z) -> tuple[Tensor, bool]:
        z = as_tensor(z)
        squeeze = z.ndim == 2
        if squeeze:
            z = z.reshape(1, *z.shape)
        if z.ndim != 3 or z.shape[2] != self.dim:
            raise ShapeMismatchError(f"expected (..., N, {self.dim}), got {z.shape}")
        return z, squeeze

    def forward(self, z) -> Tensor:
        z, squeeze = self._as_tokens(z)
        b, n, c = z.shape
        weights = self.combined_weights(z)
        r = (weights @ self._heads(z @ self.w_v)).transpose(0, 2, 1, 3).reshape(b, n, c)
        out = r * z
        return out.reshape(n, c) if squeeze else out

    def analytic_flops(self, shape):
        b, n, c = shape
        h = self.heads
        d = c // h
        flops = Flops()
        flops["matmul"] = 5 * 2 * b * n * c * c        # Q1 K1 Q2 K2 V projections
        flops["matmul"] += 2 * 2 * b * h * n * n * d   # two score products
        flops["matmul"] += 2 * b * h * n * n * d       # weights @ V
        flops["mul"] = 2 * b * h * n * n + b * h * n * n + b * n * c  # scaling, lam*A2, R*Z
        flops["softmax"] = 2 * 5 * b * h * n * n
        flops["sub"] = b * h * n * n
        return flops, tuple(shape)


def differential_attention(z, params: DifferentialAttention) -> Tensor:
    return params(z)


class AttentiveStatsPooling(Module):
    """Attention-weighted mean and standard deviation over time: (B, C, T) -> (B, 2C).

    Weights come from ``softmax_T(W2 tanh(W1 x))`` per channel and frame;
    the variance is floored at 1e-8 before the square root.
    """

    def __init__(self, channels: int, bottleneck: int = 128,
                 rng: np.random.Generator | None = None) -> None:
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.attn_in = Conv1d(channels, bottleneck, 1, rng=rng)
        self.attn_out = Conv1d(bottleneck, channels, 1, rng=rng)

    def weights(self, x: Tensor) -> Tensor:
        return F.softmax(self.attn_out(self.attn_in(x).tanh()), axis=-1)

    def forward(self, x) -> Tensor:
        x, _ = _as_batch(x)
        a = self.weights(x)
        mu = (a * x).sum(axis=-1)
        diff = x - mu.reshape(*mu.shape, 1)
        var = (a * diff * diff).sum(axis=-1)
        std = clamp_min(var, 1e-8).sqrt()
        return F.concat_channels([mu, std], axis=-1)

    def analytic_flops(self, shape):
        b, c, t = shape
        flops, hshape = self.attn_in.analytic_flops(shape)
        flops["tanh"] += _numel(hshape)
        flops += self.attn_out.analytic_flops(hshape)[0]
        n = b * c * t
        flops += Flops(softmax=5 * n, mul=3 * n, sum=2 * n, sub=n, clamp=b * c, sqrt=b * c)
        return flops, (b, 2 * c)


def attentive_stats_pooling(x, params: AttentiveStatsPooling) -> Tensor:
    return params(x)
