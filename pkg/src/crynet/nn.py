"""Parameter containers: a small ``Module`` protocol plus conv, dense and batch-norm layers.

Each module also knows how to count its own forward FLOPs analytically from
an input shape (``analytic_flops``), without running anything.  Those counts
follow the same conventions as the runtime counter in :mod:`crynet.tensor`,
which makes the runtime counter an independent check on them.
"""

from __future__ import annotations

import collections
from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Tensor, parameter

Flops = collections.Counter


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    """He-uniform init (ReLU gain): U(-sqrt(6/fan_in), sqrt(6/fan_in))."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Base class: attributes that are parameters, modules or lists of modules are discovered by name."""

    training = True

    def __init__(self) -> None:
        self._buffer_names: list[str] = []

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        setattr(self, name, value)
        self._buffer_names.append(name)

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            yield name, value

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, value in self._children():
            path = f"{prefix}.{name}" if prefix else name
            if isinstance(value, Module):
                yield from value.named_modules(path)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_modules(f"{path}.{i}")

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for prefix, module in self.named_modules():
            for name, value in vars(module).items():
                if isinstance(value, Tensor) and value.requires_grad:
                    yield (f"{prefix}.{name}" if prefix else name), value

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for prefix, module in self.named_modules():
            for name in getattr(module, "_buffer_names", ()):
                yield (f"{prefix}.{name}" if prefix else name), getattr(module, name)

    def train(self, mode: bool = True) -> "Module":
        for _, module in self.named_modules():
            module.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def analytic_flops(self, shape: tuple[int, ...]) -> tuple[Flops, tuple[int, ...]]:
        """FLOPs of one eval-mode forward on an input of ``shape`` (batch included)."""
        raise NotImplementedError


class Conv1d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 1,
                 dilation: int = 1, bias: bool = True,
                 rng: np.random.Generator | None = None) -> None:
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.kernel_size = kernel_size
        self.dilation = dilation
        fan_in = in_channels * kernel_size
        self.weight = parameter(kaiming_uniform(rng, (out_channels, in_channels, kernel_size), fan_in))
        self.bias = parameter(np.zeros(out_channels)) if bias else None

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def forward(self, x: Tensor) -> Tensor:
        return F.conv1d(x, self.weight, self.bias, dilation=self.dilation, padding="same")

    def analytic_flops(self, shape):
        b, _, t = shape
        n = 2 * b * self.in_channels * self.out_channels * self.kernel_size * t
        if self.bias is not None:
            n += b * self.out_channels * t
        return Flops(conv1d=n), (b, self.out_channels, t)


class Dense(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True,
                 rng: np.random.Generator | None = None) -> None:
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.weight = parameter(kaiming_uniform(rng, (out_features, in_features), in_features))
        self.bias = parameter(np.zeros(out_features)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.dense(x, self.weight, self.bias)

    def analytic_flops(self, shape):
        b = shape[0]
        m, n = self.weight.shape
        total = 2 * b * m * n + (b * m if self.bias is not None else 0)
        return Flops(dense=total), (b, m)


class BatchNorm1d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5) -> None:
        super().__init__()
        self.gamma = parameter(np.ones(channels))
        self.beta = parameter(np.zeros(channels))
        self.momentum = momentum
        self.eps = eps
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm_1d(x, self.gamma, self.beta, self.running_mean,
                               self.running_var, self.training, self.momentum, self.eps)

    def analytic_flops(self, shape):
        return Flops(batch_norm=4 * int(np.prod(shape))), tuple(shape)


class ConvReluBN(Module):
    """Conv -> ReLU -> BatchNorm, the frame-level unit of ECAPA-style networks."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 1,
                 dilation: int = 1, rng: np.random.Generator | None = None) -> None:
        super().__init__()
        self.conv = Conv1d(in_channels, out_channels, kernel_size, dilation, rng=rng)
        self.bn = BatchNorm1d(out_channels)

    def forward(self, x: Tensor) -> Tensor:
        return self.bn(self.conv(x).relu())

    def analytic_flops(self, shape):
        flops, shape = self.conv.analytic_flops(shape)
        flops["relu"] += int(np.prod(shape))
        bn, shape = self.bn.analytic_flops(shape)
        return flops + bn, shape
