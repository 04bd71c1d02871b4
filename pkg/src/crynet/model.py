"""Improved and baseline ECAPA-TDNN assemblies for six-way infant cry classification.

Improved network (per sample, ``C = channels``)::

    stem conv k5 (F -> C) + ReLU + BN
    3 x Res2Block with temporal-channel attention (dilations 2, 3, 4)
    concat of the three block outputs (3C) -> 1x1 conv to 4C + ReLU + BN
    multi-scale channel attention: 4C -> 4C            (or a plain 1x1 conv)
    global average pooling over time -> 4C
    differential attention over the four C-wide branch tokens (or identity)
    BN -> dense to the embedding -> dense to class logits -> softmax

The baseline swaps the attention modules out, keeps plain SE-Res2Blocks and
pools with attentive statistics (8C).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from . import functional as F
from .blocks import (
    AttentiveStatsPooling,
    DifferentialAttention,
    MultiScaleChannelAttention,
    Res2Block,
)
from .errors import ConfigInvalidError, ShapeMismatchError
from .nn import BatchNorm1d, Conv1d, ConvReluBN, Dense, Module
from .tensor import Tensor, as_tensor, no_grad


class EmotionLabel(IntEnum):
    """Class ids, fixed in alphabetical order."""

    AWAKE = 0
    DIAPER = 1
    HUG = 2
    HUNGRY = 3
    SLEEPY = 4
    UNCOMFORTABLE = 5

    @classmethod
    def from_name(cls, name: str) -> "EmotionLabel":
        try:
            return cls[name.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown emotion label {name!r}") from None

    @property
    def label(self) -> str:
        return self.name.lower()


LABELS: tuple[str, ...] = tuple(e.label for e in EmotionLabel)

# namespaces removed by the three ablation switches
ABLATION_NAMESPACES = {"mca": "mca", "rse": "rse", "diffattn": "diff_attn"}


@dataclass(frozen=True)
class ModelConfig:
    input_coeffs: int = 13
    channels: int = 128
    num_classes: int = 6
    dilations: tuple[int, int, int] = (2, 3, 4)
    mca_branch_dilations: tuple[int, int, int] = (1, 2, 3)
    reduction_ratio: int = 4
    res2_scale: int = 4
    heads: int = 4
    use_mca: bool = True
    use_rse: bool = True
    use_diff_attn: bool = True
    target_frames: int = 298
    embed_dim: int = 192
    asp_bottleneck: int = 128
    stem_kernel: int = 5
    lambda_init: float = 0.5

    def validate(self) -> "ModelConfig":
        c = self.channels
        problems = []
        if min(self.input_coeffs, c, self.num_classes, self.target_frames,
               self.embed_dim, self.asp_bottleneck, self.stem_kernel) < 1:
            problems.append("sizes must be positive")
        if self.num_classes < 2:
            problems.append("num_classes must be >= 2")
        if len(self.dilations) != 3 or min(self.dilations) < 1:
            problems.append("dilations must be three positive ints")
        if len(self.mca_branch_dilations) != 3 or min(self.mca_branch_dilations) < 1:
            problems.append("mca_branch_dilations must be three positive ints")
        if self.res2_scale < 2 or c % self.res2_scale:
            problems.append(f"channels {c} not divisible by res2_scale {self.res2_scale}")
        if self.reduction_ratio < 1 or c % self.reduction_ratio:
            problems.append(f"channels {c} not divisible by reduction_ratio {self.reduction_ratio}")
        if self.heads < 1 or c % self.heads:
            problems.append(f"channels {c} not divisible by heads {self.heads}")
        if problems:
            raise ConfigInvalidError("; ".join(problems))
        return self

    def ablate(self, *names: str) -> "ModelConfig":
        """Copy with the named modules (``mca``, ``rse``, ``diffattn``) switched off."""
        flags = {"mca": "use_mca", "rse": "use_rse", "diffattn": "use_diff_attn"}
        changes = {}
        for name in names:
            if name not in flags:
                raise ConfigInvalidError(f"unknown ablation {name!r}")
            changes[flags[name]] = False
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigInvalidError(f"unknown model config keys: {sorted(unknown)}")
        fixed = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
        return cls(**fixed)


class Model(Module):
    """Shared trunk for both variants; ``kind`` is ``"improved"`` or ``"baseline"``."""

    def __init__(self, config: ModelConfig, kind: str, seed: int = 0) -> None:
        super().__init__()
        config.validate()
        if kind not in ("improved", "baseline"):
            raise ConfigInvalidError(f"unknown model kind {kind!r}")
        self._config = config
        self._kind = kind
        self._seed = seed
        rng = np.random.default_rng(seed)
        c = config.channels
        improved = kind == "improved"

        self.stem = ConvReluBN(config.input_coeffs, c, config.stem_kernel, rng=rng)
        self.blocks = [
            Res2Block(c, d, scale=config.res2_scale, reduction=config.reduction_ratio,
                      use_rse=improved and config.use_rse, rng=rng)
            for d in config.dilations
        ]
        self.agg = ConvReluBN(3 * c, 4 * c, 1, rng=rng)
        if improved:
            if config.use_mca:
                self.mca = MultiScaleChannelAttention(
                    4 * c, c, dilations=config.mca_branch_dilations,
                    reduction=config.reduction_ratio, rng=rng)
            else:
                self.proj = Conv1d(4 * c, 4 * c, 1, rng=rng)
            if config.use_diff_attn:
                self.diff_attn = DifferentialAttention(c, config.heads, config.lambda_init, rng=rng)
            pooled = 4 * c
        else:
            self.asp = AttentiveStatsPooling(4 * c, config.asp_bottleneck, rng=rng)
            pooled = 8 * c
        self.pool_bn = BatchNorm1d(pooled)
        self.embed = Dense(pooled, config.embed_dim, rng=rng)
        self.head = Dense(config.embed_dim, config.num_classes, rng=rng)

    @property
    def config(self) -> ModelConfig:
        return self._config

    @property
    def kind(self) -> str:
        return self._kind

    @property
    def seed(self) -> int:
        return self._seed

    def _check_input(self, x) -> Tensor:
        x = as_tensor(x)
        if x.ndim == 2:
            x = x.reshape(1, *x.shape)
        if x.ndim != 3 or x.shape[1] != self.config.input_coeffs:
            raise ShapeMismatchError(
                f"expected (B, {self.config.input_coeffs}, T) features, got {x.shape}")
        return x

    def embedding(self, x) -> Tensor:
        x = self._check_input(x)
        h = self.stem(x)
        outs = []
        for block in self.blocks:
            h = block(h)
            outs.append(h)
        h = self.agg(F.concat_channels(outs))
        if self.kind == "baseline":
            pooled = self.asp(h)
        else:
            h = self.mca(h) if self.config.use_mca else self.proj(h)
            pooled = F.global_avg_pool_time(h)
            if self.config.use_diff_attn:
                b = pooled.shape[0]
                tokens = pooled.reshape(b, 4, self.config.channels)
                pooled = self.diff_attn(tokens).reshape(b, 4 * self.config.channels)
        return self.embed(self.pool_bn(pooled))

    def logits(self, x) -> Tensor:
        return self.head(self.embedding(x))

    def forward(self, x) -> Tensor:
        """Class probabilities, shape (B, num_classes)."""
        return F.softmax(self.logits(x), axis=-1)

    def predict_proba(self, x, batch_size: int = 64) -> np.ndarray:
        """Eval-mode probabilities without graph recording."""
        was_training = self.training
        self.eval()
        try:
            x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
            if x.ndim == 2:
                x = x[None]
            with no_grad():
                parts = [self.forward(x[i:i + batch_size]).data for i in range(0, len(x), batch_size)]
            return np.concatenate(parts, axis=0)
        finally:
            self.train(was_training)

    def analytic_flops(self, shape):
        """Eval-mode FLOPs for input ``shape = (B, coeffs, T)``, by primitive."""
        b, _, t = shape
        c = self.config.channels
        flops, shape = self.stem.analytic_flops(shape)
        for block in self.blocks:
            flops += block.analytic_flops(shape)[0]
        flops += self.agg.analytic_flops((b, 3 * c, t))[0]
        shape = (b, 4 * c, t)
        if self.kind == "baseline":
            step, pooled_shape = self.asp.analytic_flops(shape)
            flops += step
        else:
            flops += (self.mca if self.config.use_mca else self.proj).analytic_flops(shape)[0]
            flops["avg_pool"] += b * 4 * c * t
            pooled_shape = (b, 4 * c)
            if self.config.use_diff_attn:
                flops += self.diff_attn.analytic_flops((b, 4, c))[0]
        flops += self.pool_bn.analytic_flops(pooled_shape)[0]
        flops += self.embed.analytic_flops(pooled_shape)[0]
        flops += self.head.analytic_flops((b, self.config.embed_dim))[0]
        flops["softmax"] += 5 * b * self.config.num_classes
        return flops, (b, self.config.num_classes)


def build_improved(config: ModelConfig | None = None, seed: int = 0) -> Model:
    return Model(config or ModelConfig(), "improved", seed)


def build_baseline(config: ModelConfig | None = None, seed: int = 0) -> Model:
    return Model(config or ModelConfig(), "baseline", seed)


def build(kind: str, config: ModelConfig | None = None, seed: int = 0) -> Model:
    return Model(config or ModelConfig(), kind, seed)


def parameter_namespaces(model: Module) -> set[str]:
    """Every dotted path component that appears in a parameter name."""
    names = set()
    for name, _ in model.named_parameters():
        names.update(name.split("."))
    return names
