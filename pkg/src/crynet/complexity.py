"""Parameter and FLOP accounting.

FLOPs are counted for one eval-mode forward of a single sample, with a
multiply-add worth 2 FLOPs (see :mod:`crynet.functional` for every rule).
Parameter counts include every trainable scalar (lambda included, batch-norm
running statistics excluded).
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .model import Model
from .nn import Module
from .tensor import flop_counter, no_grad

# published complexity: millions of parameters, GFLOPs per sample
PUBLISHED = {
    "improved": {"params_m": 1.43, "gflops": 0.32},
    "baseline": {"params_m": 0.84, "gflops": 0.20},
}


@dataclass
class ComplexityReport:
    name: str
    total_params: int = 0
    per_module: dict[str, int] = field(default_factory=dict)
    frames: int | None = None
    flops: int | None = None
    flops_by_op: dict[str, int] = field(default_factory=dict)

    @property
    def conv_flops(self) -> int:
        """FLOPs of the convolutional trunk (every conv1d in the network)."""
        return self.flops_by_op.get("conv1d", 0)

    def lines(self) -> list[str]:
        out = [f"model = {self.name}", f"params = {self.total_params}",
               f"params_m = {self.total_params / 1e6:.4f}"]
        out += [f"params.{k} = {v}" for k, v in self.per_module.items()]
        if self.flops is not None:
            out += [f"frames = {self.frames}", f"flops = {self.flops}",
                    f"gflops = {self.flops / 1e9:.4f}", f"conv_flops = {self.conv_flops}"]
            out += [f"flops.{k} = {v}" for k, v in sorted(self.flops_by_op.items())]
        ref = PUBLISHED.get(self.name)
        if ref is not None:
            out.append(f"published_params_m = {ref['params_m']}")
            out.append(f"params_ratio = {self.total_params / 1e6 / ref['params_m']:.4f}")
            if self.flops is not None:
                out.append(f"published_gflops = {ref['gflops']}")
                out.append(f"gflops_ratio = {self.flops / 1e9 / ref['gflops']:.4f}")
        return out

    def to_text(self) -> str:
        return "\n".join(self.lines()) + "\n"


def _group(name: str) -> str:
    parts = name.split(".")
    if len(parts) > 1 and parts[1].isdigit():
        return ".".join(parts[:2])
    return parts[0] if len(parts) > 1 else "(root)"


def count_params(model: Module, name: str | None = None) -> ComplexityReport:
    per_module: dict[str, int] = {}
    for pname, p in model.named_parameters():
        key = _group(pname)
        per_module[key] = per_module.get(key, 0) + p.size
    report_name = name or getattr(model, "kind", type(model).__name__)
    return ComplexityReport(report_name, sum(per_module.values()), per_module)


def _input_shape(model: Module, frames: int | None, input_shape) -> tuple[int, ...]:
    if input_shape is not None:
        return tuple(input_shape)
    if isinstance(model, Model):
        return (1, model.config.input_coeffs, frames or model.config.target_frames)
    raise ValueError("input_shape is required for modules other than Model")


def count_flops(model: Module, frames: int | None = None, input_shape=None) -> ComplexityReport:
    """Analytic FLOPs from layer shapes alone; nothing is executed."""
    shape = _input_shape(model, frames, input_shape)
    flops, _ = model.analytic_flops(shape)
    report = count_params(model)
    report.frames = shape[-1]
    report.flops = int(sum(flops.values()))
    report.flops_by_op = dict(flops)
    return report


def instrumented_flops(model: Module, frames: int | None = None, input_shape=None,
                       seed: int = 0) -> Counter:
    """Run one eval-mode forward on random input and return the runtime FLOP tally by primitive."""
    shape = _input_shape(model, frames, input_shape)
    x = np.random.default_rng(seed).normal(size=shape)
    was_training = model.training
    model.eval()
    try:
        with no_grad(), flop_counter() as counter:
            model(x)
    finally:
        model.train(was_training)
    return Counter(counter.by_op)

