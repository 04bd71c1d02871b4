from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

from crynet.audio import save_wav
from crynet.model import LABELS, ModelConfig

TINY = ModelConfig(input_coeffs=4, channels=8, num_classes=3, target_frames=12,
                   embed_dim=16, asp_bottleneck=8)
TINY6 = ModelConfig(input_coeffs=4, channels=8, num_classes=6, target_frames=12,
                    embed_dim=16, asp_bottleneck=8)


def separable_set(seed: int = 0, per_class: int = 4, coeffs: int = 4, frames: int = 12):
    """Per class, a sinusoid of class-specific frequency riding on noise."""
    rng = np.random.default_rng(seed)
    t = np.arange(frames)
    xs, ys = [], []
    for c in range(len(LABELS)):
        for _ in range(per_class):
            x = 0.3 * rng.normal(size=(coeffs, frames))
            x[c % coeffs] += 2.0 * np.sin(2 * np.pi * (c + 1) * t / frames)
            xs.append(x)
            ys.append(c)
    return np.array(xs), np.array(ys)


def tone_dataset(root: Path, per_class: int = 5, sample_rate: int = 8000, seconds: float = 3.2):
    """``root/<label>/c<j>.wav`` tones, one pitch per label."""
    rng = np.random.default_rng(0)
    t = np.arange(int(sample_rate * seconds)) / sample_rate
    for i, label in enumerate(LABELS):
        (root / label).mkdir(parents=True, exist_ok=True)
        for j in range(per_class):
            x = 0.5 * np.sin(2 * np.pi * (200 + 150 * i) * t) + 0.02 * rng.normal(size=t.size)
            save_wav(root / label / f"c{j}.wav", x, sample_rate)
    return root


@pytest.fixture
def tiny_config() -> ModelConfig:
    return TINY


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
