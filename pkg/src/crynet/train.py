"""Dataset split, loss, Adam, the training loop and confusion-matrix evaluation."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .checkpoint import checkpoint_save
from .config import TrainConfig
from .errors import EmptyClassError, LabelOutOfRangeError, NaNLossError, ShapeMismatchError
from .model import LABELS, Model
from .tensor import Tensor, as_tensor, backward

TEST_FRACTION = 0.2
MIN_PER_CLASS = 5


# ---------------------------------------------------------------------------
# dataset split
# ---------------------------------------------------------------------------


@dataclass
class DatasetIndex:
    entries: list[tuple[str, int]]
    is_test: list[bool]

    def __post_init__(self) -> None:
        if len(self.entries) != len(self.is_test):
            raise ValueError("one split flag per entry is required")

    @property
    def train(self) -> list[tuple[str, int]]:
        return [e for e, t in zip(self.entries, self.is_test) if not t]

    @property
    def test(self) -> list[tuple[str, int]]:
        return [e for e, t in zip(self.entries, self.is_test) if t]


def split_dataset(entries: Sequence[tuple[str, int]], seed: int = 0,
                  num_classes: int = len(LABELS)) -> DatasetIndex:
    """Stratified 80/20 split; per class ``round(n / 5)`` clips go to test (half rounds up)."""
    entries = list(entries)
    by_class: dict[int, list[int]] = {}
    for i, (_, label) in enumerate(entries):
        if not 0 <= label < num_classes:
            raise LabelOutOfRangeError(f"label {label} outside 0..{num_classes - 1}")
        by_class.setdefault(label, []).append(i)
    rng = np.random.default_rng([seed, 0x5])
    is_test = [False] * len(entries)
    for label in sorted(by_class):
        idx = by_class[label]
        if len(idx) < MIN_PER_CLASS:
            raise EmptyClassError(f"class {label} has {len(idx)} clips, need >= {MIN_PER_CLASS}")
        order = rng.permutation(len(idx))
        n_test = (len(idx) + 2) // 5
        for j in order[:n_test]:
            is_test[idx[j]] = True
    return DatasetIndex(entries, is_test)


# ---------------------------------------------------------------------------
# loss and optimiser
# ---------------------------------------------------------------------------


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``.

    Fused log-sum-exp form; the gradient is ``(softmax - onehot) / B``.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    b, k = logits.shape
    if labels.shape != (b,):
        raise ShapeMismatchError(f"{labels.shape[0]} labels for {b} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise LabelOutOfRangeError(f"labels must lie in 0..{k - 1}")
    z = logits.data
    shift = z.max(axis=1, keepdims=True)
    lse = shift[:, 0] + np.log(np.exp(z - shift).sum(axis=1))
    rows = np.arange(b)
    loss = np.asarray(np.mean(lse - z[rows, labels]))

    def backward_fn(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return (g * p / b,)

    return Tensor._from_op(loss, (logits,), backward_fn, "cross_entropy")


@dataclass
class AdamState:
    lr: float = 2e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads):
        raise ShapeMismatchError("one gradient per parameter is required")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ShapeMismatchError("optimizer state does not match parameter list")
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape or m.shape != p.data.shape:
            raise ShapeMismatchError(f"gradient {g.shape} vs parameter {p.data.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    counts: np.ndarray

    @classmethod
    def from_predictions(cls, y_true, y_pred, num_classes: int = len(LABELS)) -> "ConfusionMatrix":
        counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        np.add.at(counts, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
        return cls(counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def correct(self) -> int:
        return int(np.trace(self.counts))

    @property
    def accuracy(self) -> float:
        return self.correct / self.total if self.total else float("nan")

    def row_percent(self) -> np.ndarray:
        rows = self.counts.sum(axis=1, keepdims=True)
        return np.where(rows > 0, 100.0 * self.counts / np.maximum(rows, 1), 0.0)

    def to_csv(self, labels: Sequence[str] = LABELS, percent: bool = False) -> str:
        grid = self.row_percent() if percent else self.counts
        lines = ["true\\pred," + ",".join(labels)]
        for name, row in zip(labels, grid):
            cells = (f"{v:.2f}" for v in row) if percent else (str(int(v)) for v in row)
            lines.append(name + "," + ",".join(cells))
        return "\n".join(lines) + "\n"


def predict(model: Model, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Argmax class per clip (ties go to the lowest id)."""
    return model.predict_proba(x, batch_size).argmax(axis=1)


def evaluate(model: Model, x: np.ndarray, y: Sequence[int], batch_size: int = 64) -> ConfusionMatrix:
    return ConfusionMatrix.from_predictions(y, predict(model, x, batch_size),
                                            model.config.num_classes)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    test_acc: float
    wall_seconds: float

    def line(self) -> str:
        return f"{self.epoch},{self.train_loss!r},{self.test_acc!r},{self.wall_seconds:.3f}"


@dataclass
class TrainResult:
    history: list[EpochRecord]
    step_losses: list[float]
    best_test_acc: float
    best_epoch: int


LOG_COLUMNS = "epoch,train_loss,test_acc,wall_seconds"


def train(
    model: Model,
    train_x: np.ndarray,
    train_y: Sequence[int],
    test_x: np.ndarray | None = None,
    test_y: Sequence[int] | None = None,
    config: TrainConfig | None = None,
    seed: int = 0,
    log_path: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
    log_header: Sequence[str] = (),
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> TrainResult:
    """Mini-batch Adam on cross-entropy with a seeded shuffle every epoch.

    The epoch log gets one ``epoch,train_loss,test_acc,wall_seconds`` line
    per epoch.  With ``checkpoint_path`` set, the final model is written
    there and the best-test-accuracy model to ``<checkpoint_path>.best``.
    """
    cfg = config or TrainConfig()
    train_x = np.asarray(train_x, dtype=np.float64)
    train_y = np.asarray(train_y, dtype=np.int64)
    if len(train_x) == 0:
        raise ValueError("training set is empty")
    if test_x is None:
        test_x, test_y = train_x, train_y
    test_y = np.asarray(test_y, dtype=np.int64)

    params = model.parameters()
    state = AdamState(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    rng = np.random.default_rng([seed, 0x7])
    history: list[EpochRecord] = []
    step_losses: list[float] = []
    best_acc, best_epoch = -1.0, 0

    log = None
    if log_path is not None:
        log = open(log_path, "w", encoding="utf-8")
        for line in log_header:
            log.write(f"# {line}\n")
        log.write(LOG_COLUMNS + "\n")
    try:
        for epoch in range(1, cfg.epochs + 1):
            started = time.perf_counter()
            model.train()
            order = rng.permutation(len(train_x))
            total = 0.0
            for start in range(0, len(order), cfg.batch_size):
                batch = order[start:start + cfg.batch_size]
                model.zero_grad()
                loss = cross_entropy(model.logits(train_x[batch]), train_y[batch])
                value = loss.item()
                if not math.isfinite(value):
                    raise NaNLossError(
                        f"non-finite loss {value} at epoch {epoch}, step {state.t + 1}, "
                        f"batch rows {batch[:8].tolist()}")
                backward(loss)
                adam_step(params, [p.grad for p in params], state)
                step_losses.append(value)
                total += value * len(batch)
            acc = evaluate(model, test_x, test_y, cfg.batch_size).accuracy
            wall = time.perf_counter() - started if cfg.record_wall_time else 0.0
            record = EpochRecord(epoch, total / len(order), acc, wall)
            history.append(record)
            if log is not None:
                log.write(record.line() + "\n")
                log.flush()
            if acc > best_acc:
                best_acc, best_epoch = acc, epoch
                if checkpoint_path is not None:
                    checkpoint_save(model, f"{checkpoint_path}.best")
            if on_epoch is not None:
                on_epoch(record)
    finally:
        if log is not None:
            log.close()
    if checkpoint_path is not None:
        checkpoint_save(model, checkpoint_path)
    return TrainResult(history, step_losses, best_acc, best_epoch)
