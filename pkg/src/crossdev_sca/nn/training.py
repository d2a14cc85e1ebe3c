"""Mini-batch training with Adam, L2 weight decay and per-epoch reporting."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from ..core import EmptyInputError, TraceMatrix
from .model import Network

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 256
    epochs: int = 100
    l2_lambda: float = 1e-4
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.l2_lambda < 0:
            raise ValueError("l2_lambda must be >= 0")


@dataclass
class TrainReport:
    initial_loss: float = math.nan
    loss: list[float] = field(default_factory=list)
    train_accuracy: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    wall_time: float = 0.0


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, model: Network, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        lr_t = self.lr * math.sqrt(1 - b2**self.t) / (1 - b1**self.t)
        for key, layer, name, value in model.named_params():
            g = grads[key]
            if key not in self.m:
                self.m[key] = np.zeros_like(value)
                self.v[key] = np.zeros_like(value)
            m, v = self.m[key], self.v[key]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            layer.params[name] = value - lr_t * m / (np.sqrt(v) + self.eps)


def _xy(data) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(data, TraceMatrix):
        return data.samples, data.key_bytes.astype(np.intp)
    x, y = data
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.intp)
    if len(x) != len(y):
        raise ValueError(f"{len(x)} inputs but {len(y)} labels")
    return x, y


def train(model: Network, train_set, val_set=None, cfg: TrainConfig | None = None) -> TrainReport:
    """Train ``model`` in place.

    ``train_set``/``val_set`` are TraceMatrix objects (labels = key bytes) or
    ``(inputs, labels)`` pairs.  Shuffling and dropout masks are seeded from
    ``cfg.seed``; the last, possibly short, mini-batch of an epoch is used.
    """
    cfg = cfg or TrainConfig()
    x, y = _xy(train_set)
    if len(x) == 0:
        raise EmptyInputError("empty training set")
    n_classes = model.config.get("n_classes", 256)
    if y.min() < 0 or y.max() >= n_classes:
        raise ValueError(f"labels outside [0, {n_classes})")
    xv = yv = None
    if val_set is not None:
        xv, yv = _xy(val_set)
        if len(xv) == 0:
            raise EmptyInputError("empty validation set")

    rng = np.random.default_rng([cfg.seed, 1])
    model.seed_dropout([cfg.seed, 2])
    opt = Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon)
    report = TrainReport()
    # eval-mode pass: leaves batch-norm running statistics untouched
    report.initial_loss = float(
        -np.mean(np.log(np.maximum(model.predict_proba(x)[np.arange(len(y)), y], 1e-12)))
    )

    start = time.perf_counter()
    n = len(x)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        total_loss = 0.0
        correct = 0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            loss, probs, grads = model.loss_and_grads(x[idx], y[idx], cfg.l2_lambda)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"loss became {loss} in epoch {epoch + 1} at batch starting {lo}"
                )
            opt.step(model, grads)
            total_loss += loss * len(idx)
            correct += int(np.sum(probs.argmax(axis=1) == y[idx]))
        report.loss.append(total_loss / n)
        report.train_accuracy.append(correct / n)
        if xv is not None:
            report.val_accuracy.append(model.accuracy(xv, yv))
        log.debug("epoch %d loss %.4f train_acc %.4f val_acc %s", epoch + 1, report.loss[-1],
                  report.train_accuracy[-1], report.val_accuracy[-1] if xv is not None else "-")
    report.wall_time = time.perf_counter() - start
    return report


def augment(x: np.ndarray, y: np.ndarray, n_total: int, sigma: float,
            rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Grow a training set to ``n_total`` rows with Gaussian-jittered copies."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    extra = n_total - len(x)
    if extra <= 0:
        return x, y
    pick = rng.integers(0, len(x), size=extra)
    noisy = x[pick] + rng.normal(0.0, sigma, size=(extra, x.shape[1]))
    return np.concatenate([x, noisy]), np.concatenate([y, y[pick]])


def predict(model: Network, data) -> np.ndarray:
    x, _ = _xy(data) if isinstance(data, TraceMatrix) else (np.asarray(data), None)
    return model.predict(x)


def accuracy(model: Network, data) -> float:
    x, y = _xy(data)
    return model.accuracy(x, y)
