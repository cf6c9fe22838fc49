"""Cross-entropy loss, Adam with a step learning-rate schedule, and the epoch loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import DataError, DatasetManifest, load_split
from .models import ModelInstance, ModelSpec, forward, init_model

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    initial_lr: float = 1e-4
    reduced_lr: float = 1e-5
    lr_drop_epoch: int = 5
    batch_size: int = 8
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0 < self.reduced_lr <= self.initial_lr:
            raise ValueError("need 0 < reduced_lr <= initial_lr")
        if not 0 <= self.lr_drop_epoch <= self.epochs:
            raise ValueError(f"lr_drop_epoch {self.lr_drop_epoch} outside [0, {self.epochs}]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    return config.initial_lr if epoch < config.lr_drop_epoch else config.reduced_lr


def cross_entropy_loss(probs: Tensor, labels) -> Tensor:
    return ad.cross_entropy(probs, labels)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """Bias-corrected Adam update, applied in place to ``params``."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.data.dtype, copy=False)
        p.data -= update
    return state


@dataclass(frozen=True)
class EpochReport:
    epoch: int
    train_loss: float
    val_accuracy: float
    seconds: float

    def line(self) -> str:
        return (f"epoch={self.epoch} loss={self.train_loss:.6f} "
                f"val_accuracy={self.val_accuracy:.4f} seconds={self.seconds:.3f}")


def predict(model: ModelInstance, x: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Class probabilities for a stacked image array, without recording gradients."""
    if len(x) == 0:
        return np.zeros((0, model.spec.classes), dtype=model.dtype)
    chunks = [forward(model, x[i:i + batch_size]).data for i in range(0, len(x), batch_size)]
    return np.concatenate(chunks, axis=0)


def accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return 0.0
    return float(np.mean(np.argmax(probs, axis=1) == labels))


def train_step(model: ModelInstance, xb: np.ndarray, yb: np.ndarray, state: AdamState, lr: float,
               config: TrainConfig) -> float:
    params = model.params
    for p in params.values():
        p.requires_grad = True
        p.grad = None
    with Tape() as tape:
        loss = cross_entropy_loss(forward(model, xb), yb)
    ad.backward(loss, tape)
    grads = {n: p.grad for n, p in params.items()}
    adam_step(params, grads, state, lr, config.adam_beta1, config.adam_beta2, config.adam_eps)
    for p in params.values():
        p.grad = None
    return float(loss.data)


def fit_arrays(model: ModelInstance, x_train, y_train, x_val, y_val, config: TrainConfig,
               on_epoch: Callable[[EpochReport], None] | None = None) -> list[EpochReport]:
    """Epoch loop over in-memory arrays; keeps the best-validation parameters in ``model``."""
    rng = np.random.default_rng(config.seed)
    state = AdamState()
    reports: list[EpochReport] = []
    best_acc = -1.0
    best = None
    for epoch in range(config.epochs):
        start = time.perf_counter()
        lr = lr_schedule(epoch, config)
        order = rng.permutation(len(x_train))
        losses, sizes = [], []
        for i in range(0, len(order), config.batch_size):
            idx = order[i:i + config.batch_size]
            losses.append(train_step(model, x_train[idx], y_train[idx], state, lr, config))
            sizes.append(len(idx))
        val_acc = accuracy(predict(model, x_val), y_val)
        seconds = max(time.perf_counter() - start, 1e-9)
        report = EpochReport(epoch, float(np.average(losses, weights=sizes)), val_acc, seconds)
        reports.append(report)
        logger.info(report.line())
        if on_epoch is not None:
            on_epoch(report)
        if val_acc > best_acc:
            best_acc = val_acc
            best = {n: p.data.copy() for n, p in model.params.items()}
    if best is not None:
        for n, arr in best.items():
            model.params[n].data = arr
    return reports


def train(spec: ModelSpec, data: DatasetManifest, config: TrainConfig, dtype=np.float32,
          on_epoch: Callable[[EpochReport], None] | None = None) -> tuple[ModelInstance, list[EpochReport]]:
    """Initialise from ``config.seed`` and run ``config.epochs`` epochs of Adam."""
    counts = data.counts()
    for s in ("train", "validation"):
        if counts[s] == 0:
            raise DataError(f"manifest has an empty {s} split")
    labels = [r.label for r in data.records]
    if labels and max(labels) >= spec.classes:
        raise DataError(f"manifest label {max(labels)} does not fit a {spec.classes}-class model")
    model = init_model(spec, seed=config.seed, dtype=dtype)
    if config.epochs == 0:
        return model, []
    x_tr, y_tr = load_split(data, "train", spec.input_resolution, dtype)
    x_va, y_va = load_split(data, "validation", spec.input_resolution, dtype)
    reports = fit_arrays(model, x_tr, y_tr, x_va, y_va, config, on_epoch)
    return model, reports


def steps_per_run(n_train: int, config: TrainConfig) -> int:
    return config.epochs * math.ceil(n_train / config.batch_size)
