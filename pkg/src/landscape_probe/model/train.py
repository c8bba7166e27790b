"""SGD training with cosine annealing, CIFAR-style augmentation, clean evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np

from ..data import Dataset
from ..gradcore import NonFiniteError, Tape, Tensor, backward, softmax_cross_entropy
from ..sbde import ExpansionSpec, aux_matches_fill, expand
from .net import Model

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.1
    lr_min: float = 1e-5
    epochs: int = 30
    batch: int = 128
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    crop_pad: int = 4
    hflip: bool = True
    crop: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr_min > self.lr0:
            raise ValueError(f"lr_min ({self.lr_min}) must not exceed lr0 ({self.lr0})")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def full_train_config(seed: int = 0) -> TrainConfig:
    """The 200-epoch, batch-256 reference recipe."""
    return TrainConfig(lr0=0.1, lr_min=1e-5, epochs=200, batch=256, momentum=0.9,
                       weight_decay=5e-4, seed=seed)


def cosine_lr(t: float, total: float, lr0: float, lr_min: float) -> float:
    if total == 0:
        raise ValueError("cosine_lr: total steps must be positive")
    if not 0 <= t <= total:
        raise ValueError(f"cosine_lr: step {t} outside [0, {total}]")
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * t / total))


def crop_and_flip(image: np.ndarray, dy: int, dx: int, flip: bool, pad: int) -> np.ndarray:
    """Zero-pad by ``pad``, crop the original size at offset (dy, dx), optionally mirror."""
    c, h, w = image.shape
    padded = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=image.dtype)
    padded[:, pad:pad + h, pad:pad + w] = image
    out = padded[:, dy:dy + h, dx:dx + w]
    if flip:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def augment(image: np.ndarray, rng: np.random.Generator, config: TrainConfig) -> np.ndarray:
    pad = config.crop_pad if config.crop else 0
    dy, dx = (int(v) for v in rng.integers(0, 2 * pad + 1, size=2)) if pad else (0, 0)
    flip = bool(rng.random() < 0.5) if config.hflip else False
    return crop_and_flip(image, dy, dx, flip, pad)


def augment_batch(images: np.ndarray, rng: np.random.Generator, config: TrainConfig) -> np.ndarray:
    if not (config.crop or config.hflip):
        return images.copy()
    return np.stack([augment(img, rng, config) for img in images])


class SGD:
    """Heavy-ball SGD with L2 weight decay on the parameters the model flags for it."""

    def __init__(self, model: Model, momentum: float, weight_decay: float):
        self.model = model
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers: dict = {}

    def step(self, lr: float) -> None:
        for name, p in self.model.params.items():
            if p.grad is None or not p.trainable:
                continue
            g = p.grad
            if self.weight_decay and self.model.decay[name]:
                g = g + self.weight_decay * p.data
            if self.momentum:
                buf = self.buffers.get(name)
                buf = g.copy() if buf is None else self.momentum * buf + g
                self.buffers[name] = buf
                g = buf
            p.data = (p.data - lr * g).astype(p.dtype, copy=False)


def prepare(images: np.ndarray, spec: Optional[ExpansionSpec]) -> np.ndarray:
    return images if spec is None else expand(images, spec)


def fit_normalization(model: Model, dataset: Dataset) -> None:
    mean, std = dataset.channel_stats()
    model.set_normalization(mean, np.maximum(std, 1e-6))


def train(model: Model, dataset: Dataset, spec: Optional[ExpansionSpec], config: TrainConfig,
          test: Optional[Dataset] = None,
          on_epoch: Optional[Callable[[dict], None]] = None) -> tuple:
    """Train in place; returns ``(model, history)`` with one dict per epoch."""
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    seq = np.random.SeedSequence(config.seed)
    order_rng, aug_rng = (np.random.default_rng(s) for s in seq.spawn(2))
    opt = SGD(model, config.momentum, config.weight_decay)
    n = len(dataset)
    history = []
    for epoch in range(config.epochs):
        lr = cosine_lr(epoch, config.epochs, config.lr0, config.lr_min)
        model.train()
        perm = order_rng.permutation(n)
        total, correct, seen = 0.0, 0, 0
        for start in range(0, n, config.batch):
            idx = perm[start:start + config.batch]
            raw = augment_batch(dataset.images[idx], aug_rng, config)
            x = prepare(raw, spec).astype(model.dtype, copy=False)
            if spec is not None and not aux_matches_fill(x, spec):
                raise AssertionError("auxiliary pixels drifted from their fill values")
            y = dataset.labels[idx]
            model.zero_grad()
            try:
                with Tape():
                    logits = model(Tensor(x))
                    loss = softmax_cross_entropy(logits, y)
            except NonFiniteError as exc:
                raise TrainingDiverged(f"non-finite activations at epoch {epoch}, batch {start // config.batch}: {exc}") from exc
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(f"loss is {value} at epoch {epoch}, batch {start // config.batch}")
            backward(loss)
            opt.step(lr)
            total += value * len(idx)
            correct += int((logits.data.argmax(axis=1) == y).sum())
            seen += len(idx)
        row = {"epoch": epoch + 1, "lr": lr, "train_loss": total / seen, "train_acc": correct / seen,
               "test_acc": evaluate_clean(model, test, spec) if test is not None else float("nan")}
        history.append(row)
        log.info("epoch %d lr %.5f loss %.4f train_acc %.4f test_acc %.4f", row["epoch"], lr,
                 row["train_loss"], row["train_acc"], row["test_acc"])
        if on_epoch is not None:
            on_epoch(row)
    model.eval()
    return model, history


def predict(model: Model, images: np.ndarray, spec: Optional[ExpansionSpec], batch: int = 256) -> np.ndarray:
    """Argmax class per image (ties go to the lowest index); images are raw, expansion applied here."""
    was = model.training
    model.eval()
    try:
        preds = []
        for s in range(0, len(images), batch):
            x = prepare(images[s:s + batch], spec)
            preds.append(model.logits(x, batch).argmax(axis=1))
    finally:
        model.training = was
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate_clean(model: Model, dataset: Dataset, spec: Optional[ExpansionSpec], batch: int = 256) -> float:
    if len(dataset) == 0:
        return float("nan")
    return float((predict(model, dataset.images, spec, batch) == dataset.labels).mean())
