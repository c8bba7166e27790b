"""CIFAR-10 binary ingestion, synthetic desk-scale datasets, stratified subsets."""

from __future__ import annotations

import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

RECORD_BYTES = 3073
CIFAR_SHAPE = (3, 32, 32)
DATA_ENV = "LANDSCAPE_PROBE_DATA"


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) in [0, 1]
    labels: np.ndarray  # (N,) int64
    split: str = "train"
    num_classes: int = 10

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ValueError(f"images {self.images.shape} and labels {self.labels.shape} disagree")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("images must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def take(self, index) -> "Dataset":
        return replace(self, images=self.images[index], labels=self.labels[index])

    def channel_stats(self) -> tuple:
        """Per-channel mean and std over the whole split (float64)."""
        x = self.images.astype(np.float64)
        return x.mean(axis=(0, 2, 3)), x.std(axis=(0, 2, 3))


# ---------------------------------------------------------------- CIFAR-10 binary

def parse_cifar10_bytes(raw: bytes, source: str = "<bytes>") -> tuple:
    if len(raw) % RECORD_BYTES != 0:
        raise DataFormatError(f"{source}: length {len(raw)} is not a multiple of {RECORD_BYTES}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise DataFormatError(f"{source}: record {bad[0]} has label byte {labels[bad[0]]} > 9")
    pixels = rec[:, 1:].reshape(-1, *CIFAR_SHAPE)
    return pixels, labels


def load_cifar10_binary(paths: Iterable[Union[str, Path]], split: str = "train", dtype=np.float32) -> Dataset:
    """Concatenate CIFAR-10 binary files in order; pixels are scaled by 1/255."""
    pix, lab = [], []
    for p in paths:
        raw = Path(p).read_bytes()
        px, lb = parse_cifar10_bytes(raw, str(p))
        pix.append(px)
        lab.append(lb)
    if not pix:
        raise DataFormatError("no CIFAR-10 files given")
    images = np.concatenate(pix).astype(dtype) / dtype(255)
    return Dataset(images, np.concatenate(lab), split=split, num_classes=10)


def dump_cifar10_binary(dataset: Dataset) -> bytes:
    """Inverse of the loader for datasets whose pixels are multiples of 1/255."""
    if dataset.image_shape != CIFAR_SHAPE:
        raise ValueError(f"CIFAR-10 records hold {CIFAR_SHAPE} images, got {dataset.image_shape}")
    px = np.rint(dataset.images.astype(np.float64) * 255).astype(np.uint8).reshape(len(dataset), -1)
    rec = np.concatenate([dataset.labels.astype(np.uint8)[:, None], px], axis=1)
    return rec.tobytes()


def cifar10_files(root: Union[str, Path], split: str) -> list:
    root = Path(root)
    for base in (root, root / "cifar-10-batches-bin"):
        if split == "train":
            files = [base / f"data_batch_{i}.bin" for i in range(1, 6)]
        else:
            files = [base / "test_batch.bin"]
        if all(f.is_file() for f in files):
            return files
    raise FileNotFoundError(f"CIFAR-10 binary {split} files not found under {root}")


def load_cifar10(root=None, split: str = "train") -> Dataset:
    root = root or os.environ.get(DATA_ENV)
    if not root:
        raise FileNotFoundError(f"no dataset root: set {DATA_ENV} or data.root")
    return load_cifar10_binary(cifar10_files(root, split), split=split)


# ---------------------------------------------------------------- synthetic

@dataclass(frozen=True)
class SyntheticSpec:
    classes: int = 10
    per_class: int = 100
    height: int = 32
    width: int = 32
    channels: int = 3
    pattern: str = "gratings"
    noise: float = 0.1
    seed: int = 0
    split: str = "train"

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError("synthetic data needs at least 2 classes")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if self.pattern not in ("gratings", "blobs"):
            raise ValueError(f"unknown synthetic pattern {self.pattern!r}")


def class_templates(spec: SyntheticSpec) -> np.ndarray:
    """Noise-free (K, C, H, W) class patterns in [0, 1]."""
    k, c, h, w = spec.classes, spec.channels, spec.height, spec.width
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    out = np.empty((k, c, h, w))
    for cls in range(k):
        if spec.pattern == "gratings":
            # orientation encodes the class; channels share the grating with a per-channel phase
            theta = np.pi * cls / k
            freq = 2.0 / 8.0
            proj = xx * np.cos(theta) + yy * np.sin(theta)
            for ch in range(c):
                out[cls, ch] = 0.5 + 0.3 * np.cos(2 * np.pi * freq * proj + 2 * np.pi * ch / max(c, 1) / 3)
        else:
            rs = np.random.default_rng(10_000 + cls)
            img = np.zeros((h, w))
            for _ in range(3):
                cy, cx = rs.uniform(0, h), rs.uniform(0, w)
                s = rs.uniform(2.0, 5.0)
                img += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
            img = 0.2 + 0.6 * img / img.max()
            for ch in range(c):
                out[cls, ch] = img * (0.8 + 0.2 * ch / max(c - 1, 1))
    return np.clip(out, 0.0, 1.0)


def make_synthetic(spec: SyntheticSpec, dtype=np.float32) -> Dataset:
    """Class templates plus seeded Gaussian noise, clamped to [0, 1], classes interleaved."""
    tmpl = class_templates(spec)
    rng = np.random.default_rng(spec.seed)
    labels = np.tile(np.arange(spec.classes), spec.per_class)
    noise = rng.standard_normal((len(labels),) + tmpl.shape[1:]) * spec.noise
    images = np.clip(tmpl[labels] + noise, 0.0, 1.0).astype(dtype)
    return Dataset(images, labels, split=spec.split, num_classes=spec.classes)


# ---------------------------------------------------------------- subsets

def stratified_indices(labels: np.ndarray, n: int, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    if n > len(labels):
        raise ValueError(f"cannot draw {n} samples from {len(labels)}")
    if n == len(labels):
        return np.arange(n)
    per, extra = divmod(n, num_classes)
    chosen = []
    for cls in range(num_classes):
        idx = np.flatnonzero(labels == cls)
        want = per + (1 if cls < extra else 0)
        if want > len(idx):
            raise ValueError(f"class {cls} has {len(idx)} samples, {want} needed for stratification")
        chosen.append(rng.choice(idx, size=want, replace=False))
    return np.sort(np.concatenate(chosen))


def subsample(dataset: Union[Dataset, Sequence[Dataset]], n_train: int, n_test: int, seed: int = 0) -> tuple:
    """Class-balanced deterministic subsets.

    Given a (train, test) pair each split is subsampled independently. Given
    a single dataset, disjoint train and test subsets are drawn from it.
    Selected samples keep their original order.
    """
    rng = np.random.default_rng(seed)
    if isinstance(dataset, Dataset):
        k = dataset.num_classes
        tr = stratified_indices(dataset.labels, n_train, k, rng)
        rest = np.setdiff1d(np.arange(len(dataset)), tr)
        te = rest[stratified_indices(dataset.labels[rest], n_test, k, rng)] if n_test else rest[:0]
        return dataset.take(tr), replace(dataset.take(te), split="test")
    train, test = dataset
    tr = stratified_indices(train.labels, n_train, train.num_classes, rng)
    te = stratified_indices(test.labels, n_test, test.num_classes, rng)
    return train.take(tr), test.take(te)
