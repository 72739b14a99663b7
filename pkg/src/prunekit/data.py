"""Dataset ingestion: synthetic class-conditional images and CIFAR-10 binaries."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .tensor import Tensor

CIFAR_RECORD = 3073  # 1 label byte + 32*32*3 pixel bytes
CIFAR_BATCH_RECORDS = 10000


class DataError(ValueError):
    """Dataset file or parameter is malformed."""


@dataclass
class Dataset:
    """Train/test image splits in [0,1] plus per-channel normalization stats."""
    train_images: np.ndarray  # [B,C,H,W] float64 in [0,1]
    train_labels: np.ndarray  # int64
    test_images: np.ndarray
    test_labels: np.ndarray
    mean: np.ndarray          # per channel, from the train split
    std: np.ndarray
    num_classes: int

    def __post_init__(self):
        for name, imgs, labels in (("train", self.train_images, self.train_labels),
                                   ("test", self.test_images, self.test_labels)):
            if imgs.ndim != 4 or len(labels) != len(imgs):
                raise DataError(f"{name} split images/labels are inconsistent")
            if len(labels) and (labels.min() < 0 or labels.max() >= self.num_classes):
                raise DataError(f"{name} split has labels outside [0, {self.num_classes})")
            if not np.isfinite(imgs).all():
                raise DataError(f"{name} split contains non-finite pixels")

    @property
    def image_shape(self) -> tuple:
        return self.train_images.shape[1:]

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        if name == "train":
            return self.train_images, self.train_labels
        if name == "test":
            return self.test_images, self.test_labels
        raise DataError(f"unknown split {name!r}")

    def normalized(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        imgs, labels = self.split(name)
        if not len(imgs):
            raise DataError(f"split {name!r} is empty")
        m = self.mean.reshape(1, -1, 1, 1)
        s = self.std.reshape(1, -1, 1, 1)
        return (imgs - m) / s, labels

    def sample_batch(self, name: str, batch_size: int,
                     rng: np.random.Generator) -> tuple[Tensor, np.ndarray]:
        imgs, labels = self.normalized(name)
        idx = rng.integers(0, len(imgs), size=min(batch_size, len(imgs)))
        return Tensor(imgs[idx]), labels[idx]

    def iter_batches(self, name: str, batch_size: int,
                     rng: Optional[np.random.Generator] = None
                     ) -> Iterator[tuple[Tensor, np.ndarray]]:
        """One pass over the split; shuffled when an rng is supplied."""
        imgs, labels = self.normalized(name)
        order = rng.permutation(len(imgs)) if rng is not None else np.arange(len(imgs))
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            yield Tensor(imgs[idx]), labels[idx]


def _normalization(train_images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = train_images.mean(axis=(0, 2, 3))
    std = train_images.std(axis=(0, 2, 3))
    return mean, np.maximum(std, 1e-6)


def synth_dataset(classes: int, per_class: int, image_size: int = 12, seed: int = 0,
                  test_per_class: Optional[int] = None, channels: int = 3) -> Dataset:
    """Class-conditional structured images: each class gets its own grating
    frequency/orientation, blob position, and channel emphasis, plus noise.
    Deterministic for a fixed seed; label histograms are exactly uniform."""
    if classes < 2:
        raise DataError(f"need at least 2 classes, got {classes}")
    if per_class < 1 or image_size < 4 or channels < 1:
        raise DataError("degenerate dataset size")
    if test_per_class is None:
        test_per_class = max(1, per_class // 5)
    rng = np.random.default_rng(seed)

    yy, xx = np.meshgrid(np.linspace(0, 1, image_size), np.linspace(0, 1, image_size),
                         indexing="ij")

    def make(count_per_class: int) -> tuple[np.ndarray, np.ndarray]:
        images = np.zeros((classes * count_per_class, channels, image_size, image_size))
        labels = np.zeros(classes * count_per_class, dtype=np.int64)
        i = 0
        for k in range(classes):
            freq = 1.5 + k
            theta = np.pi * k / classes
            u = xx * np.cos(theta) + yy * np.sin(theta)
            cx = 0.5 + 0.28 * np.cos(2 * np.pi * k / classes)
            cy = 0.5 + 0.28 * np.sin(2 * np.pi * k / classes)
            ch_w = 0.65 + 0.35 * (np.arange(channels) == (k % channels))
            for _ in range(count_per_class):
                phase = rng.uniform(0, 2 * np.pi)
                jx, jy = rng.normal(0, 0.09, size=2)
                amp = rng.uniform(0.8, 1.2)
                grating = 0.5 + 0.5 * np.sin(2 * np.pi * freq * u + phase)
                blob = np.exp(-(((xx - cx - jx) ** 2 + (yy - cy - jy) ** 2)
                                / (2 * 0.12 ** 2)))
                base = 0.24 * grating + 0.32 * amp * blob
                img = ch_w[:, None, None] * base[None]
                img += rng.normal(0, 0.30, size=img.shape)
                images[i] = np.clip(img, 0.0, 1.0)
                labels[i] = k
                i += 1
        return images, labels

    train_images, train_labels = make(per_class)
    test_images, test_labels = make(test_per_class)
    mean, std = _normalization(train_images)
    return Dataset(train_images, train_labels, test_images, test_labels,
                   mean, std, classes)


def _read_cifar_file(path: str) -> tuple[np.ndarray, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) != CIFAR_RECORD * CIFAR_BATCH_RECORDS:
        raise DataError(
            f"{path}: expected {CIFAR_RECORD * CIFAR_BATCH_RECORDS} bytes, got {len(blob)}")
    raw = np.frombuffer(blob, dtype=np.uint8).reshape(CIFAR_BATCH_RECORDS, CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise DataError(f"{path}: label byte {labels.max()} > 9")
    images = raw[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return images, labels


def load_cifar10(data_dir: str, train_cap: Optional[int] = None,
                 test_cap: Optional[int] = None) -> Dataset:
    """Read the standard CIFAR-10 binary batches (data_batch_1..5.bin, test_batch.bin)."""
    train_parts = []
    for i in range(1, 6):
        path = os.path.join(data_dir, f"data_batch_{i}.bin")
        if not os.path.exists(path):
            raise DataError(f"missing CIFAR batch file {path}")
        train_parts.append(_read_cifar_file(path))
    train_images = np.concatenate([p[0] for p in train_parts])
    train_labels = np.concatenate([p[1] for p in train_parts])
    test_images, test_labels = _read_cifar_file(os.path.join(data_dir, "test_batch.bin"))
    if train_cap is not None:
        train_images, train_labels = train_images[:train_cap], train_labels[:train_cap]
    if test_cap is not None:
        test_images, test_labels = test_images[:test_cap], test_labels[:test_cap]
    mean, std = _normalization(train_images)
    return Dataset(train_images, train_labels, test_images, test_labels, mean, std, 10)
