"""Dataset ingestion: MNIST IDX, CIFAR-10 binary, and a synthetic blob task.

The synthetic generator keeps the full test suite runnable offline; the real
loaders parse the two fully-documented binary formats without third-party
decoders. All loaders are pure functions of the file bytes.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from . import rng
from .errors import (
    DataCountMismatchError,
    DataMagicError,
    DataTruncationError,
    InvalidTransformError,
    LabelError,
)
from .tensor import Tensor

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 3073  # 1 label byte + 3*32*32 channel-planar pixels


@dataclass
class Dataset:
    images: Tensor          # [N, C, H, W], values typically in [0, 1]
    labels: np.ndarray      # int64 [N]
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.images.shape) != 4:
            raise DataTruncationError(f"images must be [N,C,H,W], got {self.images.shape}")
        n = self.images.shape[0]
        if n < 1 or len(self.labels) != n:
            raise DataCountMismatchError(
                f"{len(self.labels)} labels for {n} images"
            )
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise LabelError(
                f"labels must lie in [0, {self.num_classes}), "
                f"got range [{self.labels.min()}, {self.labels.max()}]"
            )

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def channels(self) -> int:
        return self.images.shape[1]

    def subset(self, indices: np.ndarray, split: Optional[str] = None) -> "Dataset":
        sel = np.asarray(indices)
        return Dataset(
            images=Tensor._wrap(self.images.array[sel].copy()),
            labels=self.labels[sel].copy(),
            num_classes=self.num_classes,
            split=self.split if split is None else split,
        )


def _read_file(path) -> bytes:
    p = Path(path)
    raw = p.read_bytes()
    if p.suffix == ".gz":
        raw = gzip.decompress(raw)
    return raw


def load_mnist_idx(images_path, labels_path) -> Dataset:
    """Parse the big-endian IDX pair into a [N,1,28,28] dataset scaled to [0,1]."""
    img_raw = _read_file(images_path)
    lab_raw = _read_file(labels_path)

    if len(img_raw) < 16:
        raise DataTruncationError(f"image file header needs 16 bytes, got {len(img_raw)}")
    magic, n, rows, cols = struct.unpack(">IIII", img_raw[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise DataMagicError(f"image file magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
    expected = 16 + n * rows * cols
    if len(img_raw) < expected:
        raise DataTruncationError(f"image file has {len(img_raw)} bytes, needs {expected}")

    if len(lab_raw) < 8:
        raise DataTruncationError(f"label file header needs 8 bytes, got {len(lab_raw)}")
    lmagic, ln = struct.unpack(">II", lab_raw[:8])
    if lmagic != IDX_LABELS_MAGIC:
        raise DataMagicError(f"label file magic 0x{lmagic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
    if ln != n:
        raise DataCountMismatchError(f"{ln} labels for {n} images")
    if len(lab_raw) < 8 + ln:
        raise DataTruncationError(f"label file has {len(lab_raw)} bytes, needs {8 + ln}")

    pixels = np.frombuffer(img_raw, dtype=np.uint8, count=n * rows * cols, offset=16)
    images = (pixels.astype(np.float32) / np.float32(255.0)).reshape(n, 1, rows, cols)
    labels = np.frombuffer(lab_raw, dtype=np.uint8, count=ln, offset=8).astype(np.int64)
    if labels.size and labels.max() > 9:
        raise LabelError(f"label byte {labels.max()} > 9")
    return Dataset(images=Tensor._wrap(images), labels=labels, num_classes=10)


def load_cifar10_bin(paths: Sequence) -> Dataset:
    """Parse CIFAR-10 binary batches (3073-byte records) into [N,3,32,32]."""
    chunks = []
    labels = []
    for path in paths:
        raw = _read_file(path)
        if len(raw) % CIFAR_RECORD_BYTES != 0:
            offset = len(raw) - (len(raw) % CIFAR_RECORD_BYTES)
            raise DataTruncationError(
                f"{path}: length {len(raw)} not a multiple of {CIFAR_RECORD_BYTES}; "
                f"record truncated at byte offset {offset}"
            )
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
        lab = rec[:, 0].astype(np.int64)
        if lab.size and lab.max() > 9:
            bad = int(np.argmax(lab > 9))
            raise LabelError(f"{path}: record {bad} has label byte {lab[bad]} > 9")
        chunks.append(rec[:, 1:].reshape(-1, 3, 32, 32))
        labels.append(lab)
    pixels = np.concatenate(chunks).astype(np.float32) / np.float32(255.0)
    return Dataset(images=Tensor._wrap(pixels), labels=np.concatenate(labels), num_classes=10)


# -- synthetic task ----------------------------------------------------------

# Blob geometry, as fractions of the image side. Jitter is deliberately large
# relative to the center spacing so the classes overlap a little; that keeps
# the task non-trivial and its decision boundary sensitive to activation
# distribution shifts.
_CENTER_RADIUS = 0.26
_CENTER_JITTER = 0.11
_BLOB_SIGMA = 0.17
_SIGMA_JITTER = 0.25      # relative spread of the blob width
_AMPLITUDE_RANGE = (0.5, 1.0)
_PIXEL_NOISE = 0.12


def synthetic_blobs(
    n_per_class: int,
    classes: int,
    image_size: int,
    seed: int,
    split: str = "train",
) -> Dataset:
    """Class-conditional Gaussian blob images, deterministic per seed.

    Class k places a blob near a fixed angular position on a ring; per-sample
    jitter moves the center, varies width/brightness and adds pixel noise.
    """
    if min(n_per_class, classes, image_size) < 1:
        raise ValueError("n_per_class, classes and image_size must be positive")
    g = rng.stream(seed, rng.DATAGEN, 0)
    side = float(image_size)
    cy0 = cx0 = (side - 1.0) / 2.0
    ring = _CENTER_RADIUS * side
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)

    n_total = n_per_class * classes
    images = np.empty((n_total, 1, image_size, image_size), dtype=np.float32)
    labels = np.empty(n_total, dtype=np.int64)
    i = 0
    for k in range(classes):
        angle = 2.0 * np.pi * k / classes
        base_cy = cy0 + ring * np.sin(angle)
        base_cx = cx0 + ring * np.cos(angle)
        for _ in range(n_per_class):
            cy = base_cy + g.normal(0.0, _CENTER_JITTER * side)
            cx = base_cx + g.normal(0.0, _CENTER_JITTER * side)
            sigma = _BLOB_SIGMA * side * (1.0 + g.normal(0.0, _SIGMA_JITTER))
            sigma = max(sigma, 0.05 * side)
            amp = g.uniform(*_AMPLITUDE_RANGE)
            img = amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma * sigma))
            img += g.normal(0.0, _PIXEL_NOISE, size=img.shape)
            images[i, 0] = np.clip(img, 0.0, 1.0)
            labels[i] = k
            i += 1
    perm = g.permutation(n_total)
    return Dataset(
        images=Tensor._wrap(images[perm].copy()),
        labels=labels[perm],
        num_classes=classes,
        split=split,
    )


# -- transforms and iteration -------------------------------------------------


def normalize(d: Dataset, mean: Sequence[float], std: Sequence[float]) -> Dataset:
    """Per-channel (x - mean) / std."""
    mean_a = np.asarray(mean, dtype=np.float32).reshape(-1)
    std_a = np.asarray(std, dtype=np.float32).reshape(-1)
    if len(mean_a) != d.channels or len(std_a) != d.channels:
        raise InvalidTransformError(
            f"need {d.channels} per-channel values, got {len(mean_a)}/{len(std_a)}"
        )
    if np.any(std_a <= 0):
        raise InvalidTransformError("std must be > 0 per channel")
    out = (d.images.array - mean_a[None, :, None, None]) / std_a[None, :, None, None]
    return Dataset(Tensor._wrap(out), d.labels.copy(), d.num_classes, d.split)


def split_train_val(d: Dataset, val_fraction: float = 0.1, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Deterministic shuffle-split; the last fraction becomes the val split."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must be in (0,1), got {val_fraction}")
    perm = rng.stream(seed, rng.SHUFFLE, 0).permutation(len(d))
    n_val = max(1, int(round(len(d) * val_fraction)))
    return d.subset(perm[: len(d) - n_val], "train"), d.subset(perm[len(d) - n_val :], "val")


def iter_batches(
    d: Dataset,
    batch_size: int,
    shuffle_seed: Optional[int] = None,
    epoch: int = 0,
    min_batch: int = 1,
) -> Iterator[tuple[Tensor, np.ndarray]]:
    """Yield (images, labels) batches; order is a pure function of (seed, epoch).

    A trailing batch smaller than ``min_batch`` is dropped (statistics-updating
    modes need at least two samples).
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    n = len(d)
    if shuffle_seed is None:
        order = np.arange(n)
    else:
        order = rng.stream(shuffle_seed, rng.SHUFFLE, epoch).permutation(n)
    for start in range(0, n, batch_size):
        sel = order[start : start + batch_size]
        if len(sel) < min_batch:
            return
        yield Tensor._wrap(d.images.array[sel].copy()), d.labels[sel]
