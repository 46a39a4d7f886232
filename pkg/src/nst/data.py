"""Datasets: synthetic Gaussian blobs, IDX image files, and pad-crop-flip augmentation."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple

import numpy as np

TRAIN = "train"
TEST = "test"

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxError(ValueError):
    pass


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxCountMismatchError(IdxError):
    pass


@dataclass
class Dataset:
    """``images`` is either an N-C-H-W batch or an N x D feature matrix."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = TRAIN

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) != len(self.images):
            raise ValueError(f"{len(self.labels)} labels for {len(self.images)} images")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def as_images(self, shape: Tuple[int, int, int]) -> "Dataset":
        """Reshape flat feature rows into C-H-W images."""
        return Dataset(self.images.reshape(len(self), *shape), self.labels, self.num_classes, self.split)


def simplex_means(num_classes: int, dim: int) -> np.ndarray:
    """Vertices of a centred regular simplex: e_k minus the centroid, padded to ``dim``."""
    if dim < num_classes:
        raise ValueError(f"dim ({dim}) must be >= num_classes ({num_classes})")
    means = np.zeros((num_classes, dim))
    means[:, :num_classes] = np.eye(num_classes) - 1.0 / num_classes
    return means


def gen_blobs(num_classes: int, per_class: int, dim: int, spread: float, seed: int, split: str = TRAIN) -> Dataset:
    """Isotropic Gaussian clusters (std ``spread``) around simplex vertices.

    Samples are ordered class by class.
    """
    if num_classes < 2:
        raise ValueError(f"need at least 2 classes, got {num_classes}")
    rng = np.random.default_rng(seed)
    means = simplex_means(num_classes, dim)
    noise = rng.normal(0.0, 1.0, size=(num_classes, per_class, dim))
    x = means[:, None, :] + spread * noise
    y = np.repeat(np.arange(num_classes), per_class)
    return Dataset(x.reshape(-1, dim), y, num_classes, split)


def train_test_blobs(num_classes: int, train_per_class: int, test_per_class: int, dim: int, spread: float,
                     seed: int) -> Tuple[Dataset, Dataset]:
    """One blob draw split by index: the first ``train_per_class`` samples of each class train."""
    full = gen_blobs(num_classes, train_per_class + test_per_class, dim, spread, seed)
    per = train_per_class + test_per_class
    idx = np.arange(len(full)).reshape(num_classes, per)
    tr, te = idx[:, :train_per_class].ravel(), idx[:, train_per_class:].ravel()
    return (Dataset(full.images[tr], full.labels[tr], num_classes, TRAIN),
            Dataset(full.images[te], full.labels[te], num_classes, TEST))


def fit_normalizer(images: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std (per-feature for flat data); zero std becomes 1."""
    axes = (0, 2, 3) if images.ndim == 4 else (0,)
    mean = images.mean(axis=axes, keepdims=True)
    std = images.std(axis=axes, keepdims=True)
    std[std == 0] = 1.0
    return mean, std


def normalize(ds: Dataset, mean: np.ndarray, std: np.ndarray) -> Dataset:
    return Dataset((ds.images - mean) / std, ds.labels, ds.num_classes, ds.split)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images (N x H x W) and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, h, w = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


def load_idx(images_path, labels_path, num_classes: int = 10, split: str = TRAIN) -> Dataset:
    """Read an IDX image/label pair into an N x 1 x H x W batch scaled to [0, 1]."""
    img = Path(images_path).read_bytes()
    lab = Path(labels_path).read_bytes()
    if len(img) < 4 or struct.unpack(">I", img[:4])[0] != IDX_IMAGES_MAGIC:
        raise IdxMagicError(f"{images_path}: expected image magic 0x{IDX_IMAGES_MAGIC:08x}")
    if len(lab) < 4 or struct.unpack(">I", lab[:4])[0] != IDX_LABELS_MAGIC:
        raise IdxMagicError(f"{labels_path}: expected label magic 0x{IDX_LABELS_MAGIC:08x}")
    if len(img) < 16:
        raise IdxTruncatedError(f"{images_path}: header truncated")
    if len(lab) < 8:
        raise IdxTruncatedError(f"{labels_path}: header truncated")
    n, h, w = struct.unpack(">III", img[4:16])
    (n_labels,) = struct.unpack(">I", lab[4:8])
    if n != n_labels:
        raise IdxCountMismatchError(f"{n} images but {n_labels} labels")
    if len(img) < 16 + n * h * w:
        raise IdxTruncatedError(f"{images_path}: expected {n * h * w} pixel bytes, found {len(img) - 16}")
    if len(lab) < 8 + n:
        raise IdxTruncatedError(f"{labels_path}: expected {n} label bytes, found {len(lab) - 8}")
    pixels = np.frombuffer(img, dtype=np.uint8, count=n * h * w, offset=16)
    labels = np.frombuffer(lab, dtype=np.uint8, count=n, offset=8)
    images = pixels.reshape(n, 1, h, w).astype(np.float64) / 255.0
    return Dataset(images, labels.astype(np.int64), num_classes, split)


@dataclass(frozen=True)
class AugmentSpec:
    pad: int = 4
    crop: int = 32
    hflip_prob: float = 0.5

    def check(self, side_h: int, side_w: int) -> None:
        if self.pad < 0 or self.crop < 1:
            raise ValueError(f"invalid augmentation {self}")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValueError(f"hflip_prob must be in [0, 1], got {self.hflip_prob}")
        if self.crop > min(side_h, side_w) + 2 * self.pad:
            raise ValueError(f"crop {self.crop} exceeds padded side {min(side_h, side_w) + 2 * self.pad}")


def augment(batch: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    """Zero-pad, take a uniformly placed square crop, and flip horizontally at random."""
    batch = np.asarray(batch, dtype=np.float64)
    n, c, h, w = batch.shape
    spec.check(h, w)
    p = spec.pad
    padded = np.pad(batch, ((0, 0), (0, 0), (p, p), (p, p)))
    out = np.empty((n, c, spec.crop, spec.crop))
    for i in range(n):
        dy = int(rng.integers(0, h + 2 * p - spec.crop + 1))
        dx = int(rng.integers(0, w + 2 * p - spec.crop + 1))
        crop = padded[i, :, dy:dy + spec.crop, dx:dx + spec.crop]
        if rng.random() < spec.hflip_prob:
            crop = crop[:, :, ::-1]
        out[i] = crop
    return out
