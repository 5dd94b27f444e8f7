"""Dataset readers, the synthetic frequency dataset, augmentation and batching."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy import ndimage

__all__ = [
    "DataError",
    "LabeledImageSet",
    "AugmentSpec",
    "CIFAR10_CLASSES",
    "load_cifar10",
    "read_cifar10_batch",
    "load_mnist_idx",
    "read_idx",
    "make_synthetic_frequency_dataset",
    "SYNTHETIC_CLASSES",
    "channel_stats",
    "normalize",
    "denormalize",
    "hflip",
    "augment_and_batch",
]

CIFAR10_CLASSES = [
    "airplane", "automobile", "bird", "cat", "deer",
    "dog", "frog", "horse", "ship", "truck",
]
CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_RECORDS_PER_FILE = 10000

SYNTHETIC_CLASSES = ["low_frequency", "high_frequency", "mixed", "mid_stripes"]


class DataError(ValueError):
    """Malformed or missing dataset files."""


@dataclass
class LabeledImageSet:
    images: np.ndarray  # [N,C,H,W], values in [0,1] for raw sets
    labels: np.ndarray  # int64 [N]
    class_names: list
    split: str = "train"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"images must be [N,C,H,W], got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise DataError("labels outside [0, num_classes)")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def subset(self, indices) -> "LabeledImageSet":
        indices = np.asarray(indices)
        return replace(self, images=self.images[indices], labels=self.labels[indices])


@dataclass
class AugmentSpec:
    flip_prob: float = 0.5
    mean: tuple = (0.0, 0.0, 0.0)
    std: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError(f"flip_prob must be in [0,1], got {self.flip_prob}")
        if len(self.mean) != len(self.std):
            raise ValueError("mean and std need one entry per channel")
        if any(s <= 0 for s in self.std):
            raise ValueError("std entries must be positive")
        self.mean = tuple(float(v) for v in self.mean)
        self.std = tuple(float(v) for v in self.std)


# -- CIFAR-10 ---------------------------------------------------------------------

def read_cifar10_batch(path, expected_records: int | None = CIFAR_RECORDS_PER_FILE):
    """Parse one binary batch: ``(uint8 images [N,3,32,32], labels [N])``."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing CIFAR-10 batch file {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD:
        raise DataError(f"{path}: size {raw.size} is not a multiple of {CIFAR_RECORD}")
    n = raw.size // CIFAR_RECORD
    if expected_records is not None and n != expected_records:
        raise DataError(f"{path}: {n} records, expected {expected_records}")
    rec = raw.reshape(n, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise DataError(f"{path}: record {bad} has label byte {labels[bad]} > 9")
    return rec[:, 1:].reshape(n, 3, 32, 32), labels


def load_cifar10(root, expected_records: int | None = CIFAR_RECORDS_PER_FILE, dtype=np.float32):
    """Load ``data_batch_1..5.bin`` and ``test_batch.bin`` from ``root``.

    ``root`` may also be the parent of ``cifar-10-batches-bin``.
    """
    root = Path(root)
    if (root / "cifar-10-batches-bin").is_dir():
        root = root / "cifar-10-batches-bin"
    parts = [read_cifar10_batch(root / f"data_batch_{i}.bin", expected_records) for i in range(1, 6)]
    test_x, test_y = read_cifar10_batch(root / "test_batch.bin", expected_records)
    train_x = np.concatenate([p[0] for p in parts])
    train_y = np.concatenate([p[1] for p in parts])
    scale = dtype(1.0 / 255.0)
    train = LabeledImageSet(train_x.astype(dtype) * scale, train_y, list(CIFAR10_CLASSES), "train")
    test = LabeledImageSet(test_x.astype(dtype) * scale, test_y, list(CIFAR10_CLASSES), "test")
    return train, test


# -- MNIST IDX ------------------------------------------------------------------------

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def _open_maybe_gz(path: Path) -> bytes:
    if path.is_file():
        data = path.read_bytes()
    elif path.with_name(path.name + ".gz").is_file():
        data = path.with_name(path.name + ".gz").read_bytes()
    else:
        raise DataError(f"missing IDX file {path}")
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    return data


def read_idx(path, expected_magic: int) -> np.ndarray:
    """Read an unsigned-byte IDX file (big-endian header) into an array."""
    path = Path(path)
    data = _open_maybe_gz(path)
    if len(data) < 8:
        raise DataError(f"{path}: truncated header")
    (magic,) = struct.unpack(">I", data[:4])
    if magic != expected_magic:
        raise DataError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    dims = struct.unpack(f">{ndim}I", data[4:header])
    count = int(np.prod(dims))
    if len(data) - header < count:
        raise DataError(f"{path}: truncated, {len(data) - header} of {count} payload bytes")
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_mnist_idx(root, dtype=np.float32):
    root = Path(root)
    out = []
    for split, prefix in (("train", "train"), ("test", "t10k")):
        imgs = read_idx(root / f"{prefix}-images-idx3-ubyte", IDX_IMAGES_MAGIC)
        labels = read_idx(root / f"{prefix}-labels-idx1-ubyte", IDX_LABELS_MAGIC)
        if len(imgs) != len(labels):
            raise DataError(f"{root}: {split} has {len(imgs)} images but {len(labels)} labels")
        images = imgs[:, None].astype(dtype) * dtype(1.0 / 255.0)
        out.append(LabeledImageSet(images, labels, [str(d) for d in range(10)], split))
    return tuple(out)


# -- synthetic frequency dataset ----------------------------------------------------------

def _rescale(img: np.ndarray, lo: float, hi: float) -> np.ndarray:
    mn, mx = img.min(), img.max()
    return lo + (img - mn) * (hi - lo) / max(mx - mn, 1e-12)


def _smooth(rng, size=32):
    # Gaussian-blurred noise, sigma 4, per channel
    noise = rng.normal(size=(3, size, size))
    blurred = ndimage.gaussian_filter(noise, sigma=(0, 4, 4), mode="wrap")
    return _rescale(blurred, *sorted(rng.uniform(0.1, 0.9, size=2)))


def _texture(rng, size=32):
    kind = rng.integers(2)
    if kind == 0:
        yy, xx = np.mgrid[:size, :size]
        checker = ((yy + rng.integers(2)) + (xx + rng.integers(2))) % 2
        base = np.broadcast_to(checker, (3, size, size)).astype(float)
        base = base + 0.5 * rng.normal(size=(3, size, size))
    else:
        base = rng.normal(size=(3, size, size))
    amp = rng.uniform(0.15, 0.3)
    return 0.5 + amp * (base - base.mean()) / base.std()


def _stripes(rng, size=32):
    yy, xx = np.mgrid[:size, :size].astype(float)
    theta = rng.uniform(0, np.pi)
    period = rng.uniform(6.0, 10.0)
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period + phase)
    colour = rng.uniform(0.5, 1.0, size=3)[:, None, None]
    return 0.5 + 0.35 * colour * wave


def make_synthetic_frequency_dataset(n_per_class: int = 500, seed: int = 0, noise: float = 0.03,
                                     dtype=np.float32):
    """Four-class 3x32x32 images separable by their frequency content; 80/20 split.

    Classes: smooth blurred noise, fine texture, smooth + texture, mid-frequency
    stripes.  Pixels are clipped to [0,1].
    """
    if n_per_class < 50:
        raise ValueError("n_per_class must be >= 50")
    rng = np.random.default_rng(seed)
    images = np.empty((4 * n_per_class, 3, 32, 32), dtype=np.float64)
    labels = np.repeat(np.arange(4), n_per_class)
    for i, cls in enumerate(labels):
        if cls == 0:
            img = _smooth(rng)
        elif cls == 1:
            img = _texture(rng)
        elif cls == 2:
            img = _smooth(rng) + (_texture(rng) - 0.5)
        else:
            img = _stripes(rng)
        images[i] = img + noise * rng.normal(size=img.shape)
    images = np.clip(images, 0.0, 1.0).astype(dtype)
    n_train = int(round(0.8 * n_per_class))
    train_idx, test_idx = [], []
    for cls in range(4):
        idx = np.flatnonzero(labels == cls)
        perm = rng.permutation(idx)
        train_idx.append(np.sort(perm[:n_train]))
        test_idx.append(np.sort(perm[n_train:]))
    train_idx = np.concatenate(train_idx)
    test_idx = np.concatenate(test_idx)
    names = list(SYNTHETIC_CLASSES)
    return (
        LabeledImageSet(images[train_idx], labels[train_idx], names, "train"),
        LabeledImageSet(images[test_idx], labels[test_idx], names, "test"),
    )


# -- normalization / augmentation -------------------------------------------------------------

def channel_stats(images: np.ndarray) -> tuple[tuple, tuple]:
    """Per-channel mean and std over a whole split (computed in float64)."""
    x = images.astype(np.float64)
    return tuple(x.mean(axis=(0, 2, 3)).tolist()), tuple(x.std(axis=(0, 2, 3)).tolist())


def normalize(images: np.ndarray, mean, std) -> np.ndarray:
    m = np.asarray(mean, dtype=images.dtype).reshape(1, -1, 1, 1)
    s = np.asarray(std, dtype=images.dtype).reshape(1, -1, 1, 1)
    return (images - m) / s


def denormalize(images: np.ndarray, mean, std) -> np.ndarray:
    m = np.asarray(mean, dtype=images.dtype).reshape(1, -1, 1, 1)
    s = np.asarray(std, dtype=images.dtype).reshape(1, -1, 1, 1)
    return images * s + m


def hflip(images: np.ndarray) -> np.ndarray:
    return images[..., ::-1]


def augment_and_batch(
    data: LabeledImageSet,
    spec: AugmentSpec,
    batch_size: int,
    shuffle_seed: int | None = None,
    train: bool = True,
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield normalized ``(images, labels)`` batches for one pass over ``data``.

    Training passes shuffle with ``shuffle_seed`` and flip each image with
    ``spec.flip_prob``; evaluation passes keep order and never flip.  The last
    partial batch is kept.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(data)
    if train:
        rng = np.random.default_rng(shuffle_seed)
        order = rng.permutation(n)
        flips = rng.random(n) < spec.flip_prob
    else:
        order = np.arange(n)
        flips = np.zeros(n, dtype=bool)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        x = data.images[idx].copy()
        f = flips[start:start + batch_size]
        if f.any():
            x[f] = hflip(x[f])
        yield normalize(x, spec.mean, spec.std), data.labels[idx]
