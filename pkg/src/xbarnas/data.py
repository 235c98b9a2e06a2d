"""Synthetic image tasks, the XBDS raw tensor file, CIFAR-10 batches, splits."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .configio import atomic_write_bytes
from .errors import ConfigError, LabelRangeError, MagicMismatchError, MissingArtifactError, TruncatedFileError

MAGIC = b"XBDS"
VERSION = 1
_HEADER = struct.Struct("<4s6I")


@dataclass
class Dataset:
    images: np.ndarray  # float32 [count, C, H, W] in [0, 1]
    labels: np.ndarray  # int64 [count]
    classes: int
    tag: str = "train"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ConfigError(f"{len(self.images)} images but {len(self.labels)} labels")
        check_labels(self.labels, self.classes)

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, index, tag=None):
        return Dataset(self.images[index], self.labels[index], self.classes, tag or self.tag)


def check_labels(labels, classes):
    bad = np.flatnonzero((labels < 0) | (labels >= classes))
    if bad.size:
        raise LabelRangeError(int(bad[0]), int(labels[bad[0]]), classes)


@dataclass(frozen=True)
class SyntheticTaskSpec:
    classes: int = 10
    size: int = 16
    channels: int = 3
    count: int = 2000
    patterns: int = 2  # oriented bar gratings per class
    noise: float = 0.5
    seed: int = 0


def class_prototypes(spec: SyntheticTaskSpec):
    """One noiseless image per class: oriented bars plus a coloured blob."""
    rng = np.random.default_rng([spec.seed, 7919])
    s = spec.size
    yy, xx = np.mgrid[0:s, 0:s] / max(s - 1, 1)
    protos = np.zeros((spec.classes, spec.channels, s, s))
    for c in range(spec.classes):
        img = np.zeros((s, s))
        for p in range(spec.patterns):
            theta = np.pi * (c + p / spec.patterns) / spec.classes + rng.uniform(0, 0.2)
            freq = 2 * np.pi * rng.uniform(1.5, 3.0)
            phase = rng.uniform(0, 2 * np.pi)
            img += (np.sin(freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase) > 0) / spec.patterns
        cy, cx = rng.uniform(0.2, 0.8, 2)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / 0.03)
        tint = rng.uniform(0.2, 1.0, spec.channels)
        for ch in range(spec.channels):
            protos[c, ch] = 0.6 * img * tint[ch] + 0.4 * blob * tint[::-1][ch]
    return protos


def _draw(spec: SyntheticTaskSpec, count, stream, tag):
    if spec.classes < 1:
        raise ConfigError("synthetic task needs at least one class")
    if spec.size < 1 or spec.channels < 1 or count < 1 or spec.patterns < 1:
        raise ConfigError("size, channels, count and patterns must be positive")
    if spec.noise < 0:
        raise ConfigError("noise must be non-negative")
    protos = class_prototypes(spec)
    rng = np.random.default_rng([spec.seed, stream])
    labels = rng.permutation(np.arange(count) % spec.classes)
    images = protos[labels] + spec.noise * rng.standard_normal((count, spec.channels, spec.size, spec.size))
    images = np.clip(images, 0.0, 1.0).astype(np.float32)
    return Dataset(images, labels.astype(np.int64), spec.classes, tag)


def gen_synthetic(spec: SyntheticTaskSpec, tag="train") -> Dataset:
    """Balanced labels, class prototypes plus seeded Gaussian noise, clipped to [0, 1]."""
    return _draw(spec, spec.count, 0, tag)


def train_test(spec: SyntheticTaskSpec, test_count):
    """Independent train and test draws around the same class prototypes."""
    return gen_synthetic(spec, "train"), _draw(spec, test_count, 1, "test")


# XBDS file ------------------------------------------------------------------------


def encode_raw(ds: Dataset) -> bytes:
    count, c, h, w = ds.images.shape
    if ds.classes > 65536:
        raise ConfigError("labels are stored as u16; at most 65536 classes")
    header = _HEADER.pack(MAGIC, VERSION, count, c, h, w, ds.classes)
    return header + ds.images.astype("<f4").tobytes() + ds.labels.astype("<u2").tobytes()


def decode_raw(data: bytes, path=None, tag="train") -> Dataset:
    if len(data) < 4 or data[:4] != MAGIC:
        raise MagicMismatchError(f"{path or 'data'}: not an XBDS file (bad magic)")
    if len(data) < _HEADER.size:
        raise TruncatedFileError(_HEADER.size, len(data), path)
    _, version, count, c, h, w, classes = _HEADER.unpack_from(data)
    if version != VERSION:
        raise MagicMismatchError(f"{path or 'data'}: unsupported XBDS version {version}")
    n_img = count * c * h * w
    expected = _HEADER.size + 4 * n_img + 2 * count
    if len(data) != expected:
        raise TruncatedFileError(expected, len(data), path)
    images = np.frombuffer(data, "<f4", n_img, _HEADER.size).reshape(count, c, h, w).astype(np.float32)
    labels = np.frombuffer(data, "<u2", count, _HEADER.size + 4 * n_img).astype(np.int64)
    check_labels(labels, classes)
    return Dataset(images, labels, classes, tag)


def save_raw(ds: Dataset, path):
    atomic_write_bytes(path, encode_raw(ds))


def load_raw(path, tag="train") -> Dataset:
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise MissingArtifactError(f"dataset file not found: {path}") from None
    return decode_raw(data, path, tag)


# CIFAR-10 binary batches ------------------------------------------------------------

CIFAR_RECORD = 3073


def load_cifar_batch(path, tag="train") -> Dataset:
    """One CIFAR-10 binary batch: records of 1 label byte + 3072 pixel bytes."""
    data = Path(path).read_bytes()
    if len(data) % CIFAR_RECORD:
        count = len(data) // CIFAR_RECORD
        raise TruncatedFileError((count + 1) * CIFAR_RECORD, len(data), path)
    rec = np.frombuffer(data, np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    images = (rec[:, 1:].reshape(-1, 3, 32, 32) / 255.0).astype(np.float32)
    return Dataset(images, labels, 10, tag)


# splitting ------------------------------------------------------------------------


def split(ds: Dataset, val_fraction, seed):
    """Seeded disjoint, exhaustive (train, val) partition."""
    if not 0 < val_fraction < 1:
        raise ConfigError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    n = len(ds)
    n_val = int(round(val_fraction * n))
    if n_val == 0 or n_val == n:
        raise ConfigError(f"val_fraction {val_fraction} leaves an empty split of {n} samples")
    perm = np.random.default_rng(seed).permutation(n)
    val_idx = np.sort(perm[:n_val])
    train_idx = np.sort(perm[n_val:])
    return ds.subset(train_idx, "train"), ds.subset(val_idx, "val")
