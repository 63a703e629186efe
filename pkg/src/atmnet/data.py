"""Datasets: synthetic toy tasks and CIFAR-style binary records.

Images are stored channel-first, ``(N, 3, H, W)`` float32, scaled to [0, 1]
and then standardised per channel. Labels are int64 class indices.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError

CIFAR_SIDE = 32
CIFAR_PIXELS = 3 * CIFAR_SIDE * CIFAR_SIDE
CIFAR_RECORD = 1 + CIFAR_PIXELS

SYNTHETIC_TASKS = ("stripes", "spatial")


@dataclass
class Dataset:
    images: np.ndarray          # (N, 3, H, W) standardised float32
    labels: np.ndarray          # (N,) int64
    num_classes: int
    mean: np.ndarray            # per-channel statistics used for standardisation
    std: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def resolution(self) -> tuple[int, int]:
        return self.images.shape[2], self.images.shape[3]

    def batch(self, idx) -> tuple[np.ndarray, np.ndarray]:
        return self.images[idx], self.labels[idx]


def standardize(images: np.ndarray, stats=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-channel zero-mean unit-variance over the whole set.

    ``stats=(mean, std)`` reuses statistics from another split. Constant
    channels keep std 1 so they map to zero instead of NaN.
    """
    if stats is None:
        mean = images.mean(axis=(0, 2, 3))
        std = images.std(axis=(0, 2, 3))
        std = np.where(std > 1e-12, std, 1.0)
    else:
        mean, std = (np.asarray(a, dtype=np.float64) for a in stats)
    out = (images - mean[None, :, None, None]) / std[None, :, None, None]
    return out.astype(np.float32), mean.astype(np.float32), std.astype(np.float32)


def _make_dataset(raw: np.ndarray, labels: np.ndarray, num_classes: int, stats=None) -> Dataset:
    if len(labels) == 0:
        raise DataError("dataset is empty")
    images, mean, std = standardize(raw.astype(np.float64), stats)
    return Dataset(images, labels.astype(np.int64), num_classes, mean, std)


def hflip(images: np.ndarray, rng: np.random.Generator, p: float = 0.5) -> np.ndarray:
    """Flip each image left-right with probability ``p``."""
    mask = rng.random(len(images)) < p
    out = images.copy()
    out[mask] = out[mask][..., ::-1]
    return out


# ---------------------------------------------------------------------------
# synthetic tasks
# ---------------------------------------------------------------------------

def _stripes_sample(rng, res):
    """Label 0: straight stripes (random orientation); label 1: checkerboard."""
    label = int(rng.integers(2))
    period = int(rng.integers(2, 6))
    phase_i, phase_j = rng.integers(0, 2 * period, size=2)
    ii, jj = np.meshgrid(np.arange(res), np.arange(res), indexing="ij")
    bi = ((ii + phase_i) // period) % 2
    bj = ((jj + phase_j) // period) % 2
    if label == 0:
        pattern = bi if rng.random() < 0.5 else bj
    else:
        pattern = bi ^ bj
    fg, bg = rng.uniform(0.0, 1.0, size=(2, 3))
    while np.abs(fg - bg).sum() < 0.6:
        fg, bg = rng.uniform(0.0, 1.0, size=(2, 3))
    img = np.where(pattern[None] == 1, fg[:, None, None], bg[:, None, None])
    img = img + rng.normal(0.0, 0.05, size=img.shape)
    return np.clip(img, 0.0, 1.0), label


def _spatial_sample(rng, res):
    """Red and green squares at random spots; label 1 iff red is above green.

    Both classes have the same colour content, so only the relative
    position of the two squares separates them. Vertical order survives a
    horizontal flip, so flip augmentation stays label preserving.
    """
    size = max(2, res // 8)
    img = rng.uniform(0.0, 0.15, size=(3, res, res))
    while True:
        r = rng.integers(0, res - size + 1, size=2)
        g = rng.integers(0, res - size + 1, size=2)
        if abs(int(r[0]) - int(g[0])) >= size:
            break
    img[:, r[0]:r[0] + size, r[1]:r[1] + size] = np.array([0.9, 0.1, 0.1])[:, None, None]
    img[:, g[0]:g[0] + size, g[1]:g[1] + size] = np.array([0.1, 0.9, 0.1])[:, None, None]
    return img, int(r[0] < g[0])


_GENERATORS = {"stripes": _stripes_sample, "spatial": _spatial_sample}


def synthetic_raw(task: str, num_samples: int, resolution: int = 32, seed: int = 0):
    """Unnormalised ``(images in [0,1], labels)`` for a synthetic task."""
    if task not in _GENERATORS:
        raise DataError(f"unknown synthetic task {task!r}; choose from {SYNTHETIC_TASKS}")
    if num_samples < 1:
        raise DataError("num_samples must be >= 1")
    rng = np.random.default_rng(seed)
    gen = _GENERATORS[task]
    imgs, labels = zip(*(gen(rng, resolution) for _ in range(num_samples)))
    return np.stack(imgs).astype(np.float32), np.asarray(labels, dtype=np.int64)


def ingest_synthetic(task: str = "stripes", num_samples: int = 256, resolution: int = 32,
                     seed: int = 0, stats=None) -> Dataset:
    raw, labels = synthetic_raw(task, num_samples, resolution, seed)
    return _make_dataset(raw, labels, 2, stats)


# ---------------------------------------------------------------------------
# CIFAR-style binary records
# ---------------------------------------------------------------------------

def decode_cifar_records(buf: bytes, source: str = "<bytes>") -> tuple[np.ndarray, np.ndarray]:
    """Parse records of 1 label byte + 3072 CHW pixel bytes.

    Returns ``(images in [0,1] as (N,3,32,32) float32, labels)``.
    """
    if len(buf) == 0:
        raise FormatError(f"{source}: no records")
    full, rest = divmod(len(buf), CIFAR_RECORD)
    if rest:
        offset = full * CIFAR_RECORD
        raise FormatError(
            f"{source}: truncated record at byte offset {offset} "
            f"({rest} of {CIFAR_RECORD} bytes present)")
    arr = np.frombuffer(buf, dtype=np.uint8).reshape(full, CIFAR_RECORD)
    labels = arr[:, 0].astype(np.int64)
    images = arr[:, 1:].reshape(full, 3, CIFAR_SIDE, CIFAR_SIDE).astype(np.float32) / 255.0
    return images, labels


def ingest_cifar_binary(path, num_classes: int = 10, stats=None) -> Dataset:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror or exc}") from exc
    images, labels = decode_cifar_records(buf, str(path))
    if labels.max() >= num_classes:
        raise FormatError(f"{path}: label {int(labels.max())} outside [0, {num_classes})")
    return _make_dataset(images, labels, num_classes, stats)


def load_dataset(data_cfg, seed: int = 0) -> Dataset:
    """Build a dataset from a :class:`~atmnet.config.DataConfig`."""
    if data_cfg.kind == "synthetic":
        return ingest_synthetic(data_cfg.task, data_cfg.num_samples, data_cfg.resolution, seed)
    if data_cfg.kind == "cifar":
        if not data_cfg.path:
            raise DataError("cifar dataset needs a path")
        return ingest_cifar_binary(data_cfg.path)
    raise DataError(f"unknown dataset kind {data_cfg.kind!r}")
