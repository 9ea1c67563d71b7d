"""CIFAR binary ingestion, normalization and augmentation."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

DATA_ROOT_ENV = "GUNN_DATA_ROOT"
IMAGE_BYTES = 3 * 32 * 32

_FILES = {
    (10, "train"): [f"data_batch_{i}.bin" for i in range(1, 6)],
    (10, "test"): ["test_batch.bin"],
    (100, "train"): ["train.bin"],
    (100, "test"): ["test.bin"],
}
_SUBDIRS = {10: "cifar-10-batches-bin", 100: "cifar-100-binary"}


class DataError(ValueError):
    """Missing or malformed dataset files."""


@dataclass(frozen=True)
class DatasetSource:
    root: str
    split: str = "train"
    classes: int = 10
    subset_size: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise DataError(f"split must be train or test, got {self.split!r}")
        if self.classes not in (10, 100):
            raise DataError(f"classes must be 10 or 100, got {self.classes}")


def default_root() -> Optional[str]:
    return os.environ.get(DATA_ROOT_ENV)


def record_size(classes: int) -> int:
    return IMAGE_BYTES + (1 if classes == 10 else 2)


def split_files(root, classes: int, split: str) -> list[Path]:
    """Locate the binary files for a split, directly under ``root`` or its usual subdirectory."""
    root = Path(root)
    names = _FILES[(classes, split)]
    for base in (root, root / _SUBDIRS[classes]):
        paths = [base / n for n in names]
        if all(p.is_file() for p in paths):
            return paths
    raise DataError(f"CIFAR-{classes} {split} files {names} not found under {root}")


def read_records(path, classes: int) -> tuple[np.ndarray, np.ndarray]:
    """Raw ``uint8`` images ``(n, 3, 32, 32)`` and labels from one binary file.

    CIFAR-100 records carry a coarse then a fine label byte; the fine one is used.
    """
    raw = np.fromfile(path, dtype=np.uint8)
    rec = record_size(classes)
    if raw.size == 0 or raw.size % rec:
        full = raw.size // rec
        raise DataError(
            f"{path}: size {raw.size} bytes is not a whole number of {rec}-byte records; "
            f"record {full} truncated at byte offset {full * rec}"
        )
    rows = raw.reshape(-1, rec)
    label_col = 0 if classes == 10 else 1
    labels = rows[:, label_col].astype(np.int64)
    bad = np.flatnonzero(labels >= classes)
    if bad.size:
        i = int(bad[0])
        raise DataError(f"{path}: label {labels[i]} out of range at byte offset {i * rec + label_col}")
    images = rows[:, rec - IMAGE_BYTES :].reshape(-1, 3, 32, 32)
    return images, labels


def _read_split(root, classes: int, split: str):
    parts = [read_records(p, classes) for p in split_files(root, classes, split)]
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def channel_stats(images_u8: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std of images scaled to [0, 1]."""
    x = images_u8.astype(np.float64) / 255.0
    return x.mean(axis=(0, 2, 3)), x.std(axis=(0, 2, 3))


def train_stats(root, classes: int = 10) -> tuple[np.ndarray, np.ndarray]:
    images, _ = _read_split(root, classes, "train")
    return channel_stats(images)


def normalize(images_u8: np.ndarray, mean, std, dtype=np.float64) -> np.ndarray:
    x = images_u8.astype(np.float64) / 255.0
    x = (x - np.asarray(mean)[None, :, None, None]) / np.asarray(std)[None, :, None, None]
    return x.astype(dtype)


def load_cifar(source: DatasetSource, mean=None, std=None, dtype=np.float64):
    """Normalized images ``(n, 3, 32, 32)`` and labels for a split.

    Normalization constants default to the training split's channel
    statistics. With ``subset_size`` a seeded random subset (kept in file
    order) is returned.
    """
    images, labels = _read_split(source.root, source.classes, source.split)
    if mean is None or std is None:
        if source.split == "train":
            mean, std = channel_stats(images)
        else:
            mean, std = train_stats(source.root, source.classes)
    if source.subset_size is not None:
        if source.subset_size > len(labels):
            raise DataError(f"subset of {source.subset_size} from a split of {len(labels)}")
        idx = np.sort(np.random.default_rng(source.seed).choice(len(labels), source.subset_size, replace=False))
        images, labels = images[idx], labels[idx]
    return normalize(images, mean, std, dtype), labels


def write_records(path, images_u8: np.ndarray, labels, classes: int = 10, coarse=None) -> None:
    """Write images and labels in the CIFAR binary layout."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8).reshape(len(labels), IMAGE_BYTES)
    cols = [np.asarray(labels, dtype=np.uint8)[:, None]]
    if classes == 100:
        c = np.zeros(len(labels), np.uint8) if coarse is None else np.asarray(coarse, np.uint8)
        cols.insert(0, c[:, None])
    np.concatenate(cols + [images_u8], axis=1).tofile(path)


# ----------------------------------------------------------------------------
# augmentation

PAD = 4


def apply_augment(batch: np.ndarray, flips: np.ndarray, shifts: np.ndarray) -> np.ndarray:
    """Mirror the flagged images, then shift each by ``(dy, dx)`` with zero fill."""
    b, c, h, w = batch.shape
    out = np.where(flips[:, None, None, None], batch[..., ::-1], batch)
    padded = np.zeros((b, c, h + 2 * PAD, w + 2 * PAD), dtype=batch.dtype)
    padded[:, :, PAD : PAD + h, PAD : PAD + w] = out
    res = np.empty_like(batch)
    for i, (dy, dx) in enumerate(shifts):
        r, s = PAD + dy, PAD + dx
        res[i] = padded[i, :, r : r + h, s : s + w]
    return res


def augment(batch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random horizontal mirroring (p = 1/2) and shifts of up to 4 pixels."""
    flips = rng.random(len(batch)) < 0.5
    shifts = rng.integers(-PAD, PAD + 1, size=(len(batch), 2))
    return apply_augment(batch, flips, shifts)
