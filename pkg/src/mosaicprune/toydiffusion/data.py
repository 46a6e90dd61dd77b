"""Procedural two-class Gaussian-blob images.

Class 0 puts a blob near the top-left corner, class 1 near the bottom-right.
Amplitude, width and a small position jitter are random. Images are shifted
and scaled by constants measured once on a large reference draw, so every
split shares the same normalization (zero mean, unit variance per element).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

CENTERS = {0: (2.0, 2.0), 1: (5.0, 5.0)}
_REFERENCE_SEED = 20240601
_REFERENCE_SIZE = 65536


@dataclass
class BlobDataset:
    images: np.ndarray  # (n, 1, size, size) float32, normalized
    labels: np.ndarray  # (n,) int64

    def __len__(self):
        return len(self.labels)

    def batch(self, idx):
        return self.images[idx], self.labels[idx]


def _raw_blobs(n: int, size: int, rng: np.random.Generator):
    labels = rng.integers(0, 2, size=n)
    amp = rng.uniform(0.5, 1.5, size=n)
    width = rng.uniform(0.8, 1.6, size=n)
    jitter = rng.uniform(-0.5, 0.5, size=(n, 2))
    centers = np.array([CENTERS[int(c)] for c in labels]) + jitter
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    dy = yy[None] - centers[:, 0, None, None]
    dx = xx[None] - centers[:, 1, None, None]
    img = amp[:, None, None] * np.exp(-(dx**2 + dy**2) / (2 * width[:, None, None] ** 2))
    return img[:, None].astype(np.float64), labels.astype(np.int64)


@lru_cache(maxsize=None)
def normalization(size: int = 8) -> tuple[float, float]:
    img, _ = _raw_blobs(_REFERENCE_SIZE, size, np.random.default_rng(_REFERENCE_SEED))
    return float(img.mean()), float(img.std())


def make_blob_dataset(n: int, seed: int, size: int = 8) -> BlobDataset:
    if n < 1:
        raise ValueError("dataset size must be >= 1")
    img, labels = _raw_blobs(n, size, np.random.default_rng(seed))
    mean, std = normalization(size)
    return BlobDataset(((img - mean) / std).astype(np.float32), labels)
