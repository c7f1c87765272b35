"""Labeled image datasets: synthetic generators and IDX file loading."""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigError
from .formats import read_idx

SYNTH_TASKS = ("gaussian-blobs", "striped-textures")


@dataclass
class Dataset:
    images: np.ndarray  # (n, C, H, W) float32
    labels: np.ndarray  # (n,) int64

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ConfigError(f"images must be (n, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ConfigError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.images) == 0:
            raise ConfigError("dataset is empty")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1

    def subset(self, index) -> "Dataset":
        return Dataset(self.images[index], self.labels[index])

    def split(self, n_first: int) -> tuple["Dataset", "Dataset"]:
        return self.subset(slice(0, n_first)), self.subset(slice(n_first, None))


def _balanced_labels(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % k)


def _striped(n: int, k: int, size: int, rng: np.random.Generator) -> Dataset:
    # Class sets the stripe period; orientation, phase and contrast vary freely.
    labels = _balanced_labels(n, k, rng)
    periods = np.geomspace(4.5, 6.0, k) if k > 1 else np.array([5.0])
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    theta = rng.uniform(0, np.pi, n)
    phase = rng.uniform(0, 2 * np.pi, n)
    amp = rng.uniform(0.6, 1.0, n)
    freq = 2 * np.pi / periods[labels]
    proj = xx[None] * np.cos(theta)[:, None, None] + yy[None] * np.sin(theta)[:, None, None]
    img = amp[:, None, None] * np.sin(freq[:, None, None] * proj + phase[:, None, None])
    img += rng.normal(0, 0.9, img.shape)
    return Dataset(img[:, None].astype(np.float32), labels)


def _blobs(n: int, k: int, size: int, rng: np.random.Generator) -> Dataset:
    # Class sets the blob colour; position and width vary freely.
    labels = _balanced_labels(n, k, rng)
    colours = np.full((k, 3), 0.15)
    for c in range(k):
        colours[c, c % 3] = 1.0
        colours[c, (c + 1) % 3] += 0.35 * (c // 3)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy = rng.uniform(3, size - 3, n)
    cx = rng.uniform(3, size - 3, n)
    sigma = rng.uniform(1.5, 3.0, n)
    blob = np.exp(-((yy[None] - cy[:, None, None]) ** 2 + (xx[None] - cx[:, None, None]) ** 2)
                  / (2 * sigma[:, None, None] ** 2))
    img = colours[labels][:, :, None, None] * blob[:, None]
    img += rng.normal(0, 0.1, img.shape)
    return Dataset(img.astype(np.float32), labels)


def synth_dataset(kind: str, n: int, seed: int, n_classes: int = 2, size: int = 16) -> Dataset:
    """Deterministic synthetic task.

    ``striped-textures`` gives 1-channel sinusoidal gratings whose period
    depends on the class while orientation varies within each class.
    ``gaussian-blobs`` gives 3-channel images with one class-coloured blob.
    Labels are balanced to within one sample.
    """
    if n < 1:
        raise ConfigError(f"synthetic dataset needs n >= 1, got {n}")
    if n_classes < 1:
        raise ConfigError("n_classes must be >= 1")
    rng = np.random.default_rng(seed)
    if kind == "striped-textures":
        return _striped(n, n_classes, size, rng)
    if kind == "gaussian-blobs":
        return _blobs(n, n_classes, size, rng)
    raise ConfigError(f"unknown synthetic task {kind!r}; expected one of {SYNTH_TASKS}")


def load_idx_dataset(images_path: str | os.PathLike, labels_path: str | os.PathLike) -> Dataset:
    """Load an IDX image/label pair. uint8 pixels are scaled to [0, 1]."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim == 3:
        images = images[:, None]
    elif images.ndim != 4:
        raise ConfigError(f"{images_path}: expected 3-d or 4-d IDX images, got rank {images.ndim}")
    if labels.ndim != 1:
        raise ConfigError(f"{labels_path}: expected 1-d IDX labels, got rank {labels.ndim}")
    scale = 1.0 / 255.0 if images.dtype == np.uint8 else 1.0
    return Dataset(images.astype(np.float32) * scale, labels.astype(np.int64))
