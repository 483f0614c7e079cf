"""Datasets: seeded Gaussian blobs and IDX image files."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .formats import encode_idx, load_idx


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise ValueError("inputs and labels differ in length")

    def __len__(self):
        return len(self.y)


def synthetic_blobs(num_classes: int, shape, samples: int, noise: float, seed: int):
    """Gaussian blobs, one standard-normal center per class.

    Algorithm (numpy PCG64 seeded with ``seed``): draw the class centers
    ``(num_classes, d)`` from a standard normal, then the labels as a random
    permutation of ``arange(samples) % num_classes``, then unit-normal
    noise ``(samples, d)`` scaled by ``noise``. Inputs are reshaped to ``shape``.
    """
    shape = tuple(int(s) for s in np.atleast_1d(shape))
    d = int(np.prod(shape))
    rng = np.random.Generator(np.random.PCG64(seed))
    centers = rng.standard_normal((num_classes, d))
    labels = rng.permutation(np.arange(samples) % num_classes)
    x = centers[labels] + noise * rng.standard_normal((samples, d))
    return Dataset(x.reshape((samples,) + shape), labels.astype(np.int64))


def blob_split(num_classes, shape, train, eval_, noise, seed):
    """Train and eval sets drawn from the same blobs."""
    full = synthetic_blobs(num_classes, shape, train + eval_, noise, seed)
    return Dataset(full.x[:train], full.y[:train]), Dataset(full.x[train:], full.y[train:])


def idx_dataset(image_path, label_path, mean: float = 0.0, std: float = 1.0, shape=None):
    """Load IDX files as ``(pixel/255 - mean) / std`` with shape ``(n, 1, h, w)`` unless given."""
    images, labels = load_idx(image_path, label_path)
    x = (images.astype(np.float64) / 255.0 - mean) / std
    x = x.reshape((len(x),) + tuple(shape)) if shape is not None else x[:, None, :, :]
    return Dataset(x, labels.astype(np.int64))


def quantize(x: np.ndarray, scale: float = 4.0) -> np.ndarray:
    """Map reals in [-scale, scale] linearly onto 0..255 (clipped)."""
    return np.clip(np.rint((x + scale) * (255.0 / (2 * scale))), 0, 255).astype(np.uint8)


def write_idx_pair(ds: Dataset, image_path, label_path, height: int, width: int, scale: float = 4.0):
    images = quantize(ds.x.reshape(len(ds), height, width), scale)
    with open(image_path, "wb") as fh:
        fh.write(encode_idx(images))
    with open(label_path, "wb") as fh:
        fh.write(encode_idx(ds.y.astype(np.uint8)))
