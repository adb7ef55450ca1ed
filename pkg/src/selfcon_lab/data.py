"""Datasets, augmentations and single-/multi-view batch construction.

Multi-view batches follow the usual contrastive layout: 2B rows where row
``B + i`` is an augmented copy of row ``i`` and carries the same label.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Dataset",
    "AugmentationPolicy",
    "ViewBatch",
    "DatasetError",
    "BadMagicError",
    "TruncatedFileError",
    "LabelRangeError",
    "generate_synthetic_clusters",
    "make_batch",
    "epoch_permutation",
    "iterate_batches",
    "train_test_split",
    "save_dataset",
    "load_dataset",
]

MAGIC = b"SCDS1"


class DatasetError(ValueError):
    pass


class BadMagicError(DatasetError):
    pass


class TruncatedFileError(DatasetError):
    pass


class LabelRangeError(DatasetError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    samples: np.ndarray          # (n, d) float64; images are flattened h*w*c
    labels: np.ndarray           # (n,) int64
    classes: int
    image_shape: tuple[int, int, int] | None = None

    def __post_init__(self):
        samples = np.ascontiguousarray(self.samples, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if samples.ndim != 2:
            raise DatasetError(f"samples must be (n, d), got {samples.shape}")
        if labels.shape != (samples.shape[0],):
            raise DatasetError("labels length must equal sample count")
        if self.classes < 1:
            raise DatasetError("classes must be positive")
        if labels.size and (labels.min() < 0 or labels.max() >= self.classes):
            raise LabelRangeError(f"labels must lie in [0, {self.classes})")
        if self.image_shape is not None and int(np.prod(self.image_shape)) != samples.shape[1]:
            raise DatasetError(f"image shape {self.image_shape} does not match dim {samples.shape[1]}")
        samples.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.intp)
        return Dataset(self.samples[idx], self.labels[idx], self.classes, self.image_shape)

    def with_labels(self, labels) -> "Dataset":
        return Dataset(self.samples, labels, self.classes, self.image_shape)


def generate_synthetic_clusters(classes: int, dim: int, per_class: int, separation: float,
                                noise_sigma: float, seed: int) -> Dataset:
    """Isotropic Gaussian clusters centred at ``separation * u_c``.

    The ``u_c`` are orthonormal (QR of a Gaussian matrix), so ``classes``
    may not exceed ``dim``. Samples are grouped by class.
    """
    if classes < 1 or dim < 1 or per_class < 1:
        raise DatasetError("classes, dim and per_class must be positive")
    if not separation > 0:
        raise DatasetError("separation must be positive")
    if noise_sigma < 0:
        raise DatasetError("noise_sigma must be non-negative")
    if classes > dim:
        raise DatasetError(f"cannot place {classes} orthonormal centres in {dim} dimensions")
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((dim, classes)))
    centers = separation * q.T
    labels = np.repeat(np.arange(classes), per_class)
    samples = centers[labels].copy()
    noise = rng.standard_normal(samples.shape)
    if noise_sigma > 0:
        samples += noise_sigma * noise
    return Dataset(samples, labels, classes)


@dataclass(frozen=True)
class AugmentationPolicy:
    """Label-preserving stochastic map.

    kind: ``identity``, ``gaussian-noise`` (adds N(0, sigma^2)), ``mask``
    (zeroes each coordinate with probability ``mask_fraction``) or
    ``flip-crop`` (image data only: horizontal flip with p=0.5, then a
    random crop of the zero-padded image back to its original size).
    """

    kind: str = "gaussian-noise"
    sigma: float = 0.5
    mask_fraction: float = 0.2
    pad: int = 2
    seed: int = 0

    KINDS = ("identity", "gaussian-noise", "mask", "flip-crop")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown augmentation kind {self.kind!r}")
        if self.sigma < 0 or not 0 <= self.mask_fraction <= 1 or self.pad < 0:
            raise ValueError("invalid augmentation parameters")

    def augment(self, x: np.ndarray, seed: int,
                image_shape: tuple[int, int, int] | None = None) -> np.ndarray:
        """Augment the rows of ``x``; deterministic in ``(x, self.seed, seed)``."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        rows = x[None, :] if single else x
        rng = np.random.default_rng([self.seed, seed])
        if self.kind == "identity":
            out = rows.copy()
        elif self.kind == "gaussian-noise":
            out = rows + self.sigma * rng.standard_normal(rows.shape)
        elif self.kind == "mask":
            out = np.where(rng.random(rows.shape) < self.mask_fraction, 0.0, rows)
        else:
            if image_shape is None:
                raise ValueError("flip-crop needs image-shaped data")
            out = _flip_crop(rows, image_shape, self.pad, rng)
        return out[0] if single else out


def _flip_crop(rows: np.ndarray, shape: tuple[int, int, int], pad: int,
               rng: np.random.Generator) -> np.ndarray:
    h, w, c = shape
    imgs = rows.reshape(-1, h, w, c)
    out = np.empty_like(imgs)
    for n, img in enumerate(imgs):
        if rng.random() < 0.5:
            img = img[:, ::-1, :]
        padded = np.pad(img, ((pad, pad), (pad, pad), (0, 0)))
        dy, dx = rng.integers(0, 2 * pad + 1, size=2)
        out[n] = padded[dy: dy + h, dx: dx + w, :]
    return out.reshape(rows.shape)


@dataclass(frozen=True, eq=False)
class ViewBatch:
    features: np.ndarray
    labels: np.ndarray
    multiview: bool
    B: int
    indices: np.ndarray


def make_batch(dataset: Dataset, indices, policy: AugmentationPolicy | None = None,
               multiview: bool = False, augment_single: bool = False,
               seed: int = 0) -> ViewBatch:
    """Assemble a single-view (B rows) or multi-view (2B rows) batch.

    ``augment_single`` augments the single-view rows in place of the raw
    ones (for single-view losses trained with augmentation).
    """
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1 or idx.size == 0:
        raise DatasetError("indices must be a non-empty 1-D sequence")
    if idx.min() < 0 or idx.max() >= len(dataset):
        raise DatasetError("batch index out of range")
    x = dataset.samples[idx]
    y = dataset.labels[idx]
    B = idx.size
    if multiview:
        if policy is None:
            raise DatasetError("multi-view batches need an augmentation policy")
        aug = policy.augment(x, seed, dataset.image_shape)
        return ViewBatch(np.concatenate([x, aug]), np.concatenate([y, y]), True, B, idx)
    if augment_single:
        if policy is None:
            raise DatasetError("augment_single needs an augmentation policy")
        x = policy.augment(x, seed, dataset.image_shape)
    return ViewBatch(x.copy(), y.copy(), False, B, idx)


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def iterate_batches(n: int, batch_size: int, seed: int, epoch: int,
                    drop_last: bool = True):
    perm = epoch_permutation(n, seed, epoch)
    stop = n - n % batch_size if drop_last and n >= batch_size else n
    for start in range(0, stop, batch_size):
        yield perm[start: start + batch_size]


def train_test_split(dataset: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    if not 0 < test_fraction < 1:
        raise DatasetError("test_fraction must be in (0, 1)")
    perm = np.random.default_rng([seed, 7919]).permutation(len(dataset))
    n_test = max(1, int(round(test_fraction * len(dataset))))
    return dataset.subset(np.sort(perm[n_test:])), dataset.subset(np.sort(perm[:n_test]))


# -- SCDS1 file format ---------------------------------------------------------
#   magic "SCDS1" | n | rank (1 or 3) | extents[rank] | classes | labels[n] (u32)
#   | features (f64, row-major); all integers u32 little-endian

def save_dataset(dataset: Dataset, path: str | os.PathLike) -> None:
    n = len(dataset)
    extents = dataset.image_shape if dataset.image_shape is not None else (dataset.dim,)
    head = struct.pack(f"<II{len(extents)}II", n, len(extents), *extents, dataset.classes)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(head)
        fh.write(dataset.labels.astype("<u4").tobytes())
        fh.write(dataset.samples.astype("<f8").tobytes())


def load_dataset(path: str | os.PathLike) -> Dataset:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"{path}: not an SCDS1 dataset")
    pos = len(MAGIC)

    def take(nbytes: int) -> bytes:
        nonlocal pos
        if pos + nbytes > len(buf):
            raise TruncatedFileError(f"{path}: truncated at byte {pos}")
        chunk = buf[pos: pos + nbytes]
        pos += nbytes
        return chunk

    n, rank = struct.unpack("<II", take(8))
    if rank not in (1, 3):
        raise DatasetError(f"{path}: unsupported rank marker {rank}")
    extents = struct.unpack(f"<{rank}I", take(4 * rank))
    (classes,) = struct.unpack("<I", take(4))
    labels = np.frombuffer(take(4 * n), dtype="<u4").astype(np.int64)
    d = int(np.prod(extents))
    samples = np.frombuffer(take(8 * n * d), dtype="<f8").reshape(n, d).astype(np.float64)
    if pos != len(buf):
        raise DatasetError(f"{path}: {len(buf) - pos} trailing bytes")
    if labels.size and labels.max() >= classes:
        raise LabelRangeError(f"{path}: label {labels.max()} out of range for {classes} classes")
    image_shape = tuple(extents) if rank == 3 else None
    return Dataset(samples, labels, classes, image_shape)
