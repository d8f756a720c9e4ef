"""Datasets: the CIFAR-10 binary format and a synthetic desk-scale set."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CIFAR_RECORD = 3073
CIFAR_CLASSES = ("airplane", "automobile", "bird", "cat", "deer",
                 "dog", "frog", "horse", "ship", "truck")
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILES = ("test_batch.bin",)


class DatasetError(ValueError):
    pass


@dataclass
class DatasetHandle:
    name: str
    split: str
    images: np.ndarray  # N x C x H x W, float64 in [0, 1]
    labels: np.ndarray
    class_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise DatasetError(f"{self.name}: images {self.images.shape} vs labels {self.labels.shape}")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise DatasetError(f"{self.name}: pixel values outside [0, 1]")
        if len(self.labels) and self.labels.max() >= self.num_classes:
            raise DatasetError(f"{self.name}: label {self.labels.max()} >= {self.num_classes} classes")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx, split: str | None = None) -> "DatasetHandle":
        return DatasetHandle(self.name, split or self.split, self.images[idx], self.labels[idx],
                             self.class_names)

    def batches(self, batch_size: int):
        for i in range(0, len(self), batch_size):
            yield self.images[i:i + batch_size], self.labels[i:i + batch_size]


def require_nonempty(ds: DatasetHandle) -> DatasetHandle:
    if len(ds) == 0:
        raise DatasetError(f"dataset {ds.name}/{ds.split} is empty")
    return ds


def split_validation(ds: DatasetHandle, fraction: float, seed: int) -> tuple[DatasetHandle, DatasetHandle]:
    """Seeded held-out split; returns (train, validation)."""
    perm = np.random.default_rng(seed).permutation(len(ds))
    n_val = int(round(fraction * len(ds)))
    val, train = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    return ds.subset(train, "train"), ds.subset(val, "validation")


# ---------------------------------------------------------------- CIFAR-10


def parse_cifar10_bytes(raw: bytes, source: str = "<bytes>") -> tuple[np.ndarray, np.ndarray]:
    """Decode 3073-byte records: label byte, then R, G, B 32x32 planes."""
    if len(raw) % CIFAR_RECORD:
        whole = len(raw) // CIFAR_RECORD
        raise DatasetError(f"{source}: length {len(raw)} is not a multiple of {CIFAR_RECORD}; "
                           f"partial record starts at byte offset {whole * CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        i = int(bad[0])
        raise DatasetError(f"{source}: label byte {labels[i]} > 9 at byte offset {i * CIFAR_RECORD}")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return images, labels


def encode_cifar10(images: np.ndarray, labels) -> bytes:
    """Inverse of ``parse_cifar10_bytes`` for images on the k/255 grid."""
    pix = np.rint(np.asarray(images) * 255.0)
    if pix.min(initial=0) < 0 or pix.max(initial=0) > 255:
        raise DatasetError("pixel values outside [0, 1]")
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    body = pix.astype(np.uint8).reshape(len(labels), 3072)
    return np.concatenate([labels, body], axis=1).tobytes()


def load_cifar10(directory: str | Path, split: str = "train") -> DatasetHandle:
    directory = Path(directory)
    files = TRAIN_FILES if split == "train" else TEST_FILES
    found = [directory / f for f in files if (directory / f).exists()]
    if not found:
        raise DatasetError(f"{directory}: none of {list(files)} present")
    parts = [parse_cifar10_bytes(p.read_bytes(), str(p)) for p in found]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    return DatasetHandle("cifar10", split, images, labels, CIFAR_CLASSES)


# ---------------------------------------------------------------- synthetic


def class_templates(num_classes: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-class (precise, robust) colour directions, unit vectors over RGB.

    With two classes the precise direction is +-green and the robust one
    +-(red - blue); otherwise both are seeded random unit vectors.
    """
    if num_classes == 2:
        precise = np.array([[0.0, 1.0, 0.0], [0.0, -1.0, 0.0]])
        base = np.array([1.0, 0.0, -1.0]) / np.sqrt(2.0)
        robust = np.stack([base, -base])
    else:
        v = np.random.default_rng([seed, 0x7147]).standard_normal((2, num_classes, 3))
        v /= np.linalg.norm(v, axis=2, keepdims=True)
        precise, robust = v
    return precise, robust


def make_synthetic(num_classes: int = 2, samples_per_class: int = 400, resolution: int = 8,
                   seed: int = 0, precise_amplitude: float = 0.01, robust_amplitude: float = 0.08,
                   robust_spread: float = 1.0, noise: float = 0.02,
                   split: str = "train") -> DatasetHandle:
    """Class colour templates plus seeded pixel noise.

    For an example of class k::

        image = 0.5 + precise_amplitude * precise[k]
                    + robust_amplitude * s * robust[k]
                    + noise * N(0, 1)        (per pixel)

    clipped to [0, 1], with s ~ N(1, robust_spread) drawn per example.
    Averaged over the image, the precise template separates the classes
    almost perfectly, but it sits only 2.55/255 from the image mean, so an
    L-inf perturbation of 3/255 or more flips it.  The robust template is several
    times larger but its strength varies and occasionally flips sign.
    """
    if resolution < 4:
        raise DatasetError(f"resolution must be >= 4, got {resolution}")
    precise, robust = class_templates(num_classes, seed)
    split_id = {"train": 0, "test": 1, "validation": 2}.get(split, 3)
    rng = np.random.default_rng([seed, 0xDA7A, split_id])
    n = num_classes * samples_per_class
    labels = rng.permutation(np.repeat(np.arange(num_classes), samples_per_class))
    s = 1.0 + robust_spread * rng.standard_normal((n, 1))
    colour = precise_amplitude * precise[labels] + robust_amplitude * s * robust[labels]
    images = (0.5 + colour[:, :, None, None]
              + noise * rng.standard_normal((n, 3, resolution, resolution)))
    images = np.clip(images, 0.0, 1.0)
    names = tuple(f"pattern{k}" for k in range(num_classes))
    return DatasetHandle("synthetic", split, images, labels, names)
