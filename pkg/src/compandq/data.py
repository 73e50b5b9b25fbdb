"""Dataset ingestion and augmentation for desk-scale experiments.

Loaders are pure given (path, seed): byte-identical inputs yield identical
tensors.  MNIST ships as the standard IDX files (gzipped), CIFAR-10 as the
3073-byte binary records; both parsers validate magic numbers and sizes and
refuse truncated files.
"""

from __future__ import annotations

import gzip
import os
from dataclasses import dataclass

import numpy as np

from .quantizer import ContractViolation

__all__ = [
    "Dataset",
    "load_idx",
    "load_mnist_idx",
    "load_mnist",
    "load_cifar10_bin",
    "load_cifar10",
    "augment",
    "synth_classification",
    "batches",
    "default_data_root",
]

# documented default normalization; override through the training config
MNIST_MEAN = 0.1307
MNIST_STD = 0.3081

_IDX_DTYPES = {
    0x08: np.uint8,
    0x09: np.int8,
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32
    labels: np.ndarray  # (N,) int64
    split: str
    classes: int

    def __len__(self):
        return self.images.shape[0]


def default_data_root() -> str:
    """Data directory: $COMPANDQ_DATA_ROOT, else ./data."""
    return os.environ.get("COMPANDQ_DATA_ROOT", "data")


def load_idx(path) -> np.ndarray:
    """Parse one IDX file (big-endian magic and dims); .gz handled
    transparently."""
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 or blob[0] != 0 or blob[1] != 0:
        raise ContractViolation(f"{path}: bad IDX magic")
    code, ndim = blob[2], blob[3]
    if code not in _IDX_DTYPES:
        raise ContractViolation(f"{path}: unknown IDX element code {code:#x}")
    if len(blob) < 4 + 4 * ndim:
        raise ContractViolation(f"{path}: truncated IDX header")
    dims = [
        int.from_bytes(blob[4 + 4 * i : 8 + 4 * i], "big") for i in range(ndim)
    ]
    dtype = np.dtype(_IDX_DTYPES[code])
    count = int(np.prod(dims)) if dims else 0
    payload = blob[4 + 4 * ndim :]
    if len(payload) != count * dtype.itemsize:
        raise ContractViolation(
            f"{path}: payload is {len(payload)} bytes, expected "
            f"{count * dtype.itemsize}"
        )
    return np.frombuffer(payload, dtype=dtype).reshape(dims)


# spec'd operation name
load_mnist_idx = load_idx


def _find_idx(root, stem):
    for name in (stem, stem + ".gz"):
        path = os.path.join(root, name)
        if os.path.exists(path):
            return path
    raise ContractViolation(f"MNIST file {stem}[.gz] not found under {root}")


def load_mnist(root=None, split="train", mean=MNIST_MEAN, std=MNIST_STD) -> Dataset:
    root = os.path.join(root or default_data_root(), "mnist")
    stem = "train" if split == "train" else "t10k"
    images = load_idx(_find_idx(root, f"{stem}-images-idx3-ubyte"))
    labels = load_idx(_find_idx(root, f"{stem}-labels-idx1-ubyte"))
    if images.ndim != 3 or images.shape[0] != labels.shape[0]:
        raise ContractViolation("MNIST image/label files do not match")
    x = (images.astype(np.float32) / 255.0 - mean) / std
    return Dataset(
        images=x[:, None, :, :],
        labels=labels.astype(np.int64),
        split=split,
        classes=10,
    )


def load_cifar10_bin(path) -> tuple[np.ndarray, np.ndarray]:
    """One CIFAR-10 binary batch: 3073-byte records of label + 3072 pixels.

    Returns (images uint8 (N, 3, 32, 32), labels int64).
    """
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as fh:
        blob = fh.read()
    if len(blob) == 0 or len(blob) % 3073 != 0:
        raise ContractViolation(
            f"{path}: size {len(blob)} is not a multiple of 3073"
        )
    raw = np.frombuffer(blob, dtype=np.uint8).reshape(-1, 3073)
    labels = raw[:, 0].astype(np.int64)
    if labels.max(initial=0) > 9:
        raise ContractViolation(f"{path}: label out of range")
    images = raw[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels


CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)


def load_cifar10(root=None, split="train", mean=CIFAR10_MEAN,
                 std=CIFAR10_STD) -> Dataset:
    """CIFAR-10 from the binary batches under <root>/cifar-10-batches-bin."""
    root = os.path.join(root or default_data_root(), "cifar-10-batches-bin")
    names = ([f"data_batch_{i}.bin" for i in range(1, 6)]
             if split == "train" else ["test_batch.bin"])
    parts = []
    for name in names:
        path = os.path.join(root, name)
        if not os.path.exists(path) and os.path.exists(path + ".gz"):
            path += ".gz"
        if not os.path.exists(path):
            raise ContractViolation(f"CIFAR-10 batch {name} not found in {root}")
        parts.append(load_cifar10_bin(path))
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    x = images.astype(np.float32) / 255.0
    x = (x - np.asarray(mean, np.float32)[:, None, None]) \
        / np.asarray(std, np.float32)[:, None, None]
    return Dataset(images=x, labels=labels, split=split, classes=10)


def augment(images, rng, pad=4, flip=True, enabled=True) -> np.ndarray:
    """Random crop (after zero padding) and horizontal flip, per image.

    Deterministic under the generator's state; identity when disabled.
    """
    if not enabled:
        return images
    n, c, h, w = images.shape
    padded = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=images.dtype)
    padded[:, :, pad : pad + h, pad : pad + w] = images
    dy = rng.integers(0, 2 * pad + 1, size=n)
    dx = rng.integers(0, 2 * pad + 1, size=n)
    do_flip = rng.integers(0, 2, size=n).astype(bool) if flip else np.zeros(n, bool)
    out = np.empty_like(images)
    for i in range(n):
        crop = padded[i, :, dy[i] : dy[i] + h, dx[i] : dx[i] + w]
        out[i] = crop[:, :, ::-1] if do_flip[i] else crop
    return out


def synth_classification(n, d, classes, seed) -> Dataset:
    """Gaussian blobs around well-separated class centers; d must be a
    square so samples can be shaped as 1-channel images for the conv nets."""
    side = int(np.sqrt(d))
    if side * side != d:
        raise ContractViolation(f"d must be a perfect square, got {d}")
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, 1.0, size=(classes, d))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    centers *= 3.0
    labels = np.arange(n) % classes  # exact class balance
    x = centers[labels] + rng.normal(0.0, 0.3, size=(n, d))
    order = rng.permutation(n)
    x, labels = x[order], labels[order]
    return Dataset(
        images=x.reshape(n, 1, side, side).astype(np.float32),
        labels=labels.astype(np.int64),
        split="train",
        classes=classes,
    )


def batches(ds: Dataset, batch_size, rng=None, shuffle=True):
    n = len(ds)
    idx = np.arange(n)
    if shuffle:
        if rng is None:
            raise ContractViolation("shuffling requires a generator")
        idx = rng.permutation(n)
    for start in range(0, n, batch_size):
        sel = idx[start : start + batch_size]
        yield ds.images[sel], ds.labels[sel]
