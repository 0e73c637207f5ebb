"""Data ingestion and the one-sample online protocol.

IDX-format image/label parsing (the layout MNIST ships in), per-epoch seeded
shuffling with a strictly increasing global step index, and synthetic
regression/classification streams used as oracle fixtures. Batch size is
always one: the whole point of the stream is that samples arrive singly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterator

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class BadMagic(ValueError):
    pass


class CountMismatch(ValueError):
    pass


class TruncatedFile(ValueError):
    pass


@dataclass(frozen=True)
class StreamSample:
    x: np.ndarray        # flat feature vector
    y: np.ndarray        # one-hot target (classification) or real vector
    k: int               # global step index
    label: int | None = None


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray        # (N, D) float64
    labels: np.ndarray   # (N,) int64
    n_classes: int
    rows: int = 0
    cols: int = 0

    def __len__(self) -> int:
        return self.x.shape[0]


def _read_exact(fh, count, path):
    buf = fh.read(count)
    if len(buf) != count:
        raise TruncatedFile(f"{path}: expected {count} more bytes, got {len(buf)}")
    return buf


def load_mnist_idx(images_path, labels_path) -> Dataset:
    """Parse an IDX image/label file pair into a dataset.

    Headers are big-endian (magic 0x803 for images, 0x801 for labels);
    pixels are scaled to [0,1] by /255. Image and label counts must match.
    """
    with open(images_path, "rb") as fh:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(fh, 16, images_path))
        if magic != IMAGE_MAGIC:
            raise BadMagic(f"{images_path}: magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}")
        raw = _read_exact(fh, count * rows * cols, images_path)
    images = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows * cols)
    with open(labels_path, "rb") as fh:
        magic, label_count = struct.unpack(">II", _read_exact(fh, 8, labels_path))
        if magic != LABEL_MAGIC:
            raise BadMagic(f"{labels_path}: magic {magic:#010x}, expected {LABEL_MAGIC:#010x}")
        labels = np.frombuffer(_read_exact(fh, label_count, labels_path), dtype=np.uint8)
    if count != label_count:
        raise CountMismatch(f"{count} images vs {label_count} labels")
    return Dataset(x=images.astype(np.float64) / 255.0,
                   labels=labels.astype(np.int64), n_classes=10, rows=rows, cols=cols)


def write_idx_images(path, images: np.ndarray) -> None:
    """Write a (N, rows, cols) uint8 array in IDX image layout."""
    images = np.ascontiguousarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols))
        fh.write(images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", LABEL_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


def subset(dataset: Dataset, class_filter=None, max_samples=None) -> Dataset:
    """Restrict to the given labels and/or the first max_samples entries."""
    x, labels = dataset.x, dataset.labels
    if class_filter is not None:
        keep = np.isin(labels, np.asarray(list(class_filter)))
        x, labels = x[keep], labels[keep]
    if max_samples is not None and len(labels) > max_samples:
        x, labels = x[:max_samples], labels[:max_samples]
    return Dataset(x=x, labels=labels, n_classes=dataset.n_classes,
                   rows=dataset.rows, cols=dataset.cols)


def one_hot(label: int, n_classes: int) -> np.ndarray:
    y = np.zeros(n_classes)
    y[label] = 1.0
    return y


def stream(dataset: Dataset, seed: int, epochs: int = 1) -> Iterator[StreamSample]:
    """Yield one sample per step, reshuffled every epoch.

    The permutation for epoch e is seeded from (seed, e), so the order is
    reproducible and the global step index k increases strictly across
    epochs. Within an epoch every sample appears exactly once.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    k = 0
    for epoch in range(epochs):
        perm = np.random.default_rng([seed, epoch]).permutation(len(dataset))
        for i in perm:
            label = int(dataset.labels[i])
            yield StreamSample(x=dataset.x[i], y=one_hot(label, dataset.n_classes),
                               k=k, label=label)
            k += 1


def synthetic_linear(n_features: int, n_outputs: int, noise_std: float,
                     seed: int, count: int | None = None) -> Iterator[StreamSample]:
    """Regression stream y = W* x + N(0, noise_std^2 I), x ~ U(-1,1)^n.

    W* is fixed per seed; used as the recursive-least-squares fixture.
    """
    if n_features < 1 or n_outputs < 1:
        raise ValueError("dims must be >= 1")
    rng = np.random.default_rng(seed)
    w_star = rng.normal(size=(n_outputs, n_features))
    k = 0
    while count is None or k < count:
        x = rng.uniform(-1.0, 1.0, size=n_features)
        y = w_star @ x
        if noise_std > 0.0:
            y = y + rng.normal(0.0, noise_std, size=n_outputs)
        yield StreamSample(x=x, y=y, k=k)
        k += 1


def synthetic_logistic(n_features: int, n_classes: int, noise_std: float,
                       seed: int, count: int | None = None) -> Iterator[StreamSample]:
    """Classification stream: label = argmax(W* x + noise), one-hot target."""
    if n_features < 1 or n_classes < 2:
        raise ValueError("need >= 1 feature and >= 2 classes")
    rng = np.random.default_rng(seed)
    w_star = rng.normal(size=(n_classes, n_features))
    k = 0
    while count is None or k < count:
        x = rng.uniform(-1.0, 1.0, size=n_features)
        logits = w_star @ x
        if noise_std > 0.0:
            logits = logits + rng.normal(0.0, noise_std, size=n_classes)
        label = int(np.argmax(logits))
        yield StreamSample(x=x, y=one_hot(label, n_classes), k=k, label=label)
        k += 1
