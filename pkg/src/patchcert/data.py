"""Dataset ingestion: IDX files, CIFAR-10 binary batches and a synthetic generator.

Images are returned as float32 arrays (N, C, H, W) scaled to [0, 1].
"""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32


@dataclass
class Dataset:
    images: np.ndarray  # float32 (N, C, H, W) in [0, 1]
    labels: np.ndarray  # int64 (N,)
    num_classes: int
    source: str = ""

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.images) and (self.images.min() < 0 or self.images.max() > 1):
            raise DataError("pixel values outside [0, 1]")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.source)

    def split(self, n_first: int):
        return self.subset(np.arange(n_first)), self.subset(np.arange(n_first, len(self)))


def _read(path) -> bytes:
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    raw = path.read_bytes()
    return gzip.decompress(raw) if path.suffix == ".gz" else raw


def read_idx(path) -> np.ndarray:
    """Decode an IDX file (ubyte payload) into an integer array."""
    raw = _read(path)
    if len(raw) < 4:
        raise DataError(f"{path}: too short for an IDX header")
    zero, dtype, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype != 0x08:
        raise DataError(f"{path}: unsupported IDX magic {raw[:4].hex()}")
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise DataError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    count = int(np.prod(dims))
    if len(raw) - head != count:
        raise DataError(f"{path}: expected {count} payload bytes, found {len(raw) - head}")
    return np.frombuffer(raw, dtype=np.uint8, offset=head).reshape(dims)


def load_idx(image_path, label_path, num_classes=10) -> Dataset:
    magic = struct.unpack(">I", _read(image_path)[:4])[0]
    if magic != IDX_IMAGES:
        raise DataError(f"{image_path}: magic {magic:#010x}, expected {IDX_IMAGES:#010x}")
    magic = struct.unpack(">I", _read(label_path)[:4])[0]
    if magic != IDX_LABELS:
        raise DataError(f"{label_path}: magic {magic:#010x}, expected {IDX_LABELS:#010x}")
    images = read_idx(image_path).astype(np.float32) / 255.0
    labels = read_idx(label_path).astype(np.int64)
    return Dataset(images[:, None], labels, num_classes, f"idx:{image_path}")


def load_cifar(paths, num_classes=10) -> Dataset:
    """Concatenate CIFAR-10 binary batches (label byte + 3072 channel-major pixel bytes)."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    images, labels = [], []
    for path in paths:
        raw = _read(path)
        if len(raw) % CIFAR_RECORD:
            raise DataError(f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels.append(rec[:, 0].astype(np.int64))
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0)
    return Dataset(np.concatenate(images), np.concatenate(labels), num_classes,
                   "cifar:" + ",".join(str(p) for p in paths))


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def _texture(kind: int, h: int, w: int, phase: int, period: int) -> np.ndarray:
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    if kind == 0:
        t = (rr // period) + ((cc + phase) // period)
    elif kind == 1:
        t = (rr + phase) // period
    elif kind == 2:
        t = (cc + phase) // period
    else:
        t = (rr + cc + phase) // period
    return (t % 2).astype(np.float32)


def synthetic(n: int, seed: int = 0, classes: int = 4, size: int = 16, channels: int = 3,
              kind: str = "stripes", contrast: float = 0.3) -> Dataset:
    """Deterministic toy images.

    ``stripes``: a textured rectangle on a dark noisy background, the texture
    (checker, horizontal, vertical, diagonal) names the class and
    ``contrast`` sets its amplitude.  ``blobs``: a
    bright square whose colour channel names the class.
    """
    if kind == "stripes" and not 2 <= classes <= 4:
        raise ConfigError("stripes supports 2..4 classes")
    if kind == "blobs" and not 2 <= classes <= channels:
        raise ConfigError("blobs needs 2 <= classes <= channels")
    if kind not in ("stripes", "blobs"):
        raise ConfigError(f"unknown synthetic kind {kind!r}")
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, classes, size=n).astype(np.int64)
    images = np.empty((n, channels, size, size), dtype=np.float32)
    for i, y in enumerate(labels):
        img = rng.uniform(0.0, 0.15, size=(channels, size, size)).astype(np.float32)
        if kind == "stripes":
            oh, ow = rng.integers(int(0.75 * size), size + 1, size=2)
            top, left = rng.integers(0, size - oh + 1), rng.integers(0, size - ow + 1)
            tex = _texture(int(y), oh, ow, int(rng.integers(0, 4)), 2)
            colour = rng.uniform(0.5, 1.0, size=channels).astype(np.float32)
            base = rng.uniform(0.2, 0.6)
            img[:, top:top + oh, left:left + ow] += base + contrast * tex[None] * colour[:, None, None]
        else:
            s = int(rng.integers(size // 3, size // 2 + 1))
            top, left = rng.integers(0, size - s + 1, size=2)
            img[y, top:top + s, left:left + s] = rng.uniform(0.7, 1.0)
        images[i] = np.clip(img, 0.0, 1.0)
    return Dataset(images, labels, classes, f"synthetic:{kind}:{seed}")
