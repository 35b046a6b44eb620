"""Datasets: CIFAR-10 binary files, a synthetic shapes set, raw import.

The CIFAR-10 binary layout is one 3073-byte record per image: a label
byte (0-9) then 3072 pixel bytes, the red plane row-major, then green,
then blue.  Each of the six files holds exactly 10,000 records, hence
exactly 30,730,000 bytes; anything else is rejected up front.

The synthetic set renders filled squares, circles, and crosses at random
positions and scales over a noisy background.  It is deterministic given
its seed and balanced to within one image per class; a nearest-centroid
classifier already clears 60% on it, so a small network can be expected
to learn it quickly.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] float32 in [0, 1]
    labels: np.ndarray  # [N] int64
    num_classes: int

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.labels) != len(self.images):
            raise DataError(
                f"images {self.images.shape} and labels {self.labels.shape} do not pair up"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(self.images[index], self.labels[index], self.num_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass
class LabeledImage:
    pixels: np.ndarray  # [1, C, H, W] float32 in [0, 1]
    label: int


# ---------------------------------------------------------------------------
# CIFAR-10 binary

CIFAR_SIDE = 32
CIFAR_RECORD_BYTES = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE  # 3073
CIFAR_RECORDS_PER_FILE = 10_000
CIFAR_FILE_BYTES = CIFAR_RECORD_BYTES * CIFAR_RECORDS_PER_FILE  # 30,730,000
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"


def decode_cifar_record(buf: bytes) -> LabeledImage:
    if len(buf) != CIFAR_RECORD_BYTES:
        raise DataError(f"record must be {CIFAR_RECORD_BYTES} bytes, got {len(buf)}")
    label = buf[0]
    if label > 9:
        raise DataError(f"label byte {label} > 9")
    planes = np.frombuffer(buf, dtype=np.uint8, offset=1).reshape(3, CIFAR_SIDE, CIFAR_SIDE)
    return LabeledImage(planes[None].astype(np.float32) / 255.0, int(label))


def encode_cifar_record(image: LabeledImage) -> bytes:
    pixels = np.rint(np.asarray(image.pixels).reshape(3, CIFAR_SIDE, CIFAR_SIDE) * 255.0)
    return bytes([image.label]) + pixels.astype(np.uint8).tobytes()


def _load_cifar_file(path: Path) -> tuple[np.ndarray, np.ndarray]:
    data = path.read_bytes()
    if len(data) != CIFAR_FILE_BYTES:
        raise DataError(f"{path}: expected {CIFAR_FILE_BYTES} bytes, got {len(data)}")
    records = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0]
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        i = int(bad[0])
        raise DataError(
            f"{path}: label byte {labels[i]} > 9 in record {i}"
            f" (byte offset {i * CIFAR_RECORD_BYTES})"
        )
    images = records[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE).astype(np.float32) / 255.0
    return images, labels.astype(np.int64)


def load_cifar10(directory) -> tuple[Dataset, Dataset]:
    """Returns (train 50,000, test 10,000) from the standard six files."""
    directory = Path(directory)
    parts = [_load_cifar_file(directory / name) for name in CIFAR_TRAIN_FILES]
    train = Dataset(np.concatenate([p[0] for p in parts]),
                    np.concatenate([p[1] for p in parts]), 10)
    test = Dataset(*_load_cifar_file(directory / CIFAR_TEST_FILE), 10)
    return train, test


# ---------------------------------------------------------------------------
# Synthetic shapes

SHAPE_CLASSES = ("square", "circle", "cross")


def synth_shapes(num: int, image_size: int = 32, seed: int = 0,
                 noise: float = 0.08) -> Dataset:
    """Filled squares, circles, and crosses; labels cycle 0,1,2,0,1,..."""
    rng = np.random.default_rng(seed)
    side = image_size
    yy, xx = np.mgrid[0:side, 0:side]
    images = np.empty((num, 3, side, side), dtype=np.float32)
    labels = np.arange(num, dtype=np.int64) % len(SHAPE_CLASSES)
    for i in range(num):
        img = rng.uniform(0.0, noise, size=(3, side, side))
        mid, jitter = side // 2, max(1, side // 16)
        cy, cx = rng.integers(mid - jitter, mid + jitter + 1, size=2)
        hmin = max(1, 6 * side // 32)
        half = int(rng.integers(hmin, max(hmin + 1, 9 * side // 32 + 1)))
        color = rng.uniform(0.55, 1.0, size=3)
        dy, dx = np.abs(yy - cy), np.abs(xx - cx)
        shape = SHAPE_CLASSES[labels[i]]
        if shape == "square":
            mask = (dy <= half) & (dx <= half)
        elif shape == "circle":
            mask = dy * dy + dx * dx <= half * half
        else:
            bar = max(1, half // 3)
            mask = ((dy <= bar) & (dx <= half)) | ((dx <= bar) & (dy <= half))
        count = int(mask.sum())
        for c in range(3):
            img[c][mask] = color[c] + rng.normal(0.0, noise, size=count)
        images[i] = np.clip(img, 0.0, 1.0)
    return Dataset(images, labels, len(SHAPE_CLASSES))


# ---------------------------------------------------------------------------
# Augmentation

@dataclass(frozen=True)
class AugmentPolicy:
    horizontal_flip: float = 0.0
    vertical_flip: float = 0.0
    rotation_deg: float = 0.0
    pad_crop: int = 0

    def __post_init__(self):
        for p in (self.horizontal_flip, self.vertical_flip):
            if not (0.0 <= p <= 1.0):
                raise ValueError(f"flip probabilities must be in [0, 1], got {p}")


def rotate(image: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate [C, H, W] about the center, bilinear resampling, zero fill."""
    c, h, w = image.shape
    theta = math.radians(degrees)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy - cy, xx - cx
    sy = math.cos(theta) * dy + math.sin(theta) * dx + cy
    sx = -math.sin(theta) * dy + math.cos(theta) * dx + cx
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    fy, fx = sy - y0, sx - x0
    out = np.zeros_like(image)
    for oy, ox, wgt in (
        (0, 0, (1 - fy) * (1 - fx)),
        (0, 1, (1 - fy) * fx),
        (1, 0, fy * (1 - fx)),
        (1, 1, fy * fx),
    ):
        ys, xs = y0 + oy, x0 + ox
        valid = (ys >= 0) & (ys < h) & (xs >= 0) & (xs < w)
        ysc, xsc = np.clip(ys, 0, h - 1), np.clip(xs, 0, w - 1)
        out += image[:, ysc, xsc] * (wgt * valid)
    return out.astype(image.dtype, copy=False)


def augment(image: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    x = image
    if policy.horizontal_flip > 0.0 and rng.random() < policy.horizontal_flip:
        x = x[:, :, ::-1]
    if policy.vertical_flip > 0.0 and rng.random() < policy.vertical_flip:
        x = x[:, ::-1, :]
    if policy.rotation_deg > 0.0:
        x = rotate(np.ascontiguousarray(x), rng.uniform(-policy.rotation_deg,
                                                        policy.rotation_deg))
    if policy.pad_crop > 0:
        p = policy.pad_crop
        padded = np.pad(x, ((0, 0), (p, p), (p, p)), mode="reflect")
        oy, ox = rng.integers(0, 2 * p + 1, size=2)
        x = padded[:, oy:oy + image.shape[1], ox:ox + image.shape[2]]
    return np.ascontiguousarray(x)


# ---------------------------------------------------------------------------
# Normalization and batching

@dataclass
class Normalizer:
    mean: np.ndarray  # [C]
    std: np.ndarray   # [C]

    @classmethod
    def fit(cls, train_set: Dataset) -> "Normalizer":
        """Per-channel statistics from the training split only."""
        pixels = train_set.images.astype(np.float64)
        mean = pixels.mean(axis=(0, 2, 3))
        std = np.maximum(pixels.std(axis=(0, 2, 3)), 1e-6)
        return cls(mean.astype(np.float32), std.astype(np.float32))

    def apply(self, x: np.ndarray) -> np.ndarray:
        shape = (1,) * (x.ndim - 3) + (-1, 1, 1)
        return (x - self.mean.reshape(shape)) / self.std.reshape(shape)


_augment_image = augment


def batches(
    dataset: Dataset,
    batch_size: int,
    rng: np.random.Generator | None = None,
    shuffle: bool = False,
    normalizer: Normalizer | None = None,
    augment: AugmentPolicy | None = None,
    augment_rng: np.random.Generator | None = None,
):
    """Yields ([B, C, H, W] float32, [B] int64); the last batch may be short."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if shuffle:
        if rng is None:
            raise ValueError("shuffle needs an rng")
        order = rng.permutation(len(dataset))
    else:
        order = np.arange(len(dataset))
    for lo in range(0, len(dataset), batch_size):
        idx = order[lo:lo + batch_size]
        x = dataset.images[idx]
        if augment is not None:
            if augment_rng is None:
                raise ValueError("augmentation needs an rng")
            x = np.stack([_augment_image(im, augment, augment_rng) for im in x])
        if normalizer is not None:
            x = normalizer.apply(x)
        yield np.ascontiguousarray(x, dtype=np.float32), dataset.labels[idx]


# ---------------------------------------------------------------------------
# Raw tensor import/export

RAW_MAGIC = b"CFRT"
RAW_VERSION = 1
_RAW_DTYPES = {1: "uint8", 2: "float32"}


def save_raw(path, dataset: Dataset, as_uint8: bool = True) -> None:
    """Single-file container: header, pixel block, u16 label block."""
    tag = 1 if as_uint8 else 2
    n, c, h, w = dataset.images.shape
    with open(path, "wb") as f:
        f.write(RAW_MAGIC)
        f.write(struct.pack("<IIIIIIB", RAW_VERSION, n, c, h, w, dataset.num_classes, tag))
        if as_uint8:
            f.write(np.rint(dataset.images * 255.0).astype(np.uint8).tobytes())
        else:
            f.write(dataset.images.astype("<f4").tobytes())
        f.write(dataset.labels.astype("<u2").tobytes())


def load_raw(path) -> Dataset:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != RAW_MAGIC:
        raise DataError(f"{path}: bad magic {data[:4]!r}, expected {RAW_MAGIC!r}")
    header = struct.calcsize("<IIIIIIB")
    if len(data) < 4 + header:
        raise DataError(f"{path}: truncated header ({len(data)} bytes)")
    version, n, c, h, w, num_classes, tag = struct.unpack_from("<IIIIIIB", data, 4)
    if version != RAW_VERSION:
        raise DataError(f"{path}: unsupported version {version}, expected {RAW_VERSION}")
    if tag not in _RAW_DTYPES:
        raise DataError(f"{path}: unknown dtype tag {tag}")
    item = 1 if tag == 1 else 4
    pixel_bytes = n * c * h * w * item
    expected = 4 + header + pixel_bytes + n * 2
    if len(data) != expected:
        raise DataError(f"{path}: expected {expected} bytes, got {len(data)}")
    off = 4 + header
    if tag == 1:
        images = np.frombuffer(data, np.uint8, pixel_bytes, off).reshape(n, c, h, w)
        images = images.astype(np.float32) / 255.0
    else:
        images = np.frombuffer(data, "<f4", n * c * h * w, off).reshape(n, c, h, w)
    labels = np.frombuffer(data, "<u2", n, off + pixel_bytes).astype(np.int64)
    return Dataset(images, labels, num_classes)
