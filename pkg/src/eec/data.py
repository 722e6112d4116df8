"""Dataset ingestion and task scheduling.

Handles MNIST IDX files bit-exactly, generates a deterministic synthetic
glyph dataset for fast benchmarks, and splits labeled datasets into
class-incremental task schedules.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class LabeledDataset:
    """Images in [0,1] as (n, 1, h, w) float32 plus integer labels."""

    images: np.ndarray
    labels: np.ndarray
    split: str = "train"

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise FormatError(
                f"image count {self.images.shape[0]} != "
                f"label count {self.labels.shape[0]}")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0

    def subset(self, mask: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(self.images[mask], self.labels[mask], self.split)


@dataclass
class TaskSchedule:
    """Ordered class groups, one per increment."""

    groups: list[list[int]]
    order_seed: int | None = None

    @property
    def num_tasks(self) -> int:
        return len(self.groups)

    def classes_through(self, task: int) -> list[int]:
        """All class ids presented in increments 0..task (inclusive)."""
        out: list[int] = []
        for g in self.groups[: task + 1]:
            out.extend(g)
        return out


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"truncated IDX file: wanted {n} bytes, got {len(data)}")
    return data


def load_mnist_idx(images_path: str, labels_path: str,
                   split: str = "train") -> LabeledDataset:
    """Load an IDX image/label file pair; pixels scaled to [0,1] by /255."""
    with open(images_path, "rb") as fh:
        magic, count, rows, cols = struct.unpack(">4i", _read_exact(fh, 16))
        if magic != IDX_IMAGES_MAGIC:
            raise FormatError(f"bad image magic 0x{magic:08x} in {images_path}")
        raw = _read_exact(fh, count * rows * cols)
    images = np.frombuffer(raw, dtype=np.uint8).reshape(count, 1, rows, cols)
    images = images.astype(np.float32) / 255.0

    with open(labels_path, "rb") as fh:
        magic, lcount = struct.unpack(">2i", _read_exact(fh, 8))
        if magic != IDX_LABELS_MAGIC:
            raise FormatError(f"bad label magic 0x{magic:08x} in {labels_path}")
        labels = np.frombuffer(_read_exact(fh, lcount), dtype=np.uint8)
    if lcount != count:
        raise FormatError(f"image count {count} != label count {lcount}")
    return LabeledDataset(images, labels.astype(np.int64), split)


def save_idx(dataset: LabeledDataset, images_path: str, labels_path: str) -> None:
    """Write a dataset back to the IDX pair format (pixels re-quantized x255)."""
    n, _, h, w = dataset.images.shape
    pixels = np.rint(dataset.images * 255.0).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">4i", IDX_IMAGES_MAGIC, n, h, w))
        fh.write(pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">2i", IDX_LABELS_MAGIC, n))
        fh.write(dataset.labels.astype(np.uint8).tobytes())


def pad_to_32(images: np.ndarray) -> np.ndarray:
    """Zero-pad 28x28 images to 32x32 (2 pixels on each side)."""
    if images.ndim != 4 or images.shape[2:] != (28, 28):
        raise FormatError(f"expected (n, c, 28, 28) batch, got {images.shape}")
    return np.pad(images, ((0, 0), (0, 0), (2, 2), (2, 2)))


def _glyph(class_id: int, size: int) -> np.ndarray:
    """Deterministic prototype image for one synthetic class."""
    img = np.zeros((size, size), dtype=np.float32)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    c = (size - 1) / 2.0
    q = size // 4
    k = class_id % 10
    if k == 0:    # vertical bar
        img[:, q: q + 2] = 1.0
    elif k == 1:  # horizontal bar
        img[q: q + 2, :] = 1.0
    elif k == 2:  # main diagonal
        img[np.abs(yy - xx) < 1.5] = 1.0
    elif k == 3:  # anti-diagonal
        img[np.abs(yy + xx - (size - 1)) < 1.5] = 1.0
    elif k == 4:  # filled disk
        img[(yy - c) ** 2 + (xx - c) ** 2 < (size / 4.0) ** 2] = 1.0
    elif k == 5:  # ring
        r2 = (yy - c) ** 2 + (xx - c) ** 2
        img[(r2 < (size / 2.8) ** 2) & (r2 > (size / 4.5) ** 2)] = 1.0
    elif k == 6:  # top-left corner block
        img[:q * 2, :q * 2] = 1.0
    elif k == 7:  # bottom-right corner block
        img[-q * 2:, -q * 2:] = 1.0
    elif k == 8:  # cross
        img[:, q * 2 - 1: q * 2 + 1] = 1.0
        img[q * 2 - 1: q * 2 + 1, :] = 1.0
    else:         # checker of 4 blocks
        img[:size // 2, size // 2:] = 1.0
        img[size // 2:, :size // 2] = 1.0
    return img


def make_synthetic(num_classes: int, per_class: int, image_size: int = 32,
                   noise_level: float = 0.1, seed: int = 0,
                   test_per_class: int | None = None
                   ) -> tuple[LabeledDataset, LabeledDataset]:
    """Deterministic glyph dataset: one prototype per class + Gaussian noise.

    Train and test draws use disjoint noise seeds derived from `seed`.
    """
    if not (1 <= num_classes <= 10):
        raise ConfigError("num_classes must be in [1, 10]")
    if image_size not in (16, 32):
        raise ConfigError("image_size must be 16 or 32")
    if test_per_class is None:
        test_per_class = max(1, per_class // 4)

    def draw(count: int, rng: np.random.Generator, split: str) -> LabeledDataset:
        images = np.empty((num_classes * count, 1, image_size, image_size),
                          dtype=np.float32)
        labels = np.empty(num_classes * count, dtype=np.int64)
        i = 0
        for cls in range(num_classes):
            proto = _glyph(cls, image_size)
            for _ in range(count):
                noisy = proto + noise_level * rng.standard_normal(
                    proto.shape).astype(np.float32)
                images[i, 0] = np.clip(noisy, 0.0, 1.0)
                labels[i] = cls
                i += 1
        return LabeledDataset(images, labels, split)

    train = draw(per_class, np.random.default_rng(seed * 2 + 1), "train")
    test = draw(test_per_class, np.random.default_rng(seed * 2 + 2), "test")
    return train, test


def split_class_incremental(dataset: LabeledDataset, classes_per_increment: int,
                            order_seed: int | None = None
                            ) -> tuple[TaskSchedule, list[LabeledDataset]]:
    """Partition a dataset into increments of `classes_per_increment` classes.

    Class order is the seeded permutation of all class ids (natural order
    when `order_seed` is None). The last group may be smaller.
    """
    if classes_per_increment < 1:
        raise ConfigError("classes_per_increment must be >= 1")
    classes = sorted(int(c) for c in np.unique(dataset.labels))
    if order_seed is not None:
        rng = np.random.default_rng(order_seed)
        classes = [classes[i] for i in rng.permutation(len(classes))]
    groups = [classes[i: i + classes_per_increment]
              for i in range(0, len(classes), classes_per_increment)]
    tasks = []
    for group in groups:
        mask = np.isin(dataset.labels, group)
        tasks.append(dataset.subset(mask))
    return TaskSchedule(groups, order_seed), tasks
