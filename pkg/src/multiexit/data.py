"""Synthetic class-conditional image data and batching."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional, Tuple

import numpy as np

SPLITS = ("train", "val", "test")
_SPLIT_SALT = {"train": 0, "val": 7_919, "test": 15_485}


@dataclass
class Dataset:
    """uint8 images (N, C, H, W) with integer labels in [0, K)."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        if self.images.dtype != np.uint8 or self.images.ndim != 4:
            raise ValueError(f"images must be uint8 NCHW, got {self.images.dtype} {self.images.shape}")
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.shape != (len(self.images),):
            raise ValueError("one label per image required")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels outside [0, {self.num_classes})")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.split)


def to_float(images: np.ndarray) -> np.ndarray:
    """uint8 images -> float32 roughly centred on zero."""
    return (images.astype(np.float32) - 127.5) / 64.0


def batches(ds: Dataset, batch_size: int, rng: Optional[np.random.Generator] = None,
            flip: bool = False, drop_last: bool = False) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Yield (float images, labels); shuffled when ``rng`` is given."""
    n = len(ds)
    order = rng.permutation(n) if rng is not None else np.arange(n)
    stop = n - n % batch_size if drop_last else n
    for start in range(0, stop, batch_size):
        idx = order[start : start + batch_size]
        x = to_float(ds.images[idx])
        if flip and rng is not None:
            mask = rng.random(len(idx)) < 0.5
            x[mask] = x[mask, :, :, ::-1]
        yield x, ds.labels[idx]


def _palette(k: int) -> np.ndarray:
    hues = np.arange(k) / k
    # HSV -> RGB at full saturation/value
    h6 = hues * 6
    c = np.stack([np.clip(np.abs(h6 - 3) - 1, 0, 1),
                  np.clip(2 - np.abs(h6 - 2), 0, 1),
                  np.clip(2 - np.abs(h6 - 4), 0, 1)], axis=1)
    return 40 + 180 * c


def _shape_mask(kind: int, yy: np.ndarray, xx: np.ndarray, cy: float, cx: float, r: float) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    if kind == 0:  # disc
        return dy ** 2 + dx ** 2 <= r ** 2
    if kind == 1:  # square
        return (np.abs(dy) <= r * 0.85) & (np.abs(dx) <= r * 0.85)
    if kind == 2:  # triangle
        return (dy <= r * 0.8) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)
    if kind == 3:  # cross
        return ((np.abs(dy) <= r * 0.3) & (np.abs(dx) <= r)) | ((np.abs(dx) <= r * 0.3) & (np.abs(dy) <= r))
    ring = dy ** 2 + dx ** 2
    return (ring <= r ** 2) & (ring >= (0.55 * r) ** 2)


def generate_synthetic(num_classes: int = 10, per_class: int = 200, size: int = 32, seed: int = 0,
                       difficulty: float = 0.5, split: str = "train") -> Dataset:
    """Colored shapes over class-specific stripe textures, plus noise.

    Each class has its own hue, shape, stripe frequency and orientation.
    ``difficulty`` in [0, 1] scales pixel noise, color jitter, and the chance a
    sample borrows another class's color and texture. Distinct splits draw from
    disjoint random streams; the output is a deterministic function of the
    arguments.
    """
    if size < 16:
        raise ValueError(f"image size must be >= 16, got {size}")
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    rng = np.random.default_rng([seed, _SPLIT_SALT[split], num_classes, size])
    palette = _palette(num_classes)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    n = num_classes * per_class
    labels = np.repeat(np.arange(num_classes), per_class)
    rng.shuffle(labels)
    images = np.empty((n, 3, size, size), dtype=np.uint8)
    d = float(difficulty)
    for i, c in enumerate(labels):
        color_cls = c
        tex_cls = c
        if rng.random() < 0.5 * d:
            color_cls = rng.integers(num_classes)
        if rng.random() < 0.5 * d:
            tex_cls = rng.integers(num_classes)
        freq = 2.0 + (tex_cls % 4) * 1.5
        theta = np.pi * tex_cls / num_classes
        phase = rng.uniform(0, 2 * np.pi)
        stripes = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) / size + phase)
        bg_level = 70 + 30 * ((tex_cls * 7) % num_classes) / max(num_classes - 1, 1)
        img = np.empty((3, size, size))
        img[:] = bg_level + 35 * stripes
        r = size * rng.uniform(0.2, 0.32)
        cy, cx = rng.uniform(r, size - r, 2)
        mask = _shape_mask(int(c % 5), yy, xx, cy, cx, r)
        color = palette[color_cls] + rng.normal(0, 10 + 40 * d, 3)
        img[:, mask] = color[:, None]
        img += rng.normal(0, 60 * d, img.shape)
        images[i] = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return Dataset(images, labels, num_classes, split)
