"""Datasets: CIFAR-10 binary records, block downscaling, synthetic images, PPM."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

CIFAR_RECORD = 3073
CIFAR_SIDE = 32
CIFAR_CLASSES = 10


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    """uint8 images [N, H, W, 3] with optional integer labels [N]."""

    images: np.ndarray
    labels: np.ndarray | None = None
    split: str = "train"

    def __post_init__(self):
        imgs = np.asarray(self.images)
        if imgs.ndim != 4 or imgs.shape[-1] != 3 or imgs.dtype != np.uint8:
            raise DataFormatError(f"images must be uint8 [N, H, W, 3], got {imgs.dtype} {imgs.shape}")
        if imgs.shape[0] == 0:
            raise DataFormatError("dataset is empty")
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64)
            if labels.shape != (imgs.shape[0],):
                raise DataFormatError(f"expected {imgs.shape[0]} labels, got shape {labels.shape}")
            if (labels < 0).any():
                raise DataFormatError("labels must be non-negative")
            object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def hw(self) -> tuple[int, int]:
        return int(self.images.shape[1]), int(self.images.shape[2])

    def subset(self, idx, split: str | None = None) -> Dataset:
        labels = None if self.labels is None else self.labels[idx]
        return Dataset(self.images[idx], labels, self.split if split is None else split)


def load_cifar_binary(path) -> Dataset:
    """Parse a CIFAR-10 binary batch (1 label byte + 3072 channel-planar bytes)."""
    raw = np.fromfile(os.fspath(path), dtype=np.uint8)
    if raw.size == 0:
        raise DataFormatError(f"{path}: empty file")
    if raw.size % CIFAR_RECORD:
        raise DataFormatError(f"{path}: size {raw.size} is not a multiple of {CIFAR_RECORD}")
    rec = raw.reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if (labels >= CIFAR_CLASSES).any():
        bad = int(np.argmax(labels >= CIFAR_CLASSES))
        raise DataFormatError(f"{path}: record {bad} has label {labels[bad]} > 9")
    images = rec[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE).transpose(0, 2, 3, 1)
    return Dataset(np.ascontiguousarray(images), labels, "train")


def downscale(dataset: Dataset, factor: int) -> Dataset:
    """Average factor x factor blocks, rounding halves up."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    n, h, w, c = dataset.images.shape
    if h % factor or w % factor:
        raise ValueError(f"image size {h}x{w} is not divisible by {factor}")
    blocks = dataset.images.astype(np.int64).reshape(n, h // factor, factor, w // factor, factor, c)
    total = blocks.sum(axis=(2, 4))
    area = factor * factor
    # floor(total / area + 1/2) in exact integer arithmetic
    out = (2 * total + area) // (2 * area)
    return Dataset(out.astype(np.uint8), dataset.labels, dataset.split)


def synthetic_images(n: int, size: int = 32, seed: int = 0, n_classes: int = CIFAR_CLASSES) -> Dataset:
    """Smooth gradients with a few flat-colored rectangles and discs.

    Labels are the index of the dominant shape kind and background
    orientation, so class-conditional runs have something to learn.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    images = np.empty((n, size, size, 3), dtype=np.uint8)
    labels = rng.integers(0, n_classes, size=n)
    for k in range(n):
        angle = 2 * np.pi * labels[k] / n_classes + rng.normal(0, 0.2)
        t = np.cos(angle) * xx + np.sin(angle) * yy
        c0, c1 = rng.uniform(0, 255, 3), rng.uniform(0, 255, 3)
        img = c0 + (c1 - c0) * ((t - t.min()) / (np.ptp(t) + 1e-9))[..., None]
        for _ in range(rng.integers(1, 4)):
            color = rng.uniform(0, 255, 3)
            cy, cx = rng.uniform(0.15, 0.85, 2)
            r = rng.uniform(0.1, 0.3)
            if labels[k] % 2:
                m = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
            else:
                m = (np.abs(yy - cy) < r) & (np.abs(xx - cx) < r * 0.7)
            img[m] = color
        img += rng.normal(0, 2.0, img.shape)
        images[k] = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return Dataset(images, labels.astype(np.int64), "train")


def desk_dataset(cifar_path=None, n_total: int = 400, n_eval: int = 100, factor: int = 2, seed: int = 0):
    """First ``n_total`` images at 32x32, downscaled; the last ``n_eval`` held out.

    Uses CIFAR-10 when ``cifar_path`` is given, otherwise synthetic images.
    Returns (train, eval).
    """
    if n_eval >= n_total:
        raise ValueError("n_eval must be smaller than n_total")
    if cifar_path is not None:
        full = load_cifar_binary(cifar_path)
        if len(full) < n_total:
            raise DataFormatError(f"{cifar_path}: only {len(full)} records, need {n_total}")
        full = full.subset(slice(0, n_total))
    else:
        full = synthetic_images(n_total, CIFAR_SIDE, seed=seed)
    small = downscale(full, factor) if factor > 1 else full
    n_train = n_total - n_eval
    return small.subset(slice(0, n_train), "train"), small.subset(slice(n_train, n_total), "eval")


# ---------------------------------------------------------------------------
# PPM


def write_ppm(image, path) -> None:
    """Write an [H, W, 3] uint8 image as binary PPM (P6, maxval 255)."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ValueError(f"expected [H, W, 3] image, got {img.shape}")
    if img.dtype != np.uint8:
        if (img < 0).any() or (img > 255).any():
            raise ValueError("pixel values must lie in 0..255")
        img = img.astype(np.uint8)
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(img).tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 PPM with maxval 255 (comments allowed in the header)."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataFormatError(f"{path}: truncated PPM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise DataFormatError(f"{path}: only P6 with maxval 255 is supported")
    w, h = int(tokens[1]), int(tokens[2])
    body = data[pos + 1 : pos + 1 + w * h * 3]
    if len(body) != w * h * 3:
        raise DataFormatError(f"{path}: truncated pixel data")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()
