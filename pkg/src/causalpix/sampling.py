"""Raster-order ancestral sampling and sample files."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .ablations import softmax_conditional_logprobs
from .data import write_ppm
from .dlm import sample_pixels, unpack_head
from .network import Model, forward, preprocess


def _softmax_draw(head_row: np.ndarray, rng) -> np.ndarray:
    out = np.empty((head_row.shape[0], 3), dtype=np.uint8)
    for k, h in enumerate(head_row):
        prefix: list[int] = []
        for _ in range(3):
            cdf = np.cumsum(np.exp(softmax_conditional_logprobs(h, *prefix)))
            v = int(min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"), 255))
            prefix.append(v)
        out[k] = prefix
    return out


def sample_images(model: Model, n: int, height: int, width: int, seed: int = 0, label=None) -> np.ndarray:
    """Draw ``n`` images pixel by pixel; returns uint8 [n, height, width, 3].

    ``label`` is an int (shared) or a sequence of n class ids.
    """
    cfg = model.config
    rng = np.random.default_rng(seed)
    labels = None
    if label is not None:
        labels = np.broadcast_to(np.asarray(label, dtype=np.int64), (n,)).copy()
    canvas = np.zeros((n, height, width, 3), dtype=np.uint8)
    for i in range(height):
        for j in range(width):
            head = forward(model, preprocess(canvas), labels, "eval").data[:, i, j]
            if cfg.likelihood == "softmax":
                canvas[:, i, j] = _softmax_draw(head.astype(np.float64), rng)
            else:
                canvas[:, i, j] = sample_pixels(unpack_head(head.astype(np.float64), cfg.K), rng)
    return canvas


def sample_filename(seed: int, label, index: int) -> str:
    tag = "none" if label is None else str(int(label))
    return f"sample_seed{seed}_label{tag}_{index:03d}.ppm"


def emit_samples(model: Model, n: int, out_dir, height: int, width: int, seed: int = 0, label=None) -> list[Path]:
    """Sample ``n`` images and write one PPM per image; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    images = sample_images(model, n, height, width, seed, label)
    paths = []
    for k, img in enumerate(images):
        p = out / sample_filename(seed, label, k)
        write_ppm(img, p)
        paths.append(p)
    return paths


def class_grid(model: Model, rows: int, height: int, width: int, seed: int = 0) -> np.ndarray:
    """Tile samples into a grid with one column per class label.

    Cell (r, c) holds the r-th sample drawn with label c.
    """
    n_classes = model.config.n_classes
    if n_classes is None:
        raise ValueError("class grids need a class-conditional model")
    labels = np.tile(np.arange(n_classes), rows)
    images = sample_images(model, rows * n_classes, height, width, seed, labels)
    grid = images.reshape(rows, n_classes, height, width, 3).transpose(0, 2, 1, 3, 4)
    return grid.reshape(rows * height, n_classes * width, 3)


def emit_class_grid(model: Model, rows: int, out_dir, height: int, width: int, seed: int = 0) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    p = out / f"grid_seed{seed}_classes{model.config.n_classes}.ppm"
    write_ppm(class_grid(model, rows, height, width, seed), p)
    return p
