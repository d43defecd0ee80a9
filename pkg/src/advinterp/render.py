"""Heatmap grid rendering: rows are images, columns are the input followed by saliency maps."""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np
from PIL import Image

from .attribution import to_uint8
from .records import atomic_write

OVERLAY_COLOR = np.array([255, 32, 0], dtype=np.float64)
PAD = 2
BACKGROUND = 255


def input_cell(image: np.ndarray, size: int) -> np.ndarray:
    """C x H x W float image in [0, 1] -> size x size x 3 uint8."""
    arr = to_uint8(np.transpose(np.asarray(image), (1, 2, 0)))
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    return np.asarray(Image.fromarray(arr, mode="RGB").resize((size, size), Image.NEAREST))


def heatmap_cell(values: np.ndarray, size: int, image: np.ndarray | None = None, alpha: float = 0.6) -> np.ndarray:
    """Single-colored intensity map, or the same intensity alpha-blended over ``image``."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    if image is None:
        gray = to_uint8(v)
        cell = np.repeat(gray[:, :, None], 3, axis=2)
    else:
        base = np.transpose(np.asarray(image, dtype=np.float64), (1, 2, 0)) * 255.0
        w = alpha * v[:, :, None]
        cell = np.round((1.0 - w) * base + w * OVERLAY_COLOR).astype(np.uint8)
    return np.asarray(Image.fromarray(cell, mode="RGB").resize((size, size), Image.NEAREST))


def compose_grid(cells: list[list[np.ndarray]], size: int) -> Image.Image | None:
    """Tile equally sized RGB cells; returns None for an empty grid."""
    if not cells or not cells[0]:
        return None
    n_rows, n_cols = len(cells), max(len(r) for r in cells)
    canvas = np.full((n_rows * (size + PAD) + PAD, n_cols * (size + PAD) + PAD, 3), BACKGROUND, dtype=np.uint8)
    for i, row in enumerate(cells):
        for j, cell in enumerate(row):
            y, x = PAD + i * (size + PAD), PAD + j * (size + PAD)
            canvas[y : y + size, x : x + size] = cell
    return Image.fromarray(canvas, mode="RGB")


def png_bytes(image: Image.Image) -> bytes:
    buf = io.BytesIO()
    image.save(buf, format="PNG", optimize=False)
    return buf.getvalue()


def save_grid(cells: list[list[np.ndarray]], size: int, path) -> Path | None:
    grid = compose_grid(cells, size)
    if grid is None:
        return None
    return atomic_write(path, png_bytes(grid))
