"""Retrieval grid images: query on the left, results to the right."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw

from .core import Rectangle
from .dataset import resize_image, to_uint8


def _thumb(image: np.ndarray, size: int) -> Image.Image:
    h, w = image.shape[:2]
    scale = size / max(h, w)
    nh, nw = max(1, round(h * scale)), max(1, round(w * scale))
    canvas = Image.new("RGB", (size, size), (255, 255, 255))
    canvas.paste(Image.fromarray(to_uint8(resize_image(image, nh, nw))), ((size - nw) // 2, (size - nh) // 2))
    return canvas


def query_panel(background: np.ndarray, rect: Rectangle, size: int) -> Image.Image:
    panel = _thumb(background, size)
    h, w = background.shape[:2]
    scale = size / max(h, w)
    ox, oy = (size - round(w * scale)) // 2, (size - round(h * scale)) // 2
    x0, y0, x1, y1 = rect.corners()
    ImageDraw.Draw(panel).rectangle(
        [ox + x0 * w * scale, oy + y0 * h * scale, ox + x1 * w * scale - 1, oy + y1 * h * scale - 1],
        outline=(255, 0, 0), width=2)
    return panel


def write_grid(path: str | Path, background: np.ndarray, rect: Rectangle,
               columns: Sequence[Sequence[np.ndarray]], cell: int = 96, gap: int = 4) -> tuple[int, int]:
    """Write a grid image; ``columns[c][r]`` is the image in result column c, row r.

    Instance-level results are one row (each column holds one image); pattern-level
    results hold one column per pattern with its members stacked. Returns (columns, rows).
    """
    rows = max((len(c) for c in columns), default=1)
    width = cell + gap + len(columns) * (cell + gap)
    height = rows * (cell + gap) - gap
    out = Image.new("RGB", (width, max(height, cell)), (200, 200, 200))
    out.paste(query_panel(background, rect, cell), (0, 0))
    for c, col in enumerate(columns):
        for r, img in enumerate(col):
            out.paste(_thumb(img, cell), (cell + gap + c * (cell + gap), r * (cell + gap)))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    out.save(path, format="PNG")
    return len(columns), rows
