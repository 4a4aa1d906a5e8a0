"""PNG <-> ``(1, 3, H, W)`` tensors in [-1, 1], and figure grids."""

from __future__ import annotations

import math
import os
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .errors import DomainError, ShapeError

GUTTER = 2


class ImageIOError(OSError):
    pass


def nearest_resize(arr: np.ndarray, size: int) -> np.ndarray:
    """Nearest neighbour on an ``(H, W, C)`` array: output pixel ``i`` reads ``floor(i * H / size)``."""
    h, w = arr.shape[:2]
    rows = (np.arange(size) * h) // size
    cols = (np.arange(size) * w) // size
    return arr[rows][:, cols]


def load_image(path, resolution: int) -> torch.Tensor:
    try:
        with Image.open(path) as im:
            if im.format != "PNG":
                raise ImageIOError(f"{path}: expected a PNG, got {im.format}")
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, UnidentifiedImageError) as exc:
        if isinstance(exc, ImageIOError):
            raise
        raise ImageIOError(f"cannot read image {path}: {exc}") from exc
    arr = nearest_resize(arr, resolution)
    x = torch.from_numpy(arr.astype(np.float32)).permute(2, 0, 1)[None]
    return x / 127.5 - 1.0


def to_uint8(x: torch.Tensor) -> np.ndarray:
    """``(1, 3, H, W)`` in [-1, 1] to ``(H, W, 3)`` bytes, rounding half up."""
    if x.ndim != 4 or x.shape[0] != 1 or x.shape[1] != 3:
        raise ShapeError(f"expected a 1x3xHxW tensor, got {tuple(x.shape)}")
    v = x[0].detach().to(torch.float64).clamp(-1.0, 1.0).permute(1, 2, 0).cpu().numpy()
    return np.floor((v + 1.0) * 127.5 + 0.5).astype(np.uint8)


def _write_png(arr: np.ndarray, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        Image.fromarray(arr).save(tmp, format="PNG")
        os.replace(tmp, path)
    except OSError as exc:
        raise ImageIOError(f"cannot write image {path}: {exc}") from exc


def save_image(x: torch.Tensor, path) -> None:
    _write_png(to_uint8(x), path)


def grid_array(images: Sequence[torch.Tensor], columns: int) -> np.ndarray:
    """Row-major tiling with white gutters between and around the tiles."""
    if not images:
        raise DomainError("cannot build a grid from zero images")
    if columns < 1:
        raise DomainError("columns must be >= 1")
    shapes = {tuple(img.shape) for img in images}
    if len(shapes) != 1:
        raise ShapeError(f"grid images differ in shape: {sorted(shapes)}")
    _, _, h, w = images[0].shape
    cols = min(columns, len(images))
    rows = math.ceil(len(images) / cols)
    out = np.full((rows * h + (rows + 1) * GUTTER, cols * w + (cols + 1) * GUTTER, 3), 255, np.uint8)
    for i, img in enumerate(images):
        r, c = divmod(i, cols)
        y, x = GUTTER + r * (h + GUTTER), GUTTER + c * (w + GUTTER)
        out[y : y + h, x : x + w] = to_uint8(img)
    return out


def emit_grid(images: Sequence[torch.Tensor], columns: int, path) -> None:
    _write_png(grid_array(images, columns), path)
