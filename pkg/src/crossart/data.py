"""Procedural toy "artworks" in two style families."""

from __future__ import annotations

import colorsys
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
import torch

FAMILIES = ("oil", "ink")
FAMILY_PROMPTS = {"oil": "a warm oil painting", "ink": "a cool ink drawing"}

# hue ranges in [0, 1); oil wraps around red
_HUES = {"oil": (-0.08, 0.14), "ink": (0.48, 0.70)}


@dataclass(frozen=True)
class SyntheticDataset(Sequence):
    """Images are ``(1, 3, R, R)`` float32 tensors with values in [0, 1]."""

    images: tuple[torch.Tensor, ...]
    families: tuple[str, ...]

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i):
        return self.images[i]

    def prompts(self) -> list[str]:
        return [FAMILY_PROMPTS[f] for f in self.families]


def _palette(rng: np.random.Generator, family: str) -> np.ndarray:
    lo, hi = _HUES[family]
    colors = []
    for _ in range(3):
        h = rng.uniform(lo, hi) % 1.0
        s = rng.uniform(0.45, 0.9)
        v = rng.uniform(0.35, 0.95)
        colors.append(colorsys.hsv_to_rgb(h, s, v))
    return np.array(colors)


def _shape_mask(rng: np.random.Generator, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    kind = rng.integers(3)
    if kind == 0:  # disk
        cy, cx = rng.uniform(0.2, 0.8, 2)
        r = rng.uniform(0.1, 0.3)
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r**2
    if kind == 1:  # stripe band at a random angle
        theta = rng.uniform(0, np.pi)
        offset = rng.uniform(0.3, 0.7)
        width = rng.uniform(0.06, 0.18)
        d = (xx - 0.5) * np.cos(theta) + (yy - 0.5) * np.sin(theta) + 0.5
        return np.abs(d - offset) <= width / 2
    pts = rng.uniform(0.1, 0.9, size=(3, 2))  # triangle, via barycentric signs
    (y1, x1), (y2, x2), (y3, x3) = pts
    def edge(ya, xa, yb, xb):
        return (xx - xb) * (ya - yb) - (xa - xb) * (yy - yb)
    d1, d2, d3 = edge(y1, x1, y2, x2), edge(y2, x2, y3, x3), edge(y3, x3, y1, x1)
    neg = (d1 < 0) | (d2 < 0) | (d3 < 0)
    pos = (d1 > 0) | (d2 > 0) | (d3 > 0)
    return ~(neg & pos)


def make_artwork(rng: np.random.Generator, resolution: int, family: str) -> np.ndarray:
    """One ``(3, R, R)`` image in [0, 1]."""
    r = resolution
    yy, xx = np.meshgrid((np.arange(r) + 0.5) / r, (np.arange(r) + 0.5) / r, indexing="ij")
    pal = _palette(rng, family)

    theta = rng.uniform(0, 2 * np.pi)
    ramp = np.clip((xx - 0.5) * np.cos(theta) + (yy - 0.5) * np.sin(theta) + 0.5, 0, 1)
    img = pal[0][:, None, None] * (1 - ramp) + pal[1][:, None, None] * ramp

    for _ in range(rng.integers(1, 5)):
        mask = _shape_mask(rng, yy, xx)
        color = pal[rng.integers(3)] if rng.random() < 0.5 else pal[2]
        img = np.where(mask[None], color[:, None, None], img)

    if rng.random() < 0.7:
        if family == "oil":
            # coarse blotches, upsampled
            k = max(r // 8, 1)
            grain = np.kron(rng.normal(0, 0.05, (r // k + 1, r // k + 1)), np.ones((k, k)))[:r, :r]
        else:
            grain = rng.normal(0, 0.03, (r, r))
        img = img + grain[None]
    return np.clip(img, 0.0, 1.0)


def make_synthetic_dataset(count: int, resolution: int = 32, seed: int = 0) -> SyntheticDataset:
    """Even indices are "oil" (warm palette), odd indices "ink" (cool palette)."""
    if count < 1:
        raise ValueError("count must be at least 1")
    rng = np.random.default_rng(seed)
    images, families = [], []
    for i in range(count):
        family = FAMILIES[i % 2]
        img = make_artwork(rng, resolution, family)
        images.append(torch.from_numpy(img.astype(np.float32))[None])
        families.append(family)
    return SyntheticDataset(tuple(images), tuple(families))
