"""Seeded stand-ins for the text and image encoders.

Random tables come from SplitMix64 in counter mode: element ``i`` of a
stream seeded with ``s`` is ``mix64(s + (i + 1) * 0x9E3779B97F4A7C15)``
(mod 2**64). Uniforms take the top 53 bits, ``u = (x >> 11) * 2**-53``.
Standard normals use Box-Muller on consecutive pairs ``(u1, u2)``:
``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)``, one normal per pair. Tables are
filled in row-major order. Everything here is reproducible from that
description alone.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch

from .errors import DomainError, ShapeError

VOCAB_SIZE = 4096
MAX_LENGTH = 16
TEXT_WIDTH = 64
IMAGE_WIDTH = 64
PATCH = 8
PAD_ID = 0

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1

# stream ids keep the text table and image projection independent for one seed
_TEXT_STREAM = 0x7E47
_IMAGE_STREAM = 0x1A6E


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def splitmix64(seed: int, count: int) -> np.ndarray:
    """First ``count`` outputs of SplitMix64 seeded with ``seed``."""
    with np.errstate(over="ignore"):
        idx = np.arange(1, count + 1, dtype=np.uint64)
        return _mix64(np.uint64(seed & _MASK64) + idx * _GOLDEN)


def uniform(seed: int, count: int) -> np.ndarray:
    return (splitmix64(seed, count) >> np.uint64(11)).astype(np.float64) * 2.0**-53


def standard_normal(seed: int, shape: tuple[int, ...]) -> np.ndarray:
    n = math.prod(shape)
    u = uniform(seed, 2 * n).reshape(n, 2)
    z = np.sqrt(-2.0 * np.log1p(-u[:, 0])) * np.cos(2.0 * math.pi * u[:, 1])
    return z.reshape(shape)


def _substream(seed: int, stream: int) -> int:
    return int(splitmix64(seed ^ stream, 1)[0])


def fnv1a64(data: bytes, basis: int = _FNV_OFFSET) -> int:
    h = basis
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


_WORD = re.compile(r"\w+")


def tokenize(prompt: str, max_length: int = MAX_LENGTH) -> list[int]:
    """Lowercase, split on whitespace/punctuation, hash each word into the vocabulary.

    Id 0 is reserved for padding, so words map to ``1 + fnv1a64(word) % 4095``.
    """
    words = _WORD.findall(prompt.lower())[:max_length]
    ids = [1 + fnv1a64(w.encode("utf-8")) % (VOCAB_SIZE - 1) for w in words]
    return ids + [PAD_ID] * (max_length - len(ids))


def sinusoidal_positions(n: int, width: int) -> np.ndarray:
    pos = np.arange(n, dtype=np.float64)[:, None]
    freq = np.exp(-math.log(10000.0) * np.arange(0, width, 2, dtype=np.float64) / width)
    out = np.zeros((n, width))
    out[:, 0::2] = np.sin(pos * freq)
    out[:, 1::2] = np.cos(pos * freq[: width // 2])
    return out


@lru_cache(maxsize=8)
def _token_table(seed: int, width: int) -> np.ndarray:
    table = standard_normal(_substream(seed, _TEXT_STREAM), (VOCAB_SIZE, width))
    table.setflags(write=False)
    return table


@lru_cache(maxsize=8)
def _patch_projection(seed: int, patch_dim: int, width: int) -> np.ndarray:
    w = standard_normal(_substream(seed, _IMAGE_STREAM), (patch_dim, width)) / math.sqrt(patch_dim)
    w.setflags(write=False)
    return w


@dataclass(frozen=True)
class TextEmbedding:
    tokens: tuple[int, ...]
    embedding: torch.Tensor  # [n, d_text]

    @property
    def n(self) -> int:
        return self.embedding.shape[0]

    @property
    def d_text(self) -> int:
        return self.embedding.shape[1]


@dataclass(frozen=True)
class ImageEmbedding:
    embedding: torch.Tensor  # [m, d]
    source_dims: tuple[int, int, int]

    @property
    def m(self) -> int:
        return self.embedding.shape[0]


def encode_text(tokens, seed: int = 0, width: int = TEXT_WIDTH) -> TextEmbedding:
    tokens = tuple(int(t) for t in tokens)
    bad = [t for t in tokens if not 0 <= t < VOCAB_SIZE]
    if bad:
        raise DomainError(f"token ids outside the vocabulary: {bad}")
    table = _token_table(seed, width)
    emb = table[list(tokens)] + sinusoidal_positions(len(tokens), width)
    return TextEmbedding(tokens, torch.tensor(emb))


def embed_prompt(prompt: str, seed: int = 0) -> TextEmbedding:
    return encode_text(tokenize(prompt), seed)


def encode_image(img: torch.Tensor, patch: int = PATCH, seed: int = 0, width: int = IMAGE_WIDTH) -> ImageEmbedding:
    """Flatten non-overlapping patches and apply a fixed linear projection (no bias).

    Accepts ``(C, H, W)`` or a single-sample ``(1, C, H, W)`` tensor.
    """
    if img.ndim == 4:
        if img.shape[0] != 1:
            raise ShapeError("encode_image takes one image at a time")
        img = img[0]
    c, h, w = img.shape
    if h % patch or w % patch:
        raise ShapeError(f"image {h}x{w} is not divisible by patch size {patch}")
    x = img.to(torch.float64).reshape(c, h // patch, patch, w // patch, patch)
    patches = x.permute(1, 3, 0, 2, 4).reshape((h // patch) * (w // patch), c * patch * patch)
    proj = torch.tensor(_patch_projection(seed, c * patch * patch, width))
    return ImageEmbedding(patches @ proj, (c, h, w))
