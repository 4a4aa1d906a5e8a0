"""Per-channel spatial statistics, instance normalization and ArtBN.

All functions take ``(N, C, H, W)`` tensors. Statistics are taken over the
spatial axes separately for every sample and channel, with the population
(1/HW) variance and the stabilizer inside the square root.
"""

from __future__ import annotations

from typing import NamedTuple

import torch

from .errors import InvalidDimensionError, NonFiniteInputError, ShapeError

DEFAULT_EPS = 1e-5


class SpatialStats(NamedTuple):
    mu: torch.Tensor  # [N, C]
    sigma: torch.Tensor  # [N, C], >= sqrt(epsilon)
    epsilon: float


def _check(x: torch.Tensor, epsilon: float) -> None:
    if x.ndim != 4:
        raise ShapeError(f"expected an (N, C, H, W) tensor, got shape {tuple(x.shape)}")
    if x.shape[2] * x.shape[3] < 1:
        raise InvalidDimensionError("spatial extent H*W must be at least 1")
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    if not torch.isfinite(x).all():
        raise NonFiniteInputError("input contains NaN or Inf")


def spatial_stats(x: torch.Tensor, epsilon: float = DEFAULT_EPS) -> SpatialStats:
    _check(x, epsilon)
    mu = x.mean(dim=(2, 3))
    var = ((x - mu[..., None, None]) ** 2).mean(dim=(2, 3))
    return SpatialStats(mu, torch.sqrt(var + epsilon), epsilon)


def instance_norm(x: torch.Tensor, epsilon: float = DEFAULT_EPS) -> torch.Tensor:
    """Single-input ArtBN: ``(x - mu(x)) / sigma(x)``."""
    mu, sigma, _ = spatial_stats(x, epsilon)
    return (x - mu[..., None, None]) / sigma[..., None, None]


def art_bn(x: torch.Tensor, y: torch.Tensor, epsilon: float = DEFAULT_EPS) -> torch.Tensor:
    """Renormalize ``x`` so its per-channel mean/std match those of ``y``.

    ``y`` may have a different spatial extent than ``x`` but must share the
    sample and channel counts.
    """
    if x.ndim != 4 or y.ndim != 4:
        raise ShapeError("art_bn expects (N, C, H, W) tensors")
    if x.shape[:2] != y.shape[:2]:
        raise ShapeError(
            f"sample/channel mismatch: {tuple(x.shape[:2])} vs {tuple(y.shape[:2])}"
        )
    mu_y, sigma_y, _ = spatial_stats(y, epsilon)
    return sigma_y[..., None, None] * instance_norm(x, epsilon) + mu_y[..., None, None]


def token_view(m: torch.Tensor) -> torch.Tensor:
    """View token matrices ``[m, d]`` or ``[B, m, d]`` as ``[B, d, m, 1]``.

    Feature columns become channels and tokens become the spatial axis, so
    the statistics above are per feature across tokens.
    """
    if m.ndim == 2:
        m = m[None]
    if m.ndim != 3:
        raise ShapeError(f"expected [m, d] or [B, m, d] tokens, got {tuple(m.shape)}")
    return m.transpose(1, 2)[..., None]


def from_token_view(x: torch.Tensor, batched: bool) -> torch.Tensor:
    out = x[..., 0].transpose(1, 2)
    return out if batched else out[0]


def token_instance_norm(m: torch.Tensor, epsilon: float = DEFAULT_EPS) -> torch.Tensor:
    return from_token_view(instance_norm(token_view(m), epsilon), m.ndim == 3)


def token_art_bn(x: torch.Tensor, y: torch.Tensor, epsilon: float = DEFAULT_EPS) -> torch.Tensor:
    """:func:`art_bn` on token matrices; ``x`` and ``y`` may differ in token count."""
    if x.ndim != y.ndim:
        raise ShapeError("token matrices must agree on batching")
    return from_token_view(art_bn(token_view(x), token_view(y), epsilon), x.ndim == 3)
