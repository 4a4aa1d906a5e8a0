"""Scaled dot-product, shared (style-aligned) and decoupled cross-attention.

Token matrices are ``[m, d]`` or batched ``[B, m, d]``. Multi-head layouts
split the feature axis into ``heads`` contiguous slices; the logit scale is
the per-head key width.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Optional

import torch

from .errors import DomainError, ShapeError
from .stats import DEFAULT_EPS, token_art_bn, token_instance_norm

ArtBNDirection = Literal["equation", "prose"]


@dataclass(frozen=True)
class AttentionProjections:
    q: torch.Tensor
    k: torch.Tensor
    v: torch.Tensor
    heads: int = 1

    def __post_init__(self):
        q, k, v = self.q, self.k, self.v
        if not (q.ndim == k.ndim == v.ndim and q.ndim in (2, 3)):
            raise ShapeError("q, k, v must all be [m, d] or all be [B, m, d]")
        if q.shape[:-2] != k.shape[:-2] or k.shape[:-2] != v.shape[:-2]:
            raise ShapeError("batch dimensions of q, k, v differ")
        if k.shape[-2] != v.shape[-2]:
            raise ShapeError(f"K has {k.shape[-2]} rows but V has {v.shape[-2]}")
        if q.shape[-1] != k.shape[-1]:
            raise ShapeError(f"d_k mismatch: Q has {q.shape[-1]} columns, K has {k.shape[-1]}")
        if self.heads < 1 or self.d_k % self.heads or self.d_h % self.heads:
            raise ShapeError(f"d_k={self.d_k}, d_h={self.d_h} not divisible by heads={self.heads}")

    @property
    def d_k(self) -> int:
        return self.q.shape[-1]

    @property
    def d_h(self) -> int:
        return self.v.shape[-1]


def split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    """``[..., m, d] -> [..., heads, m, d // heads]``."""
    *lead, m, d = x.shape
    return x.reshape(*lead, m, heads, d // heads).transpose(-3, -2)


def merge_heads(x: torch.Tensor) -> torch.Tensor:
    *lead, heads, m, dh = x.shape
    return x.transpose(-3, -2).reshape(*lead, m, heads * dh)


def softmax(logits: torch.Tensor) -> torch.Tensor:
    """Row softmax over the last axis with max subtraction.

    The row max is a constant shift, so it is detached from autograd.
    """
    shifted = logits - logits.amax(dim=-1, keepdim=True).detach()
    e = torch.exp(shifted)
    return e * e.sum(dim=-1, keepdim=True).reciprocal()


def attention_weights(
    q: torch.Tensor, k: torch.Tensor, heads: int, bias: Optional[torch.Tensor] = None
) -> torch.Tensor:
    """Row-stochastic weights ``[..., heads, m_q, m_k]``.

    ``bias`` is an additive per-key logit offset of shape ``[m_k]``.
    """
    qh, kh = split_heads(q, heads), split_heads(k, heads)
    logits = (qh * (1.0 / math.sqrt(qh.shape[-1]))) @ kh.transpose(-1, -2)
    if bias is not None:
        logits = logits + bias
    return softmax(logits)


def scaled_dot_attention(p: AttentionProjections) -> torch.Tensor:
    w = attention_weights(p.q, p.k, p.heads)
    return merge_heads(w @ split_heads(p.v, p.heads))


@dataclass(frozen=True)
class StyleAlignedSet:
    target: AttentionProjections
    semantic: Optional[AttentionProjections]
    q_hat_t: torch.Tensor
    k_hat_t: torch.Tensor
    k_ts: torch.Tensor
    v_ts: torch.Tensor
    semantic_scale: float

    @property
    def n_semantic(self) -> int:
        """Leading rows of the key/value stacks that come from the semantic stream."""
        return 0 if self.semantic is None else self.semantic.k.shape[-2]

    @property
    def heads(self) -> int:
        return self.target.heads


def build_style_aligned(
    target: AttentionProjections,
    semantic: Optional[AttentionProjections] = None,
    semantic_scale: float = 1.0,
    epsilon: float = DEFAULT_EPS,
    *,
    normalize: bool = True,
    direction: ArtBNDirection = "equation",
) -> StyleAlignedSet:
    """Renormalize the target query/key and stack shared keys and values.

    With a semantic stream, ``direction="equation"`` renormalizes the
    target query/key to the semantic statistics; ``"prose"`` instead
    renormalizes the semantic key to the target statistics and leaves the
    target query/key untouched. Without one (or at ``semantic_scale == 0``)
    the target query/key are instance-normalized. ``normalize=False`` skips
    all renormalization.
    """
    if not 0.0 <= semantic_scale <= 1.0:
        raise DomainError(f"semantic_scale must lie in [0, 1], got {semantic_scale}")
    if direction not in ("equation", "prose"):
        raise DomainError(f"unknown ArtBN direction {direction!r}")
    if semantic is not None:
        if semantic.d_k != target.d_k or semantic.d_h != target.d_h:
            raise ShapeError("semantic and target projections differ in d_k or d_h")
        if semantic.q.shape[:-2] != target.q.shape[:-2]:
            raise ShapeError("semantic and target batch dimensions differ")
        if semantic.heads != target.heads:
            raise ShapeError("semantic and target head counts differ")

    q_t, k_t, v_t = target.q, target.k, target.v
    active = semantic is not None and semantic_scale > 0.0
    if not normalize:
        q_hat, k_hat = q_t, k_t
    elif not active:
        q_hat = token_instance_norm(q_t, epsilon)
        k_hat = token_instance_norm(k_t, epsilon)
    elif direction == "equation":
        q_hat = token_art_bn(q_t, semantic.q, epsilon)
        k_hat = token_art_bn(k_t, semantic.k, epsilon)
    else:
        q_hat, k_hat = q_t, k_t

    if semantic is None:
        k_ts, v_ts = k_hat, v_t
    else:
        k_s = semantic.k
        if normalize and active and direction == "prose":
            k_s = token_art_bn(k_s, k_t, epsilon)
        k_ts = torch.cat([k_s, k_hat], dim=-2)
        v_ts = torch.cat([semantic.v, v_t], dim=-2)
    return StyleAlignedSet(target, semantic, q_hat, k_hat, k_ts, v_ts, float(semantic_scale))


def semantic_logit_bias(s: StyleAlignedSet) -> Optional[torch.Tensor]:
    """``ln(scale)`` on semantic key columns, 0 on target columns."""
    n_s = s.n_semantic
    if n_s == 0 or s.semantic_scale == 1.0:
        return None
    bias = torch.zeros(s.k_ts.shape[-2], dtype=s.k_ts.dtype, device=s.k_ts.device)
    bias[:n_s] = math.log(s.semantic_scale)
    return bias


def shared_attention(s: StyleAlignedSet) -> torch.Tensor:
    """Target queries attend over the stacked semantic + target keys/values.

    A zero semantic scale drops the semantic columns outright, which is the
    ``-inf`` logit limit computed without the extra columns.
    """
    k_ts, v_ts = s.k_ts, s.v_ts
    if s.n_semantic and s.semantic_scale == 0.0:
        k_ts, v_ts = k_ts[..., s.n_semantic :, :], v_ts[..., s.n_semantic :, :]
        bias = None
    else:
        bias = semantic_logit_bias(s)
    w = attention_weights(s.q_hat_t, k_ts, s.heads, bias)
    return merge_heads(w @ split_heads(v_ts, s.heads))


@dataclass(frozen=True)
class FusedAttentionOutput:
    z_prime: torch.Tensor
    z_double_prime: torch.Tensor
    text_scale: float


def decoupled_cross_attention(
    z_prime: torch.Tensor,
    text_q: torch.Tensor,
    text_k: torch.Tensor,
    text_v: torch.Tensor,
    text_scale: float = 1.0,
    heads: int = 1,
) -> FusedAttentionOutput:
    """Add the text cross-attention branch onto the image-branch result."""
    if text_scale < 0:
        raise DomainError(f"text_scale must be non-negative, got {text_scale}")
    if z_prime.shape[:-1] != text_q.shape[:-1]:
        raise ShapeError(
            f"z_prime rows {tuple(z_prime.shape[:-1])} != text_q rows {tuple(text_q.shape[:-1])}"
        )
    text = AttentionProjections(text_q, text_k, text_v, heads)
    if text.d_h != z_prime.shape[-1]:
        raise ShapeError("text value width must match z_prime width")
    if text_scale == 0.0:
        return FusedAttentionOutput(z_prime, z_prime, 0.0)
    branch = scaled_dot_attention(text)
    return FusedAttentionOutput(z_prime, z_prime + text_scale * branch, float(text_scale))
