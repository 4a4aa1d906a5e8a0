"""Tiny epsilon-predicting U-Net with cross-art-attention blocks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import (
    ArtBNDirection,
    AttentionProjections,
    build_style_aligned,
    decoupled_cross_attention,
    scaled_dot_attention,
    shared_attention,
)
from .diffusion import GuidanceConfig, NoiseSchedule
from .encoders import TEXT_WIDTH, ImageEmbedding, TextEmbedding, embed_prompt
from .errors import ContextError, ShapeError


@dataclass(frozen=True)
class DenoiserConfig:
    base_channels: int = 32
    depth: int = 2
    # channel multiplier per level, clamped to the last entry beyond its length
    channel_mult: tuple[int, ...] = (1, 2, 2)
    # downsampling levels (not pixel sizes) carrying an attention block on
    # both the encoder and decoder side
    attn_levels: tuple[int, ...] = (2,)
    mid_attention: bool = True
    heads: int = 4
    time_embed_dim: int = 64
    text_width: int = TEXT_WIDTH
    in_channels: int = 3

    def __post_init__(self):
        if self.depth < 1 or self.base_channels < 8 or self.base_channels % 8:
            raise ValueError("need depth >= 1 and base_channels a positive multiple of 8")
        if any(not 0 <= lvl <= self.depth for lvl in self.attn_levels):
            raise ValueError(f"attn_levels must lie in [0, {self.depth}]")
        object.__setattr__(self, "attn_levels", tuple(sorted(set(self.attn_levels))))

    def channels(self, level: int) -> int:
        return self.base_channels * self.channel_mult[min(level, len(self.channel_mult) - 1)]

    @property
    def attention_layers(self) -> int:
        return 2 * len(self.attn_levels) + int(self.mid_attention)

    def check_resolution(self, h: int, w: int) -> None:
        f = 2**self.depth
        if h % f or w % f:
            raise ShapeError(f"resolution {h}x{w} not divisible by 2**depth = {f}")


@dataclass(frozen=True)
class SemanticCache:
    """Per-layer Q/K/V of the semantic stream, in attention-layer order."""

    layers: tuple[AttentionProjections, ...]
    resolution: tuple[int, int]


@dataclass(frozen=True)
class CrossArtContext:
    text_embedding: Optional[TextEmbedding] = None  # None means the empty prompt
    semantic_features: Optional[SemanticCache] = None
    image_embedding: Optional[ImageEmbedding] = None
    guidance: GuidanceConfig = GuidanceConfig()
    normalize: bool = True
    direction: ArtBNDirection = "equation"
    # attention layers that see the semantic stream; None means all of them
    shared_layers: Optional[frozenset[int]] = None
    # diagnostic: vanilla self-attention only, no ArtBN and no text branch
    plain_attention: bool = False

    def text(self) -> TextEmbedding:
        return self.text_embedding if self.text_embedding is not None else _empty_prompt()


_EMPTY: dict[str, TextEmbedding] = {}


def _empty_prompt() -> TextEmbedding:
    if "" not in _EMPTY:
        _EMPTY[""] = embed_prompt("")
    return _EMPTY[""]


def timestep_embedding(level: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of the noise level ``sqrt(1 - alpha_bar)`` in [0, 1]."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=level.dtype) / half)
    args = 1000.0 * level[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, t_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.temb = nn.Linear(t_dim, c_out)
        self.norm2 = nn.GroupNorm(8, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class CrossArtAttentionBlock(nn.Module):
    """Self-attention replaced by shared attention, followed by the text branch."""

    def __init__(self, channels: int, heads: int, text_width: int, index: int):
        super().__init__()
        self.index = index
        self.heads = heads
        self.norm = nn.GroupNorm(8, channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(channels, channels, bias=False)
        self.to_v = nn.Linear(channels, channels, bias=False)
        self.text_q = nn.Linear(channels, channels, bias=False)
        self.text_k = nn.Linear(text_width, channels, bias=False)
        self.text_v = nn.Linear(text_width, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)

    def forward(self, h, text, ctx: CrossArtContext, record: Optional[list] = None):
        b, c, hh, ww = h.shape
        x = self.norm(h).reshape(b, c, hh * ww).transpose(1, 2)
        target = AttentionProjections(self.to_q(x), self.to_k(x), self.to_v(x), self.heads)
        if record is not None:
            record.append(target)

        if ctx.plain_attention:
            z = scaled_dot_attention(target)
        else:
            semantic = None
            cache = ctx.semantic_features
            if cache is not None and (ctx.shared_layers is None or self.index in ctx.shared_layers):
                semantic = cache.layers[self.index]
            g = ctx.guidance
            s = build_style_aligned(
                target, semantic, g.semantic_scale, normalize=ctx.normalize, direction=ctx.direction
            )
            fused = decoupled_cross_attention(
                shared_attention(s), self.text_q(x), self.text_k(text), self.text_v(text), g.text_scale, self.heads
            )
            z = fused.z_double_prime
        out = self.to_out(z).transpose(1, 2).reshape(b, c, hh, ww)
        return h + out


class TinyUNet(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        td = cfg.time_embed_dim
        self.time_mlp = nn.Sequential(nn.Linear(td, td), nn.SiLU(), nn.Linear(td, td))
        self.conv_in = nn.Conv2d(cfg.in_channels, cfg.base_channels, 3, padding=1)

        n_attn = 0
        self.enc = nn.ModuleList()
        self.enc_attn = nn.ModuleDict()
        self.down = nn.ModuleList()
        for lvl in range(cfg.depth + 1):
            c_prev = cfg.channels(max(lvl - 1, 0))
            self.enc.append(ResBlock(c_prev, cfg.channels(lvl), td))
            if lvl in cfg.attn_levels:
                self.enc_attn[str(lvl)] = CrossArtAttentionBlock(cfg.channels(lvl), cfg.heads, cfg.text_width, n_attn)
                n_attn += 1
            if lvl < cfg.depth:
                self.down.append(nn.Conv2d(cfg.channels(lvl), cfg.channels(lvl), 3, stride=2, padding=1))

        self.mid = ResBlock(cfg.channels(cfg.depth), cfg.channels(cfg.depth), td)
        self.mid_attn = None
        if cfg.mid_attention:
            self.mid_attn = CrossArtAttentionBlock(cfg.channels(cfg.depth), cfg.heads, cfg.text_width, n_attn)
            n_attn += 1

        self.dec = nn.ModuleList()
        self.dec_attn = nn.ModuleDict()
        self.up = nn.ModuleList()
        for lvl in range(cfg.depth, -1, -1):
            c = cfg.channels(lvl)
            self.dec.append(ResBlock(2 * c, c, td))
            if lvl in cfg.attn_levels:
                self.dec_attn[str(lvl)] = CrossArtAttentionBlock(c, cfg.heads, cfg.text_width, n_attn)
                n_attn += 1
            if lvl > 0:
                self.up.append(nn.Conv2d(c, cfg.channels(lvl - 1), 3, padding=1))

        self.norm_out = nn.GroupNorm(8, cfg.base_channels)
        self.conv_out = nn.Conv2d(cfg.base_channels, cfg.in_channels, 3, padding=1)

    def forward(self, z, noise_level, text, ctx: CrossArtContext, record: Optional[list] = None):
        """``z``: [B, C, H, W]; ``noise_level``: [B]; ``text``: [B, n, d_text]."""
        cfg = self.cfg
        temb = self.time_mlp(timestep_embedding(noise_level, cfg.time_embed_dim))
        h = self.conv_in(z)
        skips = []
        for lvl in range(cfg.depth + 1):
            h = self.enc[lvl](h, temb)
            if str(lvl) in self.enc_attn:
                h = self.enc_attn[str(lvl)](h, text, ctx, record)
            skips.append(h)
            if lvl < cfg.depth:
                h = self.down[lvl](h)
        h = self.mid(h, temb)
        if self.mid_attn is not None:
            h = self.mid_attn(h, text, ctx, record)
        for i, lvl in enumerate(range(cfg.depth, -1, -1)):
            h = self.dec[i](torch.cat([h, skips[lvl]], dim=1), temb)
            if str(lvl) in self.dec_attn:
                h = self.dec_attn[str(lvl)](h, text, ctx, record)
            if lvl > 0:
                h = self.up[i](F.interpolate(h, scale_factor=2.0, mode="nearest"))
        return self.conv_out(F.silu(self.norm_out(h)))


def parameter_layout(cfg: DenoiserConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Names and shapes, in flat-vector order, of the network's parameters."""
    return [(name, tuple(p.shape)) for name, p in TinyUNet(cfg).named_parameters()]


def param_count(cfg: DenoiserConfig) -> int:
    return sum(math.prod(shape) for _, shape in parameter_layout(cfg))


@dataclass(frozen=True, eq=False)
class DenoiserState:
    config: DenoiserConfig
    parameters: torch.Tensor  # flat float32, ordered as parameter_layout(config)
    seed: int = 0
    loss_history: tuple[float, ...] = ()
    _nets: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.parameters.ndim != 1 or self.parameters.numel() != param_count(self.config):
            raise ShapeError("parameter vector does not match the config's layout")
        if not torch.isfinite(self.parameters).all():
            raise ValueError("parameters must be finite")

    @classmethod
    def initialize(cls, config: DenoiserConfig = DenoiserConfig(), seed: int = 0) -> "DenoiserState":
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        try:
            net = TinyUNet(config)
        finally:
            torch.random.set_rng_state(gen_state)
        flat = nn.utils.parameters_to_vector(net.parameters()).detach().to(torch.float32)
        return cls(config, flat, seed)

    @property
    def param_count(self) -> int:
        return self.parameters.numel()

    def network(self, dtype: torch.dtype = torch.float32) -> TinyUNet:
        """A frozen network carrying these parameters (cached per dtype)."""
        if dtype not in self._nets:
            net = TinyUNet(self.config).to(dtype)
            nn.utils.vector_to_parameters(self.parameters.to(dtype), net.parameters())
            net.requires_grad_(False)
            net.eval()
            self._nets[dtype] = net
        return self._nets[dtype]


def _batched_text(ctx: CrossArtContext, batch: int, dtype) -> torch.Tensor:
    return ctx.text().embedding.to(dtype)[None].expand(batch, -1, -1)


def _check_cache(state: DenoiserState, z: torch.Tensor, ctx: CrossArtContext) -> None:
    cache = ctx.semantic_features
    if cache is None:
        return
    if len(cache.layers) != state.config.attention_layers:
        raise ContextError(
            f"semantic cache has {len(cache.layers)} layers, denoiser has {state.config.attention_layers}"
        )
    if cache.resolution != tuple(z.shape[-2:]):
        raise ContextError(f"semantic cache recorded at {cache.resolution}, target is {tuple(z.shape[-2:])}")


def denoise(
    state: DenoiserState, z_t: torch.Tensor, t: int, ctx: CrossArtContext, sched: NoiseSchedule
) -> torch.Tensor:
    """Predict the noise in ``z_t`` at state index ``t`` of ``sched``."""
    state.config.check_resolution(*z_t.shape[-2:])
    _check_cache(state, z_t, ctx)
    net = state.network(z_t.dtype)
    level = torch.full((z_t.shape[0],), sched.noise_level(t), dtype=z_t.dtype)
    with torch.no_grad():
        return net(z_t, level, _batched_text(ctx, z_t.shape[0], z_t.dtype), ctx)


def record_semantic_pass(
    state: DenoiserState,
    semantic_z_t: torch.Tensor,
    t: int,
    ctx_minimal: CrossArtContext,
    sched: NoiseSchedule,
    expected_resolution: Optional[tuple[int, int]] = None,
) -> SemanticCache:
    """Run the semantic stream and capture raw Q/K/V at every attention layer."""
    res = tuple(semantic_z_t.shape[-2:])
    if expected_resolution is not None and tuple(expected_resolution) != res:
        raise ContextError(f"semantic stream is {res}, target pass expects {tuple(expected_resolution)}")
    state.config.check_resolution(*res)
    ctx_minimal = CrossArtContext(
        text_embedding=ctx_minimal.text_embedding,
        guidance=ctx_minimal.guidance,
        normalize=ctx_minimal.normalize,
        direction=ctx_minimal.direction,
        plain_attention=ctx_minimal.plain_attention,
    )
    net = state.network(semantic_z_t.dtype)
    level = torch.full((semantic_z_t.shape[0],), sched.noise_level(t), dtype=semantic_z_t.dtype)
    record: list[AttentionProjections] = []
    with torch.no_grad():
        net(semantic_z_t, level, _batched_text(ctx_minimal, semantic_z_t.shape[0], semantic_z_t.dtype), ctx_minimal, record)
    return SemanticCache(tuple(record), res)
