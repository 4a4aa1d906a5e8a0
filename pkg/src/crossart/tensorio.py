"""Little-endian flat binary formats for checkpoints and tensor dumps.

Checkpoint::

    8 bytes   magic  b"XARTCKPT"
    uint32    layout version
    uint32    L, byte length of the config echo
    L bytes   config echo, UTF-8 "key=value" lines
    uint64    parameter count P
    P * f32   parameters, in ``parameter_layout(config)`` order

Tensor dump::

    8 bytes   magic  b"XARTTNSR"
    uint32    layout version
    uint32    ndim
    ndim * uint64  dims
    prod(dims) * f32  data, row-major
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np
import torch

from .denoiser import DenoiserConfig, DenoiserState
from .errors import VersionError

CHECKPOINT_MAGIC = b"XARTCKPT"
TENSOR_MAGIC = b"XARTTNSR"
LAYOUT_VERSION = 1


def _atomic_write(path: Path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def _config_echo(cfg: DenoiserConfig, seed: int) -> str:
    ints = lambda xs: ",".join(str(x) for x in xs)
    lines = [
        f"base_channels={cfg.base_channels}",
        f"depth={cfg.depth}",
        f"channel_mult={ints(cfg.channel_mult)}",
        f"attn_levels={ints(cfg.attn_levels)}",
        f"mid_attention={int(cfg.mid_attention)}",
        f"heads={cfg.heads}",
        f"time_embed_dim={cfg.time_embed_dim}",
        f"text_width={cfg.text_width}",
        f"in_channels={cfg.in_channels}",
        f"seed={seed}",
    ]
    return "\n".join(lines) + "\n"


def _parse_config_echo(text: str) -> tuple[DenoiserConfig, int]:
    kv = dict(line.split("=", 1) for line in text.splitlines() if line)
    tup = lambda s: tuple(int(x) for x in s.split(",") if x)
    cfg = DenoiserConfig(
        base_channels=int(kv["base_channels"]),
        depth=int(kv["depth"]),
        channel_mult=tup(kv["channel_mult"]),
        attn_levels=tup(kv["attn_levels"]),
        mid_attention=bool(int(kv["mid_attention"])),
        heads=int(kv["heads"]),
        time_embed_dim=int(kv["time_embed_dim"]),
        text_width=int(kv["text_width"]),
        in_channels=int(kv["in_channels"]),
    )
    return cfg, int(kv["seed"])


def save_checkpoint(state: DenoiserState, path) -> None:
    echo = _config_echo(state.config, state.seed).encode("utf-8")
    params = state.parameters.detach().cpu().numpy().astype("<f4")
    header = CHECKPOINT_MAGIC + struct.pack("<II", LAYOUT_VERSION, len(echo)) + echo
    _atomic_write(path, header + struct.pack("<Q", params.size) + params.tobytes())


def load_checkpoint(path) -> DenoiserState:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise VersionError(f"{path}: not a checkpoint (bad magic)")
    version, n_echo = struct.unpack_from("<II", raw, 8)
    if version != LAYOUT_VERSION:
        raise VersionError(f"{path}: layout version {version}, expected {LAYOUT_VERSION}")
    off = 16 + n_echo
    cfg, seed = _parse_config_echo(raw[16:off].decode("utf-8"))
    (count,) = struct.unpack_from("<Q", raw, off)
    params = np.frombuffer(raw, dtype="<f4", count=count, offset=off + 8)
    return DenoiserState(cfg, torch.from_numpy(params.astype(np.float32)), seed)


def save_tensor(x: torch.Tensor, path) -> None:
    arr = x.detach().cpu().numpy().astype("<f4")
    header = TENSOR_MAGIC + struct.pack("<II", LAYOUT_VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    _atomic_write(path, header + arr.tobytes())


def load_tensor(path) -> torch.Tensor:
    raw = Path(path).read_bytes()
    if raw[:8] != TENSOR_MAGIC:
        raise VersionError(f"{path}: not a tensor dump (bad magic)")
    version, ndim = struct.unpack_from("<II", raw, 8)
    if version != LAYOUT_VERSION:
        raise VersionError(f"{path}: layout version {version}, expected {LAYOUT_VERSION}")
    dims = struct.unpack_from(f"<{ndim}Q", raw, 16)
    data = np.frombuffer(raw, dtype="<f4", offset=16 + 8 * ndim, count=int(np.prod(dims)))
    return torch.from_numpy(data.reshape(dims).astype(np.float32))
