"""Plain-SGD epsilon-prediction training for the toy denoiser."""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .denoiser import CrossArtContext, DenoiserState, TinyUNet
from .diffusion import GuidanceConfig, cosine_alpha_bar
from .encoders import embed_prompt
from .errors import DivergenceError, ShapeError

log = logging.getLogger(__name__)

# training wiring: vanilla (un-normalized) attention plus the text branch
TRAIN_CONTEXT = CrossArtContext(guidance=GuidanceConfig(semantic_scale=1.0, text_scale=1.0), normalize=False)

DEFAULT_LR = 0.05
DEFAULT_BATCH = 4
PROMPT_DROPOUT = 0.2


def to_model_range(x: torch.Tensor) -> torch.Tensor:
    return x * 2.0 - 1.0


def epsilon_loss(
    net: TinyUNet,
    x0: torch.Tensor,
    tau: torch.Tensor,
    eps: torch.Tensor,
    text: torch.Tensor,
) -> torch.Tensor:
    """Mean squared error of the noise prediction at continuous times ``tau``."""
    abar = torch.as_tensor(cosine_alpha_bar(tau.detach().cpu().numpy()), dtype=x0.dtype)
    a = abar.sqrt()[:, None, None, None]
    s = (1.0 - abar).clamp_min(0).sqrt()
    z = a * x0 + s[:, None, None, None] * eps
    pred = net(z, s, text, TRAIN_CONTEXT)
    return ((pred - eps) ** 2).mean()


def _dataset_tensor(dataset: Sequence) -> torch.Tensor:
    if len(dataset) == 0:
        raise ValueError("dataset must be non-empty")
    shapes = {tuple(img.shape[-3:]) for img in dataset}
    if len(shapes) != 1:
        raise ShapeError(f"dataset images differ in shape: {sorted(shapes)}")
    return torch.cat([img.reshape(1, *img.shape[-3:]) for img in dataset]).to(torch.float32)


def _prompt_table(dataset: Sequence, dtype) -> tuple[torch.Tensor, np.ndarray]:
    """Stacked prompt embeddings (row 0 is the empty prompt) and per-image row ids."""
    prompts = dataset.prompts() if hasattr(dataset, "prompts") else [""] * len(dataset)
    names = [""] + sorted(set(prompts) - {""})
    table = torch.stack([embed_prompt(p).embedding for p in names]).to(dtype)
    ids = np.array([names.index(p) for p in prompts])
    return table, ids


def sample_batch(
    gen: torch.Generator,
    images: torch.Tensor,
    prompt_ids: np.ndarray,
    prompt_table: torch.Tensor,
    batch_size: int,
):
    idx = torch.randint(len(images), (batch_size,), generator=gen)
    x0 = to_model_range(images[idx])
    tau = torch.rand(batch_size, generator=gen, dtype=torch.float64)
    eps = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
    drop = torch.rand(batch_size, generator=gen) < PROMPT_DROPOUT
    rows = torch.as_tensor(prompt_ids)[idx].masked_fill(drop, 0)
    return x0, tau, eps, prompt_table[rows]


def train_toy(
    state: DenoiserState,
    dataset: Sequence,
    steps: int,
    lr: float = DEFAULT_LR,
    seed: int = 0,
    *,
    batch_size: int = DEFAULT_BATCH,
    log_every: Optional[int] = None,
) -> DenoiserState:
    """Minimize the epsilon-prediction MSE with plain SGD.

    The returned state's ``loss_history`` extends the input's with one
    entry per step. Raises :class:`DivergenceError` on a non-finite loss.
    """
    if steps == 0:
        return state
    images = _dataset_tensor(dataset)
    prompt_table, prompt_ids = _prompt_table(dataset, torch.float32)

    net = TinyUNet(state.config)
    nn.utils.vector_to_parameters(state.parameters.clone(), net.parameters())
    net.train()
    opt = torch.optim.SGD(net.parameters(), lr=lr, momentum=0.0)
    gen = torch.Generator().manual_seed(seed)

    history = list(state.loss_history)
    for step in range(steps):
        x0, tau, eps, text = sample_batch(gen, images, prompt_ids, prompt_table, batch_size)
        loss = epsilon_loss(net, x0, tau, eps, text)
        value = loss.item()
        if not math.isfinite(value):
            raise DivergenceError(step, value)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        history.append(value)
        if log_every and (step + 1) % log_every == 0:
            log.info("step %d loss %.4f", step + 1, float(np.mean(history[-log_every:])))

    flat = nn.utils.parameters_to_vector(net.parameters()).detach().to(torch.float32)
    return DenoiserState(state.config, flat, state.seed, tuple(history))


def loss_at(
    state: DenoiserState, params: torch.Tensor, batch, dtype: torch.dtype = torch.float64
) -> torch.Tensor:
    """Training loss on a fixed batch with ``params`` substituted (for gradient checks)."""
    x0, tau, eps, text = batch
    net = TinyUNet(state.config).to(dtype)
    nn.utils.vector_to_parameters(params.to(dtype), net.parameters())
    return epsilon_loss(net, x0.to(dtype), tau, eps.to(dtype), text.to(dtype))


def analytic_gradient(state: DenoiserState, batch, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    x0, tau, eps, text = batch
    net = TinyUNet(state.config).to(dtype)
    nn.utils.vector_to_parameters(state.parameters.to(dtype), net.parameters())
    loss = epsilon_loss(net, x0.to(dtype), tau, eps.to(dtype), text.to(dtype))
    grads = torch.autograd.grad(loss, list(net.parameters()))
    return torch.cat([g.reshape(-1) for g in grads])
