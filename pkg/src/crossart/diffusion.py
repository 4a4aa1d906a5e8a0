"""Noise schedules, forward noising, DDIM steps, DDIM inversion and CFG.

State indices run ``0..T``: index 0 is the clean image and index ``t >= 1``
carries cumulative signal level ``alpha_bar[t - 1]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Any, Callable, Literal, Optional

import numpy as np
import torch

from .errors import DomainError, InvalidConfigError, MissingNoiseError, ShapeError, StepUnderflowError

ScheduleKind = Literal["linear", "cosine"]

DEFAULT_STEPS = 30
DEFAULT_CONDITION_SCALE = 5.0
COSINE_OFFSET = 0.008
MAX_BETA = 0.999


@dataclass(frozen=True)
class NoiseSchedule:
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray
    kind: str = "linear"

    def __post_init__(self):
        ab = self.alpha_bar
        if not (len(self.alpha) == len(ab) == len(self.sigma) >= 1):
            raise DomainError("schedule arrays must share a positive length")
        if np.any(ab <= 0) or np.any(ab > 1) or np.any(np.diff(ab) >= 0):
            raise DomainError("alpha_bar must be strictly decreasing in (0, 1]")
        if np.any(self.sigma < 0):
            raise DomainError("sigma must be non-negative")

    @property
    def T(self) -> int:
        return len(self.alpha_bar)

    @property
    def deterministic(self) -> bool:
        return not np.any(self.sigma > 0)

    def abar(self, t: int) -> float:
        """Cumulative signal level at state index ``t`` (1.0 at ``t == 0``)."""
        if not 0 <= t <= self.T:
            raise DomainError(f"step index {t} outside [0, {self.T}]")
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def noise_level(self, t: int) -> float:
        return math.sqrt(1.0 - self.abar(t))

    def with_sigma(self, sigma) -> "NoiseSchedule":
        return replace(self, sigma=np.broadcast_to(np.asarray(sigma, dtype=np.float64), (self.T,)).copy())


def cosine_alpha_bar(tau) -> np.ndarray:
    """Continuous squared-cosine signal level, 1 at ``tau = 0``."""
    f = lambda s: np.cos((np.asarray(s, dtype=np.float64) + COSINE_OFFSET) / (1 + COSINE_OFFSET) * math.pi / 2) ** 2
    return f(tau) / f(0.0)


def make_schedule(T: int, kind: ScheduleKind = "cosine") -> NoiseSchedule:
    if T < 1:
        raise DomainError(f"T must be at least 1, got {T}")
    if kind == "linear":
        beta = np.linspace(1e-4, 0.02, T)
    elif kind == "cosine":
        ab = cosine_alpha_bar(np.arange(T + 1) / T)
        beta = np.clip(1.0 - ab[1:] / ab[:-1], 0.0, MAX_BETA)
    else:
        raise DomainError(f"unknown schedule kind {kind!r}")
    alpha = 1.0 - beta
    return NoiseSchedule(alpha, np.cumprod(alpha), np.zeros(T), kind)


@dataclass(frozen=True)
class LatentState:
    z: torch.Tensor
    t: int
    seed: int = 0


@dataclass(frozen=True)
class GuidanceConfig:
    condition_scale: float = DEFAULT_CONDITION_SCALE
    semantic_scale: float = 1.0
    text_scale: float = 1.0

    def __post_init__(self):
        if self.condition_scale < 0:
            raise DomainError("condition_scale must be >= 0")
        if not 0 <= self.semantic_scale <= 1:
            raise DomainError("semantic_scale must lie in [0, 1]")
        if self.text_scale < 0:
            raise DomainError("text_scale must be >= 0")


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def forward_noise(x0: torch.Tensor, t: int, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    _same_shape(x0, eps, "forward_noise")
    ab = sched.abar(t)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def predict_x0(z_t: torch.Tensor, eps_pred: torch.Tensor, abar_t: float) -> torch.Tensor:
    return (z_t - math.sqrt(1.0 - abar_t) * eps_pred) / math.sqrt(abar_t)


def ddim_step(
    state: LatentState,
    eps_pred: torch.Tensor,
    sched: NoiseSchedule,
    noise: Optional[torch.Tensor] = None,
) -> LatentState:
    t = state.t
    if t < 1:
        raise StepUnderflowError("cannot step below t = 0")
    _same_shape(state.z, eps_pred, "ddim_step")
    sigma_t = float(sched.sigma[t - 1])
    if sigma_t > 0 and noise is None:
        raise MissingNoiseError(f"sigma[{t}] = {sigma_t} > 0 requires a noise tensor")
    ab_t, ab_prev = sched.abar(t), sched.abar(t - 1)
    direction = 1.0 - ab_prev - sigma_t**2
    if direction < 0:
        raise DomainError(f"sigma[{t}] = {sigma_t} exceeds sqrt(1 - alpha_bar[t-1])")
    x0 = predict_x0(state.z, eps_pred, ab_t)
    z = math.sqrt(ab_prev) * x0 + math.sqrt(direction) * eps_pred
    if sigma_t > 0:
        _same_shape(state.z, noise, "ddim_step noise")
        z = z + sigma_t * noise
    return LatentState(z, t - 1, state.seed)


EpsFn = Callable[[LatentState, Any], torch.Tensor]


def _invert_update(z_prev: torch.Tensor, eps: torch.Tensor, ab_prev: float, ab_t: float) -> torch.Tensor:
    x0 = predict_x0(z_prev, eps, ab_prev)
    return math.sqrt(ab_t) * x0 + math.sqrt(1.0 - ab_t) * eps


def ddim_invert(
    x0: torch.Tensor,
    eps_fn: EpsFn,
    cond: Any,
    sched: NoiseSchedule,
    fixed_point_iters: int = 3,
    seed: int = 0,
) -> list[LatentState]:
    """Map a clean image to ``z_T``; returns the trajectory ``z_0 .. z_T``.

    Each step solves ``z_t = update(z_{t-1}, eps(z_t, t))``. The first guess
    evaluates eps at the current latent; every fixed-point iteration
    re-evaluates it at the latest guess for ``z_t``.
    """
    if not sched.deterministic:
        raise InvalidConfigError("DDIM inversion needs a deterministic schedule (sigma == 0)")
    if fixed_point_iters < 0:
        raise DomainError("fixed_point_iters must be >= 0")
    traj = [LatentState(x0, 0, seed)]
    for t in range(1, sched.T + 1):
        z_prev = traj[-1].z
        ab_prev, ab_t = sched.abar(t - 1), sched.abar(t)
        z = _invert_update(z_prev, eps_fn(LatentState(z_prev, t, seed), cond), ab_prev, ab_t)
        for _ in range(fixed_point_iters):
            z = _invert_update(z_prev, eps_fn(LatentState(z, t, seed), cond), ab_prev, ab_t)
        traj.append(LatentState(z, t, seed))
    return traj


def inversion_callback(state: LatentState, t: int, z_T_precomputed: torch.Tensor, T: int) -> LatentState:
    """Swap in the precomputed inversion latent at ``t == T``; identity otherwise."""
    if not 0 <= t <= T:
        raise DomainError(f"t = {t} outside [0, {T}]")
    if t == T:
        return LatentState(z_T_precomputed, state.t, state.seed)
    return state


Callback = Callable[[LatentState, int], LatentState]


def ddim_sample(
    z_T: torch.Tensor,
    eps_fn: EpsFn,
    cond: Any,
    sched: NoiseSchedule,
    *,
    callback: Optional[Callback] = None,
    noise_fn: Optional[Callable[[int], torch.Tensor]] = None,
    seed: int = 0,
) -> list[LatentState]:
    """Run ``T`` reverse steps; returns states ordered ``t = T .. 0``.

    ``callback(state, t)`` is applied to every state before its noise
    prediction, and the recorded trajectory holds the post-callback states.
    """
    state = LatentState(z_T, sched.T, seed)
    traj = []
    for t in range(sched.T, 0, -1):
        if callback is not None:
            state = callback(state, t)
        traj.append(state)
        noise = noise_fn(t) if noise_fn is not None and sched.sigma[t - 1] > 0 else None
        state = ddim_step(state, eps_fn(state, cond), sched, noise)
    if callback is not None:
        state = callback(state, 0)
    traj.append(state)
    return traj


def cfg_combine(eps_uncond: torch.Tensor, eps_cond: torch.Tensor, condition_scale: float) -> torch.Tensor:
    _same_shape(eps_uncond, eps_cond, "cfg_combine")
    return eps_uncond + condition_scale * (eps_cond - eps_uncond)
