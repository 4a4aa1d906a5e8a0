"""End-to-end generation: invert the target, then denoise with cross-art-attention.

Modes and the inputs they use:

==================  ==================================
variation           target
editing             target + prompt
style_transfer      target + semantic image
fusion              target + semantic image
multimodal_blend    target + semantic image + prompt
==================  ==================================

``style_transfer`` and ``fusion`` share their mechanics; what differs is
which picture the caller designates as target (inverted, sets style and
composition) and which as semantic (content donor).
"""

from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import torch

from .denoiser import CrossArtContext, DenoiserState, SemanticCache, denoise, record_semantic_pass
from .diffusion import (
    DEFAULT_STEPS,
    GuidanceConfig,
    LatentState,
    NoiseSchedule,
    cfg_combine,
    ddim_invert,
    ddim_sample,
    forward_noise,
    inversion_callback,
    make_schedule,
)
from .encoders import encode_image, embed_prompt
from .errors import InvalidConfigError
from .imageio import load_image, save_image
from .tensorio import load_checkpoint

log = logging.getLogger(__name__)

MODES = ("variation", "editing", "style_transfer", "fusion", "multimodal_blend")
NEEDS_SEMANTIC = {"style_transfer", "fusion", "multimodal_blend"}
NEEDS_PROMPT = {"editing", "multimodal_blend"}

OUTPUT_ROOT_ENV = "CROSSART_OUTPUT_ROOT"
RECORD_NAME = "run_record.txt"

# offsets that decorrelate the per-run random streams derived from one seed
_SEMANTIC_NOISE_STREAM = 1
_PRIOR_NOISE_STREAM = 2


@dataclass(frozen=True)
class PipelineConfig:
    mode: str
    target_image_path: Optional[Path] = None
    checkpoint_path: Optional[Path] = None
    output_dir: Path = Path("outputs")
    semantic_image_path: Optional[Path] = None
    prompt: Optional[str] = None
    steps: int = DEFAULT_STEPS
    guidance: GuidanceConfig = GuidanceConfig()
    resolution: int = 64
    seed: int = 0
    schedule: str = "linear"
    fixed_point_iters: int = 3
    # which input is inverted to z_T; "semantic" swaps the two image roles
    inversion_source: str = "target"
    normalize: bool = True
    direction: str = "equation"
    encoder_seed: int = 0

    def validate(self) -> None:
        """Check mode requirements; runs before any compute."""
        if self.mode not in MODES:
            raise InvalidConfigError(f"unknown mode {self.mode!r}; choose from {', '.join(MODES)}")
        if self.mode in NEEDS_SEMANTIC and self.semantic_image_path is None:
            raise InvalidConfigError(f"mode {self.mode} requires a semantic image")
        if self.mode in NEEDS_PROMPT and not self.prompt:
            raise InvalidConfigError(f"mode {self.mode} requires a prompt")
        if self.steps < 1:
            raise InvalidConfigError("steps must be >= 1")
        if self.inversion_source not in ("target", "semantic"):
            raise InvalidConfigError("inversion_source must be 'target' or 'semantic'")
        if self.inversion_source == "semantic" and self.mode not in NEEDS_SEMANTIC:
            raise InvalidConfigError("inversion_source=semantic needs a mode with a semantic image")


@dataclass
class SynthesisResult:
    image: torch.Tensor
    z_T: torch.Tensor
    latent_norms: list[float]
    inversion: list[LatentState] = field(repr=False, default_factory=list)
    sampling: list[LatentState] = field(repr=False, default_factory=list)


def _seeded_normal(seed: int, shape, dtype=torch.float32) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(shape, generator=gen, dtype=dtype)


class _Conditioner:
    """Noise predictor for one run: semantic recording plus classifier-free guidance."""

    def __init__(
        self,
        state: DenoiserState,
        sched: NoiseSchedule,
        base: CrossArtContext,
        prompt: Optional[str],
        semantic_x0: Optional[torch.Tensor],
        condition_scale: float,
        seed: int,
        encoder_seed: int,
    ):
        self.state, self.sched, self.base = state, sched, base
        self.cond_text = embed_prompt(prompt, encoder_seed) if prompt else None
        self.condition_scale = condition_scale
        self.semantic_x0 = semantic_x0
        if semantic_x0 is not None:
            self.semantic_eps = _seeded_normal(seed + _SEMANTIC_NOISE_STREAM, semantic_x0.shape, semantic_x0.dtype)

    def semantic_cache(self, t: int, resolution) -> Optional[SemanticCache]:
        if self.semantic_x0 is None:
            return None
        z_s = forward_noise(self.semantic_x0, t, self.semantic_eps, self.sched)
        return record_semantic_pass(self.state, z_s, t, self.base, self.sched, resolution)

    def __call__(self, st: LatentState, _cond=None) -> torch.Tensor:
        cache = self.semantic_cache(st.t, tuple(st.z.shape[-2:]))
        ctx = replace(self.base, semantic_features=cache)
        eps_u = denoise(self.state, st.z, st.t, ctx, self.sched)
        if self.cond_text is None:
            return eps_u
        eps_c = denoise(self.state, st.z, st.t, replace(ctx, text_embedding=self.cond_text), self.sched)
        return cfg_combine(eps_u, eps_c, self.condition_scale)


def synthesize(
    state: DenoiserState,
    target: torch.Tensor,
    cfg: PipelineConfig,
    semantic: Optional[torch.Tensor] = None,
    z_T: Optional[torch.Tensor] = None,
) -> SynthesisResult:
    """Core of :func:`run_pipeline` on in-memory ``(1, 3, R, R)`` tensors in [-1, 1].

    Pass ``z_T`` to reuse a previous inversion of the same target.
    """
    sched = make_schedule(cfg.steps, cfg.schedule)
    use_semantic = cfg.mode in NEEDS_SEMANTIC
    if use_semantic and semantic is None:
        raise InvalidConfigError(f"mode {cfg.mode} requires a semantic image")
    if use_semantic and cfg.inversion_source == "semantic":
        target, semantic = semantic, target
    prompt = cfg.prompt if cfg.mode in NEEDS_PROMPT else None

    base = CrossArtContext(
        guidance=cfg.guidance,
        normalize=cfg.normalize,
        direction=cfg.direction,
        image_embedding=encode_image(semantic, seed=cfg.encoder_seed) if use_semantic else None,
    )
    inversion_ctx = replace(base, image_embedding=None)
    inversion_eps = _Conditioner(state, sched, inversion_ctx, None, None, 1.0, cfg.seed, cfg.encoder_seed)

    inv_traj: list[LatentState] = []
    if z_T is None:
        inv_traj = ddim_invert(target, inversion_eps, None, sched, cfg.fixed_point_iters, cfg.seed)
        z_T = inv_traj[-1].z

    eps_fn = _Conditioner(
        state,
        sched,
        base,
        prompt,
        semantic if use_semantic else None,
        cfg.guidance.condition_scale,
        cfg.seed,
        cfg.encoder_seed,
    )
    prior = _seeded_normal(cfg.seed + _PRIOR_NOISE_STREAM, target.shape, target.dtype)
    T = sched.T
    traj = ddim_sample(
        prior,
        eps_fn,
        None,
        sched,
        callback=lambda st, t: inversion_callback(st, t, z_T, T),
        seed=cfg.seed,
    )
    norms = [float(torch.linalg.vector_norm(s.z.to(torch.float64))) for s in traj]
    return SynthesisResult(traj[-1].z, z_T, norms, inv_traj, traj)


# RunRecord


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


def config_items(cfg: PipelineConfig) -> list[tuple[str, str]]:
    items = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, GuidanceConfig):
            items += [(k.name, _fmt(getattr(v, k.name))) for k in fields(v)]
        else:
            items.append((f.name, _fmt(v)))
    return items


def _parse_bool(s: str) -> bool:
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise InvalidConfigError(f"not a boolean: {s!r}")


_CASTS = {
    "steps": int,
    "resolution": int,
    "seed": int,
    "fixed_point_iters": int,
    "encoder_seed": int,
    "condition_scale": float,
    "semantic_scale": float,
    "text_scale": float,
    "normalize": _parse_bool,
    "target_image_path": Path,
    "semantic_image_path": Path,
    "checkpoint_path": Path,
    "output_dir": Path,
}
_GUIDANCE_KEYS = {f.name for f in fields(GuidanceConfig)}
CONFIG_KEYS = {f.name for f in fields(PipelineConfig)} - {"guidance"} | _GUIDANCE_KEYS


def config_from_mapping(kv: dict[str, str]) -> PipelineConfig:
    """Build a config from string key/values; unknown keys are rejected, empty values mean unset."""
    unknown = set(kv) - CONFIG_KEYS
    if unknown:
        raise InvalidConfigError(f"unknown config keys: {sorted(unknown)}")
    if "mode" not in kv:
        raise InvalidConfigError("config needs a mode")
    guidance, rest = {}, {}
    for k, v in kv.items():
        if v == "" or v is None:
            continue
        try:
            val = _CASTS.get(k, str)(v) if isinstance(v, str) else v
        except ValueError as exc:
            raise InvalidConfigError(f"bad value for {k}: {v!r}") from exc
        (guidance if k in _GUIDANCE_KEYS else rest)[k] = val
    return PipelineConfig(guidance=GuidanceConfig(**guidance), **rest)


def read_key_values(path) -> dict[str, str]:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    kv = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise InvalidConfigError(f"{path}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        kv[k.strip()] = v.strip()
    return kv


@dataclass
class RunRecord:
    config: PipelineConfig
    latent_norms: list[float]
    outputs: list[Path]
    wall_clock_ms: int
    schedule: str

    def lines(self) -> list[str]:
        out = [f"{k}={v}" for k, v in config_items(self.config)]
        out.append(f"schedule_kind={self.schedule}")
        out += [f"output_image={p}" for p in self.outputs]
        out += [f"latent_norm[{len(self.latent_norms) - 1 - i}]={n!r}" for i, n in enumerate(self.latent_norms)]
        out.append(f"wall_clock_ms={self.wall_clock_ms}")
        return out

    def write(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text("\n".join(self.lines()) + "\n", encoding="utf-8")
        os.replace(tmp, path)


def read_run_record(path) -> RunRecord:
    kv: dict[str, str] = {}
    outputs, norms = [], {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        k, v = line.split("=", 1)
        if k == "output_image":
            outputs.append(Path(v))
        elif k.startswith("latent_norm["):
            norms[int(k[len("latent_norm[") : -1])] = float(v)
        else:
            kv[k] = v
    schedule_kind = kv.pop("schedule_kind")
    wall = int(kv.pop("wall_clock_ms"))
    cfg = config_from_mapping(kv)
    return RunRecord(cfg, [norms[t] for t in sorted(norms, reverse=True)], outputs, wall, schedule_kind)


def resolve_output_dir(path: Path) -> Path:
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not Path(path).is_absolute():
        return Path(root) / path
    return Path(path)


def run_pipeline(cfg: PipelineConfig, state: Optional[DenoiserState] = None) -> RunRecord:
    """Load inputs, synthesize, and write ``<mode>.png`` plus the run record."""
    cfg.validate()
    if cfg.target_image_path is None:
        raise InvalidConfigError("target_image_path is required")
    if state is None:
        if cfg.checkpoint_path is None:
            raise InvalidConfigError("checkpoint_path is required")
        state = load_checkpoint(cfg.checkpoint_path)
    start = time.perf_counter()
    target = load_image(cfg.target_image_path, cfg.resolution)
    semantic = None
    if cfg.mode in NEEDS_SEMANTIC:
        semantic = load_image(cfg.semantic_image_path, cfg.resolution)

    result = synthesize(state, target, cfg, semantic)

    out_dir = resolve_output_dir(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    image_path = out_dir / f"{cfg.mode}.png"
    save_image(result.image, image_path)
    elapsed = int(round((time.perf_counter() - start) * 1000))
    record = RunRecord(cfg, result.latent_norms, [image_path], elapsed, cfg.schedule)
    record.write(out_dir / RECORD_NAME)
    log.info("%s: wrote %s in %d ms", cfg.mode, image_path, elapsed)
    return record
