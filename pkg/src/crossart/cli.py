"""Command line entry point: ``crossart {generate,train,make-dataset,invert}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import data, pipeline, tensorio
from .denoiser import DenoiserConfig, DenoiserState
from .errors import CrossArtError
from .imageio import ImageIOError, load_image, save_image
from .training import DEFAULT_BATCH, DEFAULT_LR, train_toy

log = logging.getLogger("crossart")


def _add_pipeline_flags(p: argparse.ArgumentParser, with_mode: bool = True) -> None:
    # defaults are None so that unset flags do not override the config file
    p.add_argument("--config", type=Path, help="key=value file; flags override it")
    if with_mode:
        p.add_argument("--mode", choices=pipeline.MODES)
    p.add_argument("--target-image-path")
    p.add_argument("--semantic-image-path")
    p.add_argument("--prompt")
    p.add_argument("--checkpoint-path")
    p.add_argument("--output-dir")
    p.add_argument("--steps")
    p.add_argument("--condition-scale")
    p.add_argument("--semantic-scale")
    p.add_argument("--text-scale")
    p.add_argument("--resolution")
    p.add_argument("--seed")
    p.add_argument("--schedule", choices=("linear", "cosine"))
    p.add_argument("--fixed-point-iters")
    p.add_argument("--inversion-source", choices=("target", "semantic"))
    p.add_argument("--normalize", choices=("true", "false"))
    p.add_argument("--direction", choices=("equation", "prose"))
    p.add_argument("--encoder-seed")


def _pipeline_config(args, mode: str | None = None) -> pipeline.PipelineConfig:
    kv = pipeline.read_key_values(args.config) if args.config else {}
    # run records carry extra keys; keep only config keys so they replay as configs
    kv = {k: v for k, v in kv.items() if k in pipeline.CONFIG_KEYS}
    for key in pipeline.CONFIG_KEYS:
        val = getattr(args, key, None)
        if val is not None:
            kv[key] = val
    if mode is not None:
        kv["mode"] = mode
    return pipeline.config_from_mapping(kv)


def cmd_generate(args) -> int:
    cfg = _pipeline_config(args)
    record = pipeline.run_pipeline(cfg)
    for p in record.outputs:
        print(p)
    return 0


def cmd_invert(args) -> int:
    cfg = _pipeline_config(args, mode="variation")
    if cfg.target_image_path is None or cfg.checkpoint_path is None:
        raise CrossArtError("invert needs --target-image-path and --checkpoint-path")
    state = tensorio.load_checkpoint(cfg.checkpoint_path)
    target = load_image(cfg.target_image_path, cfg.resolution)
    result = pipeline.synthesize(state, target, cfg)
    out = pipeline.resolve_output_dir(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    tensorio.save_tensor(result.z_T, out / "z_T.bin")
    if args.dump_trajectory:
        for st in result.inversion:
            tensorio.save_tensor(st.z, out / f"inversion_{st.t:03d}.bin")
    save_image(result.image, out / "reconstruction.png")
    mse = float(((result.image - target) ** 2).mean())
    print(f"z_T={out / 'z_T.bin'} reconstruction_mse={mse!r}")
    return 0


def cmd_make_dataset(args) -> int:
    ds = data.make_synthetic_dataset(args.count, args.resolution, args.seed)
    out = pipeline.resolve_output_dir(Path(args.output_dir))
    out.mkdir(parents=True, exist_ok=True)
    for i, (img, fam) in enumerate(zip(ds.images, ds.families)):
        save_image(img * 2.0 - 1.0, out / f"{i:04d}_{fam}.png")
    (out / "families.txt").write_text("".join(f"{i:04d}_{f}.png={f}\n" for i, f in enumerate(ds.families)))
    print(out)
    return 0


def _dataset_from_dir(path: Path, resolution: int) -> data.SyntheticDataset:
    files = sorted(path.glob("*.png"))
    if not files:
        raise ImageIOError(f"no PNG files in {path}")
    images = tuple((load_image(f, resolution) + 1.0) / 2.0 for f in files)
    families = tuple(f.stem.rsplit("_", 1)[-1] if f.stem.rsplit("_", 1)[-1] in data.FAMILIES else "" for f in files)
    return _LabelledImages(images, families)


class _LabelledImages(data.SyntheticDataset):
    def prompts(self):
        return [data.FAMILY_PROMPTS.get(f, "") for f in self.families]


def cmd_train(args) -> int:
    if args.dataset_dir:
        ds = _dataset_from_dir(Path(args.dataset_dir), args.resolution)
    else:
        ds = data.make_synthetic_dataset(args.count, args.resolution, args.seed)
    state = DenoiserState.initialize(DenoiserConfig(base_channels=args.base_channels), args.seed)
    state = train_toy(state, ds, args.steps, args.lr, args.seed, batch_size=args.batch_size, log_every=100)
    ckpt = Path(args.checkpoint_path)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    tensorio.save_checkpoint(state, ckpt)
    hist = ckpt.with_suffix(".loss.txt")
    np.savetxt(hist, np.asarray(state.loss_history), fmt="%.8g")
    h = state.loss_history
    if len(h) >= 200:
        print(f"first100={np.mean(h[:100]):.4f} last100={np.mean(h[-100:]):.4f}")
    print(ckpt)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crossart", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="run one application mode")
    _add_pipeline_flags(gen)
    gen.set_defaults(func=cmd_generate)

    inv = sub.add_parser("invert", help="DDIM-invert a target image and reconstruct it")
    _add_pipeline_flags(inv, with_mode=False)
    inv.add_argument("--dump-trajectory", action="store_true")
    inv.set_defaults(func=cmd_invert)

    tr = sub.add_parser("train", help="train the toy denoiser")
    tr.add_argument("--checkpoint-path", required=True)
    tr.add_argument("--dataset-dir", help="directory of PNGs; synthetic data if omitted")
    tr.add_argument("--count", type=int, default=256)
    tr.add_argument("--resolution", type=int, default=32)
    tr.add_argument("--steps", type=int, default=2000)
    tr.add_argument("--lr", type=float, default=DEFAULT_LR)
    tr.add_argument("--batch-size", type=int, default=DEFAULT_BATCH)
    tr.add_argument("--base-channels", type=int, default=DenoiserConfig.base_channels)
    tr.add_argument("--seed", type=int, default=0)
    tr.set_defaults(func=cmd_train)

    ds = sub.add_parser("make-dataset", help="write the synthetic artworks as PNGs")
    ds.add_argument("--output-dir", required=True)
    ds.add_argument("--count", type=int, default=256)
    ds.add_argument("--resolution", type=int, default=64)
    ds.add_argument("--seed", type=int, default=0)
    ds.set_defaults(func=cmd_make_dataset)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except (CrossArtError, OSError) as exc:
        print(f"crossart: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
