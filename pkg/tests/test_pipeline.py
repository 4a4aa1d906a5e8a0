import hashlib
from dataclasses import replace
from pathlib import Path

import pytest
import torch

from crossart import cli
from crossart.data import make_synthetic_dataset
from crossart.diffusion import GuidanceConfig
from crossart.errors import InvalidConfigError
from crossart.imageio import load_image, save_image
from crossart.pipeline import (
    MODES,
    OUTPUT_ROOT_ENV,
    PipelineConfig,
    config_from_mapping,
    read_run_record,
    run_pipeline,
    synthesize,
)
from crossart.tensorio import load_tensor, save_checkpoint


@pytest.fixture(scope="module")
def assets(tmp_path_factory, small_state):
    root = tmp_path_factory.mktemp("assets")
    ds = make_synthetic_dataset(2, 32, seed=9)
    save_image(ds[0] * 2 - 1, root / "target.png")
    save_image(ds[1] * 2 - 1, root / "semantic.png")
    save_checkpoint(small_state, root / "model.ckpt")
    return root


def base_cfg(assets, out, **kw):
    cfg = PipelineConfig(
        mode="variation",
        target_image_path=assets / "target.png",
        semantic_image_path=assets / "semantic.png",
        checkpoint_path=assets / "model.ckpt",
        output_dir=out,
        prompt="a cool ink drawing",
        steps=4,
        resolution=32,
    )
    return replace(cfg, **kw)


@pytest.mark.parametrize("mode", ["style_transfer", "fusion", "multimodal_blend"])
def test_semantic_modes_require_semantic_image(assets, tmp_path, mode):
    with pytest.raises(InvalidConfigError):
        run_pipeline(base_cfg(assets, tmp_path, mode=mode, semantic_image_path=None))
    assert not any(tmp_path.iterdir())


@pytest.mark.parametrize("mode", ["editing", "multimodal_blend"])
def test_prompt_modes_require_prompt(assets, tmp_path, mode):
    with pytest.raises(InvalidConfigError):
        run_pipeline(base_cfg(assets, tmp_path, mode=mode, prompt=None))


def test_unknown_mode_and_keys():
    with pytest.raises(InvalidConfigError):
        PipelineConfig(mode="collage").validate()
    with pytest.raises(InvalidConfigError):
        config_from_mapping({"mode": "variation", "colour": "red"})
    with pytest.raises(InvalidConfigError):
        config_from_mapping({"mode": "variation", "steps": "many"})


def test_fusion_without_semantic_weight_is_variation(small_state):
    ds = make_synthetic_dataset(2, 32, seed=4)
    tgt, sem = ds[0] * 2 - 1, ds[1] * 2 - 1
    cfg = PipelineConfig(mode="variation", steps=4)
    var = synthesize(small_state, tgt, cfg)
    fus = synthesize(
        small_state, tgt, replace(cfg, mode="fusion", guidance=GuidanceConfig(semantic_scale=0.0)), sem
    )
    assert (fus.image - var.image).abs().max() <= 1e-6
    shared = synthesize(small_state, tgt, replace(cfg, mode="fusion"), sem, z_T=var.z_T)
    assert not torch.equal(shared.image, var.image)


def test_semantic_inversion_source_swaps_roles(small_state):
    ds = make_synthetic_dataset(2, 32, seed=4)
    tgt, sem = ds[0] * 2 - 1, ds[1] * 2 - 1
    cfg = PipelineConfig(mode="fusion", steps=3)
    a = synthesize(small_state, tgt, replace(cfg, inversion_source="semantic"), sem)
    b = synthesize(small_state, sem, cfg, tgt)
    assert torch.equal(a.image, b.image)


def test_trajectory_lengths(small_state):
    x = make_synthetic_dataset(1, 32, seed=1)[0] * 2 - 1
    r = synthesize(small_state, x, PipelineConfig(mode="variation", steps=5))
    assert len(r.inversion) == len(r.sampling) == len(r.latent_norms) == 6
    assert torch.equal(r.sampling[0].z, r.z_T)


def digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def test_runs_are_bit_identical_and_record_replays(assets, tmp_path):
    cfg = base_cfg(assets, tmp_path / "a", mode="multimodal_blend")
    rec_a = run_pipeline(cfg)
    rec_b = run_pipeline(replace(cfg, output_dir=tmp_path / "b"))
    assert digest(rec_a.outputs[0]) == digest(rec_b.outputs[0])
    assert rec_a.latent_norms == rec_b.latent_norms

    back = read_run_record(tmp_path / "a" / "run_record.txt")
    assert back.config == cfg and back.latent_norms == rec_a.latent_norms
    assert back.schedule == cfg.schedule and back.outputs == rec_a.outputs

    rec_c = run_pipeline(replace(back.config, output_dir=tmp_path / "c"))
    assert digest(rec_c.outputs[0]) == digest(rec_a.outputs[0])


def test_output_root_env(assets, tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
    rec = run_pipeline(base_cfg(assets, Path("rel")))
    assert rec.outputs[0] == tmp_path / "rel" / "variation.png"
    assert rec.outputs[0].exists()


def test_cli_generate_config_file_and_flags(assets, tmp_path, capsys):
    conf = tmp_path / "run.cfg"
    conf.write_text(
        "# editing run\n"
        f"mode=editing\ntarget_image_path={assets / 'target.png'}\n"
        f"checkpoint_path={assets / 'model.ckpt'}\nprompt=a warm oil painting\n"
        f"steps=3\nresolution=32\noutput_dir={tmp_path / 'from_file'}\n"
    )
    assert cli.main(["generate", "--config", str(conf), "--output-dir", str(tmp_path / "flag")]) == 0
    img = tmp_path / "flag" / "editing.png"
    assert img.exists() and load_image(img, 32).shape == (1, 3, 32, 32)
    assert not (tmp_path / "from_file").exists()
    assert str(img) in capsys.readouterr().out


def test_cli_error_exit_code(assets, tmp_path, capsys):
    code = cli.main(
        ["generate", "--mode", "fusion", "--target-image-path", str(assets / "target.png"),
         "--checkpoint-path", str(assets / "model.ckpt"), "--output-dir", str(tmp_path)]
    )
    assert code == 2
    assert "semantic image" in capsys.readouterr().err


def test_cli_invert_and_dataset(assets, tmp_path, capsys):
    args = ["invert", "--target-image-path", str(assets / "target.png"), "--checkpoint-path",
            str(assets / "model.ckpt"), "--output-dir", str(tmp_path), "--steps", "3",
            "--resolution", "32", "--dump-trajectory"]
    assert cli.main(args) == 0
    assert load_tensor(tmp_path / "z_T.bin").shape == (1, 3, 32, 32)
    assert len(list(tmp_path.glob("inversion_*.bin"))) == 4
    assert "reconstruction_mse=" in capsys.readouterr().out

    assert cli.main(["make-dataset", "--output-dir", str(tmp_path / "ds"), "--count", "4", "--resolution", "16"]) == 0
    assert len(list((tmp_path / "ds").glob("*.png"))) == 4


def test_cli_train_tiny(tmp_path):
    ckpt = tmp_path / "m.ckpt"
    code = cli.main(["train", "--checkpoint-path", str(ckpt), "--count", "4", "--resolution", "16",
                     "--steps", "2", "--base-channels", "8"])
    assert code == 0 and ckpt.exists()
    assert len(ckpt.with_suffix(".loss.txt").read_text().split()) == 2


def test_every_mode_runs(assets, tmp_path):
    for mode in MODES:
        rec = run_pipeline(base_cfg(assets, tmp_path, mode=mode, steps=2))
        assert rec.outputs[0].name == f"{mode}.png"
