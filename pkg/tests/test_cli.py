"""End-to-end command-line behavior on a miniature pipeline."""

import numpy as np
import pytest
from PIL import Image

from moveseg import cli
from moveseg import synthdata as sd
from moveseg import train as tr
from moveseg.nn import MAEConfig


TINY_YAML = """\
train_data: {data}
val_data: {data}
out_dir: {out}
mae_checkpoint: {mae}
mae:
  image_size: 64
  patch: 8
  dim: 32
  enc_blocks: 2
  dec_blocks: 1
  heads: 2
  mlp_ratio: 2
pretrain:
  iterations: 6
  batch_size: 4
  seed: 1
  checkpoint_every: 0
train:
  iterations: 4
  batch_size: 3
  seed: 2
  val_every: 2
  log_every: 1
  checkpoint_every: 0
  seg_channels: [16, 12, 8]
  disc_channels: [8, 16, 16, 16]
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    sd.gen_dataset(8, seed=0, out_dir=data)
    cfg = root / "config.yaml"
    cfg.write_text(TINY_YAML.format(data=data, out=root / "run",
                                    mae=root / "mae" / "mae.ckpt"))
    return root


def test_gen_data_roundtrip(tmp_path, capsys):
    assert cli.main(["gen-data", "--n", "4", "--seed", "7",
                     "--out", str(tmp_path / "a")]) == 0
    line_a = capsys.readouterr().out
    assert "entries 4" in line_a
    assert cli.main(["gen-data", "--n", "4", "--seed", "7",
                     "--out", str(tmp_path / "b")]) == 0
    line_b = capsys.readouterr().out
    assert line_a.split("checksum")[1] == line_b.split("checksum")[1]


def test_gen_data_rejects_zero(capsys):
    assert cli.main(["gen-data", "--n", "0", "--out", "x"]) == 2
    assert "must be positive" in capsys.readouterr().err


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("learning_rate: 1\n")
    assert cli.main(["pretrain-mae", "--config", str(cfg)]) == 2
    assert "learning_rate" in capsys.readouterr().err


def test_unknown_nested_key(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("train:\n  momentum: 0.9\n")
    assert cli.main(["pretrain-mae", "--config", str(cfg)]) == 2
    assert "train.momentum" in capsys.readouterr().err


def test_pretrain_and_train(workdir, capsys):
    cfg = str(workdir / "config.yaml")
    assert cli.main(["pretrain-mae", "--config", cfg]) == 0
    assert (workdir / "mae" / "mae.ckpt").exists()
    assert (workdir / "mae" / "config.yaml").read_text() == \
        (workdir / "config.yaml").read_text()
    capsys.readouterr()
    assert cli.main(["train", "--config", cfg]) == 0
    assert (workdir / "run" / "train_log.csv").exists()
    assert (workdir / "run" / "move.ckpt").exists()
    panels = list((workdir / "run" / "panels").glob("*.png"))
    assert len(panels) == 4


def test_resume_requires_checkpoint(workdir, tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(TINY_YAML.format(data=workdir / "data",
                                    out=tmp_path / "none",
                                    mae=workdir / "mae" / "mae.ckpt"))
    assert cli.main(["train", "--config", str(cfg), "--resume"]) == 2


def test_eval_with_checkpoint(workdir, capsys):
    assert cli.main([
        "eval", "--manifest", str(workdir / "data"),
        "--checkpoint", str(workdir / "run" / "move.ckpt"),
        "--mae", str(workdir / "mae" / "mae.ckpt"),
        "--out", str(workdir / "eval")]) == 0
    out = capsys.readouterr().out
    for key in ("mean_acc", "mean_iou", "max_f_beta", "max_f_threshold",
                "corloc"):
        assert key in out
    assert (workdir / "eval" / "metrics.txt").exists()
    assert (workdir / "eval" / "per_image.csv").read_text().count("\n") == 9


def test_eval_with_perfect_masks(workdir, tmp_path, capsys):
    masks_dir = tmp_path / "pred"
    masks_dir.mkdir()
    manifest = sd.load_manifest(workdir / "data")
    for e in manifest.entries:
        mask = sd.load_mask_png(workdir / "data" / e["mask"])
        Image.fromarray((mask * 255).astype(np.uint8), "L").save(
            masks_dir / e["image"].split("/")[-1])
    assert cli.main(["eval", "--manifest", str(workdir / "data"),
                     "--masks", str(masks_dir)]) == 0
    out = capsys.readouterr().out
    assert "mean_iou 1.000000" in out
    assert "corloc 100.00%" in out


def test_eval_size_mismatch(workdir, tmp_path, capsys):
    masks_dir = tmp_path / "pred"
    masks_dir.mkdir()
    manifest = sd.load_manifest(workdir / "data")
    for e in manifest.entries:
        Image.fromarray(np.zeros((32, 32), np.uint8), "L").save(
            masks_dir / e["image"].split("/")[-1])
    assert cli.main(["eval", "--manifest", str(workdir / "data"),
                     "--masks", str(masks_dir)]) == 1
    assert "00000.png" in capsys.readouterr().err


def test_eval_argument_validation(capsys):
    assert cli.main(["eval", "--manifest", "x"]) == 2
    assert cli.main(["eval", "--manifest", "x", "--checkpoint", "c"]) == 2


def test_inpaint_compare_cmd(workdir, capsys):
    assert cli.main(["inpaint-compare",
                     "--checkpoint", str(workdir / "mae" / "mae.ckpt"),
                     "--manifest", str(workdir / "data"),
                     "--n", "3", "--out", str(workdir / "ic")]) == 0
    out = capsys.readouterr().out
    for key in ("mse_default_mean", "mse_default_std", "mse_modified_mean",
                "mse_modified_std", "delta_mean", "delta_std"):
        assert key in out
    assert (workdir / "ic" / "inpaint_compare.txt").exists()


def test_render_both_modes(workdir):
    out = workdir / "panels_inpaint"
    assert cli.main(["render", "--mae", str(workdir / "mae" / "mae.ckpt"),
                     "--manifest", str(workdir / "data"),
                     "--mode", "inpaint", "--n", "3",
                     "--out", str(out)]) == 0
    files = sorted(out.glob("*.png"))
    assert len(files) == 3
    sizes = {Image.open(f).size for f in files}
    assert len(sizes) == 1
    out2 = workdir / "panels_train"
    assert cli.main(["render", "--mae", str(workdir / "mae" / "mae.ckpt"),
                     "--checkpoint", str(workdir / "run" / "move.ckpt"),
                     "--manifest", str(workdir / "data"),
                     "--mode", "train", "--n", "2",
                     "--out", str(out2)]) == 0
    files2 = sorted(out2.glob("*.png"))
    assert len(files2) == 2
    # six columns of 64px plus separators
    w, h = Image.open(files2[0]).size
    assert h == 64 and w == 6 * 64 + 5 * 2


def test_render_train_needs_checkpoint(capsys):
    assert cli.main(["render", "--mae", "m", "--manifest", "d",
                     "--out", "o"]) == 2


def test_missing_checkpoint_is_runtime_error(workdir, capsys):
    assert cli.main(["inpaint-compare", "--checkpoint",
                     str(workdir / "nope.ckpt"),
                     "--manifest", str(workdir / "data")]) == 1


def test_config_roundtrip_defaults(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("")
    parsed, text = cli.load_config(cfg)
    assert parsed.train.lr == 2e-4
    assert parsed.train.theta_min == 0.05
    assert parsed.train.lambda_min == 100.0
    assert parsed.train.lambda_bin_max == 12.5
    assert parsed.train.ramp_iters == 2500
    assert parsed.train.delta == 0.125
    assert parsed.train.betas_d == (0.0, 0.99)
    assert parsed.train.betas_s == (0.9, 0.95)
    assert parsed.eval.beta_sq == 0.09
