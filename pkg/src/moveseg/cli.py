"""Command-line entry point: data generation, pretraining, adversarial
training, evaluation, the inpainting comparison, and panel rendering.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import evaluation as ev
from . import synthdata as sd
from . import train as tr
from .inpaint import inpaint_compare
from .nn import MAEConfig
from .render import render_inpaint_panels, render_training_panels
from .train import PretrainConfig, TrainConfig

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


class ConfigError(Exception):
    pass


@dataclass
class EvalConfig:
    threshold: float = 0.5
    beta_sq: float = 0.09      # beta = 0.3 taken literally; 0.3 also common
    per_image_f: bool = True
    connectivity: int = 8


@dataclass
class Config:
    """Full pipeline configuration; defaults follow the method's recipe."""
    train_data: str = "data/train"
    val_data: str = "data/val"
    out_dir: str = "runs/move"
    mae_checkpoint: str = "runs/mae/mae.ckpt"
    mae: MAEConfig = field(default_factory=MAEConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


def _build_section(cls, values, path):
    if not isinstance(values, dict):
        raise ConfigError(f"config section '{path}' must be a mapping")
    names = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, val in values.items():
        if key not in names:
            raise ConfigError(f"unknown config key '{path}{key}'")
        f = names[key]
        if dataclasses.is_dataclass(f.type) or f.name in ("mae", "pretrain",
                                                          "train", "eval"):
            sub = {"mae": MAEConfig, "pretrain": PretrainConfig,
                   "train": TrainConfig, "eval": EvalConfig}[f.name]
            kwargs[key] = _build_section(sub, val, f"{path}{key}.")
        else:
            if isinstance(val, list):
                val = tuple(val)
            kwargs[key] = val
    return cls(**kwargs)


def load_config(path: Path) -> tuple[Config, str]:
    """Parse and validate a YAML config; returns it with its raw text."""
    text = Path(path).read_text()
    raw = yaml.safe_load(text)
    if raw is None:
        raw = {}
    cfg = _build_section(Config, raw, "")
    return cfg, text


def _echo_config(text: str, out_dir: Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.yaml").write_text(text)


def _load_split(path: str):
    return sd.load_dataset(Path(path))


# -- subcommands -------------------------------------------------------------

def cmd_gen_data(args) -> int:
    if args.n <= 0:
        print("error: --n must be positive", file=sys.stderr)
        return EXIT_USAGE
    manifest = sd.gen_dataset(args.n, args.seed, Path(args.out),
                              size=args.size)
    checksum = sd.dataset_checksum(Path(args.out))
    print(f"{Path(args.out) / 'manifest.json'}")
    print(f"entries {manifest.count} checksum {checksum:08x}")
    return EXIT_OK


def cmd_pretrain_mae(args) -> int:
    cfg, text = load_config(args.config)
    images, _ = _load_split(cfg.train_data)
    val_images, _ = _load_split(cfg.val_data)
    out_dir = Path(cfg.mae_checkpoint).parent
    _echo_config(text, out_dir)
    _, history = tr.pretrain_mae(images, val_images, cfg.pretrain,
                                 cfg.mae, out_dir)
    final = [h for h in history if "val_mse" in h]
    if final:
        print(f"final val mse {final[-1]['val_mse']:.6f}")
    print(f"checkpoint {out_dir / 'mae.ckpt'}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, text = load_config(args.config)
    images, _ = _load_split(cfg.train_data)
    val_images, val_masks = _load_split(cfg.val_data)
    mae = tr.load_mae(Path(cfg.mae_checkpoint))
    mae.freeze()
    out_dir = Path(cfg.out_dir)
    _echo_config(text, out_dir)
    resume = out_dir / "move.ckpt" if args.resume else None
    if resume is not None and not resume.exists():
        print(f"error: no checkpoint to resume at {resume}", file=sys.stderr)
        return EXIT_USAGE
    result = tr.train_move(images, val_images, val_masks, mae, cfg.train,
                           out_dir=out_dir, resume_from=resume)
    render_training_panels(val_images[:4], result.segmenter, mae,
                           out_dir / "panels", delta=cfg.train.delta)
    print(f"stopped at iteration {result.stopped_at}, "
          f"best val iou {result.best_iou:.4f}")
    return EXIT_OK


def _load_pred_masks(masks_dir: Path, manifest: sd.DatasetManifest,
                     size: int) -> np.ndarray:
    preds = []
    for e in manifest.entries:
        p = Path(masks_dir) / Path(e["image"]).name
        if not p.exists():
            raise FileNotFoundError(f"predicted mask missing: {p}")
        from PIL import Image
        with Image.open(p) as im:
            arr = np.asarray(im.convert("L"), dtype=np.float32) / 255.0
        if arr.shape != (size, size):
            raise ValueError(f"mask size mismatch for {p}: {arr.shape}, "
                             f"expected {(size, size)}")
        preds.append(arr)
    return np.stack(preds)


def cmd_eval(args) -> int:
    manifest_dir = Path(args.manifest).parent \
        if str(args.manifest).endswith(".json") else Path(args.manifest)
    manifest = sd.load_manifest(Path(args.manifest))
    images, gts = sd.load_dataset(manifest_dir)
    ecfg = EvalConfig()
    if args.config:
        cfg, _ = load_config(args.config)
        ecfg = cfg.eval
    if args.masks:
        preds = _load_pred_masks(Path(args.masks), manifest,
                                 manifest.image_size)
    else:
        mae = tr.load_mae(Path(args.mae))
        mae.freeze()
        seg = tr.load_segmenter(Path(args.checkpoint), mae.config)
        preds = tr.predict_masks(seg, mae, images)
    report = ev.evaluate(preds, gts, t=ecfg.threshold, beta_sq=ecfg.beta_sq,
                         per_image_f=ecfg.per_image_f,
                         connectivity=ecfg.connectivity)
    print(report.as_text())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.txt").write_text(report.as_text() + "\n")
        with open(out / "per_image.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["index", "acc", "iou",
                                               "corloc_hit", "box"])
            w.writeheader()
            for i, row in enumerate(report.per_image):
                w.writerow({"index": i, **row})
    return EXIT_OK


def cmd_inpaint_compare(args) -> int:
    manifest_dir = Path(args.manifest).parent \
        if str(args.manifest).endswith(".json") else Path(args.manifest)
    images, _ = sd.load_dataset(manifest_dir)
    if args.n:
        images = images[:args.n]
    mae = tr.load_mae(Path(args.checkpoint))
    mae.freeze()
    report = inpaint_compare(mae, list(images), seed=args.seed)
    print(report.as_text())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "inpaint_compare.txt").write_text(report.as_text() + "\n")
    return EXIT_OK


def cmd_render(args) -> int:
    manifest_dir = Path(args.manifest).parent \
        if str(args.manifest).endswith(".json") else Path(args.manifest)
    images, _ = sd.load_dataset(manifest_dir)
    images = images[:args.n]
    mae = tr.load_mae(Path(args.mae))
    mae.freeze()
    if args.mode == "train":
        seg = tr.load_segmenter(Path(args.checkpoint), mae.config)
        paths = render_training_panels(images, seg, mae, Path(args.out),
                                       seed=args.seed)
    else:
        paths = render_inpaint_panels(images, mae, Path(args.out),
                                      seed=args.seed)
    for p in paths:
        print(p)
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="moveseg",
        description="Unsupervised foreground segmentation by movability")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    pm = sub.add_parser("pretrain-mae", help="pretrain the inpainter")
    pm.add_argument("--config", required=True)
    pm.set_defaults(func=cmd_pretrain_mae)

    t = sub.add_parser("train", help="adversarial segmenter training")
    t.add_argument("--config", required=True)
    t.add_argument("--resume", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate masks against a dataset")
    e.add_argument("--manifest", required=True)
    e.add_argument("--masks")
    e.add_argument("--checkpoint")
    e.add_argument("--mae")
    e.add_argument("--config")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    ic = sub.add_parser("inpaint-compare",
                        help="sparse vs soft-mask reconstruction gap")
    ic.add_argument("--checkpoint", required=True)
    ic.add_argument("--manifest", required=True)
    ic.add_argument("--n", type=int, default=200)
    ic.add_argument("--seed", type=int, default=0)
    ic.add_argument("--out")
    ic.set_defaults(func=cmd_inpaint_compare)

    r = sub.add_parser("render", help="write PNG panels")
    r.add_argument("--checkpoint")
    r.add_argument("--mae", required=True)
    r.add_argument("--manifest", required=True)
    r.add_argument("--mode", choices=("train", "inpaint"), default="train")
    r.add_argument("--n", type=int, default=4)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)
    return p


def _validate(args) -> str | None:
    if args.command == "eval":
        if bool(args.masks) == bool(args.checkpoint):
            return "eval needs exactly one of --masks or --checkpoint"
        if args.checkpoint and not args.mae:
            return "eval --checkpoint also needs --mae"
    if args.command == "render" and args.mode == "train" \
            and not args.checkpoint:
        return "render --mode train needs --checkpoint"
    return None


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    problem = _validate(args)
    if problem:
        print(f"error: {problem}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (ConfigError, yaml.YAMLError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, tr.CheckpointError, tr.DivergedError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
