"""Optimizers, the two training procedures, and binary checkpointing.

Everything here is deterministic given a seed: batches, maskings, shifts and
augmentation draws all come from one ``numpy`` generator whose state is saved
in checkpoints, so a resumed run continues bitwise identically.
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor
from . import losses as L
from .compose import build_training_batch
from .inpaint import default_sparse_inpaint
from .nn import (MAEConfig, TinyMAE, SegmenterConfig, SegmenterHead,
                 DiscriminatorConfig, Discriminator, Model, features_to_grid)


# -- optimizer ---------------------------------------------------------------

class Adam:
    """Standard Adam with bias correction over one model's parameters.

    Gradients are consumed and cleared by :meth:`step`.
    """

    def __init__(self, model: Model, lr: float = 2e-4,
                 betas: tuple[float, float] = (0.9, 0.95),
                 eps: float = 1e-8):
        self.model = model
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in model.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in model.params.items()}

    def step(self) -> None:
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.model.params.items():
            if not p.requires_grad:
                continue
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ValueError(f"gradient shape {g.shape} does not match "
                                 f"parameter {name} {p.data.shape}")
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        out = {f"m:{k}": v for k, v in self.m.items()}
        out.update({f"v:{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, state: dict[str, np.ndarray], t: int) -> None:
        self.t = t
        for k, v in state.items():
            kind, name = k.split(":", 1)
            target = self.m if kind == "m" else self.v
            if target[name].shape != v.shape:
                raise ValueError(f"optimizer state shape mismatch for {name}")
            target[name] = v.astype(np.float32).copy()


# -- checkpoint format -------------------------------------------------------

MAGIC = b"MOVE"
CKPT_VERSION = 1


class CheckpointError(Exception):
    """Base class for checkpoint load failures."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


def save_checkpoint(path: Path, arrays: dict[str, np.ndarray],
                    meta: dict) -> None:
    """Write named float32 arrays plus a JSON meta block.

    Layout: magic, version, header length, JSON header (names, shapes,
    offsets, meta), little-endian float32 payload, sha256 of all prior bytes.
    """
    entries = []
    payload = bytearray()
    for name in sorted(arrays):
        a = np.asarray(arrays[name], dtype="<f4")
        entries.append({"name": name, "shape": list(a.shape),
                        "offset": len(payload)})
        payload += a.tobytes()
    header = json.dumps({"arrays": entries, "meta": meta},
                        sort_keys=True).encode()
    blob = MAGIC + struct.pack("<IQ", CKPT_VERSION, len(header)) \
        + header + bytes(payload)
    blob += hashlib.sha256(blob).digest()
    Path(path).write_bytes(blob)


def load_checkpoint(path: Path) -> tuple[dict[str, np.ndarray], dict]:
    blob = Path(path).read_bytes()
    if len(blob) < 16 + 32:
        raise CheckpointTruncatedError(f"{path}: file too short")
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointChecksumError(f"{path}: checksum mismatch")
    version, header_len = struct.unpack("<IQ", blob[4:16])
    if version != CKPT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, "
                                     f"expected {CKPT_VERSION}")
    if len(body) < 16 + header_len:
        raise CheckpointTruncatedError(f"{path}: header truncated")
    header = json.loads(blob[16:16 + header_len].decode())
    payload = body[16 + header_len:]
    arrays = {}
    for e in header["arrays"]:
        size = int(np.prod(e["shape"], dtype=np.int64)) if e["shape"] else 1
        end = e["offset"] + 4 * size
        if end > len(payload):
            raise CheckpointTruncatedError(f"{path}: payload truncated at "
                                           f"{e['name']}")
        arrays[e["name"]] = np.frombuffer(
            payload[e["offset"]:end], dtype="<f4").reshape(e["shape"]).copy()
    return arrays, header["meta"]


def _pack_models(models: dict[str, Model],
                 optims: dict[str, Adam] | None = None
                 ) -> dict[str, np.ndarray]:
    arrays = {}
    for mname, model in models.items():
        for k, v in model.state().items():
            arrays[f"model/{mname}/{k}"] = v
    for oname, opt in (optims or {}).items():
        for k, v in opt.state().items():
            arrays[f"optim/{oname}/{k}"] = v
    return arrays


def _unpack_into(arrays: dict[str, np.ndarray], models: dict[str, Model],
                 optims: dict[str, Adam] | None = None,
                 opt_steps: dict[str, int] | None = None) -> None:
    for mname, model in models.items():
        prefix = f"model/{mname}/"
        model.load_state({k[len(prefix):]: v for k, v in arrays.items()
                          if k.startswith(prefix)})
    for oname, opt in (optims or {}).items():
        prefix = f"optim/{oname}/"
        opt.load_state({k[len(prefix):]: v for k, v in arrays.items()
                        if k.startswith(prefix)}, (opt_steps or {})[oname])


def rng_state(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    return json.loads(json.dumps(state, default=int))


def restore_rng(state: dict) -> np.random.Generator:
    gen = np.random.Generator(getattr(np.random, state["bit_generator"])())
    gen.bit_generator.state = state
    return gen


# -- MAE pretraining ---------------------------------------------------------

class DivergedError(RuntimeError):
    """A loss became non-finite; message names the iteration and component."""


@dataclass
class PretrainConfig:
    iterations: int = 3000
    batch_size: int = 16
    lr: float = 2e-4
    betas: tuple[float, float] = (0.9, 0.95)
    mask_ratio: float = 0.75
    seed: int = 0
    checkpoint_every: int = 1000
    log_every: int = 50


def _random_masking(rng: np.random.Generator, n_tokens: int,
                    ratio: float) -> np.ndarray:
    n_masked = int(round(n_tokens * ratio))
    return rng.permutation(n_tokens)[:n_masked]


def masked_mse(mae: TinyMAE, images: np.ndarray, ratio: float,
               seed: int, batch_size: int = 32) -> float:
    """Masked-patch reconstruction MSE with a fixed masking per call."""
    rng = np.random.default_rng(seed)
    n_tok = mae.config.tokens
    total, count = 0.0, 0
    with T.no_grad():
        for lo in range(0, len(images), batch_size):
            x = Tensor(images[lo:lo + batch_size].astype(np.float32))
            masked = _random_masking(rng, n_tok, ratio)
            pred = default_sparse_inpaint(x, masked, mae)
            mp = np.zeros((x.shape[0], n_tok), dtype=np.float32)
            mp[:, masked] = 1.0
            mse = L.recon_mse(pred, x, mp, mae.config.patch)
            total += float(mse.data) * x.shape[0]
            count += x.shape[0]
    return total / count


def pretrain_mae(images: np.ndarray, val_images: np.ndarray,
                 config: PretrainConfig,
                 mae_config: MAEConfig | None = None,
                 out_dir: Path | None = None,
                 ) -> tuple[TinyMAE, list[dict]]:
    """Train the inpainter by masked-patch reconstruction; returns history."""
    rng = np.random.default_rng(config.seed)
    mae = TinyMAE(mae_config or MAEConfig(), rng)
    opt = Adam(mae, lr=config.lr, betas=config.betas)
    n_tok = mae.config.tokens
    history: list[dict] = []
    writer = _CsvLog(out_dir, "pretrain_log.csv",
                     ["iter", "train_mse"]) if out_dir else None
    for it in range(config.iterations):
        idx = rng.integers(0, len(images), size=config.batch_size)
        x = Tensor(images[idx].astype(np.float32))
        masked = _random_masking(rng, n_tok, config.mask_ratio)
        with T.tape():
            pred = default_sparse_inpaint(x, masked, mae)
            mp = np.zeros((config.batch_size, n_tok), dtype=np.float32)
            mp[:, masked] = 1.0
            loss = L.recon_mse(pred, x, mp, mae.config.patch)
            val = float(loss.data)
            if not np.isfinite(val):
                raise DivergedError(f"iteration {it}: reconstruction loss "
                                    f"is {val}")
            T.backward(loss)
        opt.step()
        if it % config.log_every == 0 or it == config.iterations - 1:
            row = {"iter": it, "train_mse": val}
            history.append(row)
            if writer:
                writer.write(row)
        if out_dir and config.checkpoint_every \
                and (it + 1) % config.checkpoint_every == 0:
            _save_mae(out_dir / "mae.ckpt", mae, opt, rng, config, it + 1)
    if out_dir:
        _save_mae(out_dir / "mae.ckpt", mae, opt, rng, config,
                  config.iterations)
    if len(val_images):
        final = masked_mse(mae, val_images, config.mask_ratio, config.seed)
        history.append({"iter": config.iterations, "val_mse": final})
    return mae, history


def _save_mae(path: Path, mae: TinyMAE, opt: Adam,
              rng: np.random.Generator, config: PretrainConfig,
              iteration: int) -> None:
    meta = {
        "kind": "mae",
        "iteration": iteration,
        "config": asdict(config),
        "mae_config": asdict(mae.config),
        "opt_steps": {"mae": opt.t},
        "rng": rng_state(rng),
    }
    save_checkpoint(path, _pack_models({"mae": mae}, {"mae": opt}), meta)


def load_mae(path: Path) -> TinyMAE:
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "mae":
        raise CheckpointError(f"{path}: not an inpainter checkpoint")
    cfg = MAEConfig(**meta["mae_config"])
    mae = TinyMAE(cfg, np.random.default_rng(0))
    _unpack_into(arrays, {"mae": mae})
    return mae


# -- adversarial training ----------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 2e-4
    betas_d: tuple[float, float] = (0.0, 0.99)
    betas_s: tuple[float, float] = (0.9, 0.95)
    theta_min: float = 0.05
    lambda_min: float = 100.0
    lambda_bin_max: float = 12.5
    ramp_iters: int = 2500
    delta: float = 0.125
    batch_size: int = 16
    iterations: int = 20000
    seed: int = 0
    real_set: tuple[str, ...] = ("autoenc", "comp_zero")
    fake_set: tuple[str, ...] = ("comp_shift", "copy_paste")
    inpaint_mode: str = "compose"
    pooled_source: str = "union"
    pooled_maxpool: bool = True
    pooled_avgpool: bool = True
    color_aug: bool = True
    shift_after_autoencode: bool = True
    deep_segmenter: bool = False
    seg_channels: tuple[int, ...] = (48, 32, 24)
    disc_channels: tuple[int, ...] = (24, 48, 96, 96)
    val_every: int = 250
    checkpoint_every: int = 2000
    log_every: int = 10
    stop_iou: float | None = None


@dataclass
class TrainResult:
    segmenter: SegmenterHead
    discriminator: Discriminator
    history: list[dict] = field(default_factory=list)
    best_iou: float = 0.0
    final_iou: float = 0.0
    final_coverage: float = 1.0
    stopped_at: int = 0


def color_augment(x: Tensor, brightness: float, saturation: float) -> Tensor:
    """Differentiable brightness offset and saturation scaling."""
    gray = T.tmean(x, axis=1, keepdims=True)
    gray = T.tile(gray, (1, x.shape[1], 1, 1))
    return gray + saturation * (x - gray) + brightness


def predict_masks(segmenter: SegmenterHead, mae: TinyMAE,
                  images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Soft masks [N,H,W] for a stack of images, evaluation mode."""
    out = []
    with T.no_grad():
        for lo in range(0, len(images), batch_size):
            x = Tensor(images[lo:lo + batch_size].astype(np.float32))
            feats = features_to_grid(mae.features(x), mae.config.grid)
            m = segmenter.forward(feats, training=False)
            out.append(m.data.copy())
    return np.concatenate(out)


def _val_stats(segmenter: SegmenterHead, mae: TinyMAE, images: np.ndarray,
               gt_masks: np.ndarray) -> tuple[float, float]:
    """(mean IoU at threshold 0.5, mean soft coverage) on a labeled set."""
    soft = predict_masks(segmenter, mae, images)
    pred = soft >= 0.5
    gt = gt_masks.astype(bool)
    inter = (pred & gt).sum(axis=(1, 2))
    union = (pred | gt).sum(axis=(1, 2))
    iou = np.where(union > 0, inter / np.maximum(union, 1), 1.0)
    return float(iou.mean()), float(soft.mean())


class _CsvLog:
    def __init__(self, out_dir: Path, name: str, fields: list[str],
                 append: bool = False):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        self.path = out_dir / name
        self.fields = fields
        mode = "a" if append and self.path.exists() else "w"
        self.fh = open(self.path, mode, newline="")
        self.writer = csv.DictWriter(self.fh, fieldnames=fields)
        if mode == "w":
            self.writer.writeheader()

    def write(self, row: dict) -> None:
        self.writer.writerow({k: _fmt(row.get(k, "")) for k in self.fields})
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.8e}"
    return v


LOG_FIELDS = ["iter", "loss_d", "loss_s_adv", "loss_min", "loss_bin",
              "pooled_min", "pooled_bin", "lambda_bin", "val_iou",
              "val_coverage"]


def train_move(images: np.ndarray, val_images: np.ndarray,
               val_masks: np.ndarray, mae: TinyMAE, config: TrainConfig,
               out_dir: Path | None = None,
               resume_from: Path | None = None,
               stop_at: int | None = None) -> TrainResult:
    """Alternating discriminator/segmenter optimization.

    ``stop_at`` ends the loop early at a given iteration (used for resume
    tests); ``config.stop_iou`` ends it when validation IoU reaches a target.
    Ground-truth masks are used for validation logging only.
    """
    mae.freeze()
    frozen_checksum = mae.param_checksum()
    patch = mae.config.patch
    weights = L.LossWeights(theta_min=config.theta_min,
                            lambda_min=config.lambda_min,
                            lambda_bin_max=config.lambda_bin_max,
                            ramp_iters=config.ramp_iters)
    if resume_from is not None:
        seg, disc, opt_s, opt_d, rng, start_iter = \
            _load_move(resume_from, mae.config, config)
    else:
        rng = np.random.default_rng(config.seed)
        seg = SegmenterHead(SegmenterConfig(in_dim=mae.config.dim,
                                            channels=config.seg_channels,
                                            deep=config.deep_segmenter), rng)
        disc = Discriminator(
            DiscriminatorConfig(image_size=mae.config.image_size,
                                channels=config.disc_channels), rng)
        opt_s = Adam(seg, lr=config.lr, betas=config.betas_s)
        opt_d = Adam(disc, lr=config.lr, betas=config.betas_d)
        start_iter = 0
    log = _CsvLog(out_dir, "train_log.csv", LOG_FIELDS,
                  append=start_iter > 0) if out_dir else None
    result = TrainResult(segmenter=seg, discriminator=disc)
    end = config.iterations if stop_at is None \
        else min(stop_at, config.iterations)
    i = start_iter
    for i in range(start_iter, end):
        idx = rng.integers(0, len(images), size=config.batch_size)
        x = Tensor(images[idx].astype(np.float32))
        if config.color_aug:
            bright = float(rng.uniform(-0.2, 0.2))
            sat = float(rng.uniform(0.8, 1.2))
        else:
            bright, sat = 0.0, 1.0

        def aug(t: Tensor) -> Tensor:
            if not config.color_aug:
                return t
            return color_augment(t, bright, sat)

        # one tape covers both phases so the composite built for the
        # discriminator step keeps its history for the segmenter step
        with T.tape():
            # discriminator step: all its inputs detached from the segmenter
            cs = build_training_batch(
                x, seg, mae, config.delta, rng,
                inpaint_mode=config.inpaint_mode,
                shift_after_autoencode=config.shift_after_autoencode)
            reals = T.concat([aug(t) for t in cs.reals(config.real_set)])
            fakes = T.concat([aug(t)
                              for t in cs.fakes_detached(config.fake_set)])
            real_logits = disc.forward(reals, training=True)
            fake_logits = disc.forward(fakes, training=True)
            d_loss = L.loss_adv_d(real_logits, fake_logits)
            _check_finite(i, "discriminator", d_loss)
            T.backward(d_loss)
            opt_d.step()
            seg.zero_grad()

            # segmenter step: gradient flows only through the shifted
            # composite (and the mask regularizers)
            logits = disc.forward(aug(cs.comp_shift), training=True,
                                  update_stats=False)
            adv_s = L.loss_adv_s(logits)
            l_min = L.loss_min(cs.m, config.theta_min)
            l_bin = L.loss_bin(cs.m)
            pooled = L.pooled_mask_losses(
                cs.m, cs.shifts, patch, config.theta_min,
                source=config.pooled_source,
                use_maxpool=config.pooled_maxpool,
                use_avgpool=config.pooled_avgpool)
            total = L.total_segmenter_loss(adv_s, l_min, l_bin, pooled,
                                           weights, i)
            for name, t in (("adversarial", adv_s), ("coverage", l_min),
                            ("binarization", l_bin), ("total", total)):
                _check_finite(i, name, t)
            T.backward(total)
            opt_s.step()
            disc.zero_grad()

        row = {"iter": i, "loss_d": float(d_loss.data),
               "loss_s_adv": float(adv_s.data),
               "loss_min": float(l_min.data), "loss_bin": float(l_bin.data),
               "pooled_min": float(pooled.min_pooled.data),
               "pooled_bin": float(pooled.bin_pooled.data),
               "lambda_bin": L.lambda_bin_ramp(i, config.lambda_bin_max,
                                               config.ramp_iters)}
        do_val = bool(config.val_every) and (i + 1) % config.val_every == 0
        if do_val and len(val_images):
            iou, cov = _val_stats(seg, mae, val_images, val_masks)
            row["val_iou"] = iou
            row["val_coverage"] = cov
            result.best_iou = max(result.best_iou, iou)
            result.final_iou = iou
            result.final_coverage = cov
        if i % config.log_every == 0 or do_val:
            result.history.append(row)
            if log:
                log.write(row)
        if out_dir and config.checkpoint_every \
                and (i + 1) % config.checkpoint_every == 0:
            save_move_checkpoint(Path(out_dir) / "move.ckpt", seg, disc,
                                 opt_s, opt_d, rng, config, i + 1)
        if config.stop_iou is not None and "val_iou" in row \
                and row["val_iou"] >= config.stop_iou:
            i += 1
            break
    else:
        i = end
    result.stopped_at = i
    if mae.param_checksum() != frozen_checksum:
        raise RuntimeError("frozen inpainter parameters changed during "
                           "adversarial training")
    if out_dir:
        save_move_checkpoint(Path(out_dir) / "move.ckpt", seg, disc,
                             opt_s, opt_d, rng, config, i)
        log.close()
    return result


def _check_finite(iteration: int, name: str, t: Tensor) -> None:
    v = float(t.data)
    if not np.isfinite(v):
        raise DivergedError(f"iteration {iteration}: {name} loss is {v}")


def save_move_checkpoint(path: Path, seg: SegmenterHead, disc: Discriminator,
                         opt_s: Adam, opt_d: Adam,
                         rng: np.random.Generator, config: TrainConfig,
                         iteration: int) -> None:
    meta = {
        "kind": "move",
        "iteration": iteration,
        "config": asdict(config),
        "opt_steps": {"seg": opt_s.t, "disc": opt_d.t},
        "rng": rng_state(rng),
    }
    arrays = _pack_models({"seg": seg, "disc": disc},
                          {"seg": opt_s, "disc": opt_d})
    save_checkpoint(path, arrays, meta)


def _load_move(path: Path, mae_config: MAEConfig, config: TrainConfig):
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "move":
        raise CheckpointError(f"{path}: not an adversarial-training "
                              f"checkpoint")
    saved = meta["config"]
    seg = SegmenterHead(
        SegmenterConfig(in_dim=mae_config.dim,
                        channels=tuple(saved["seg_channels"]),
                        deep=saved["deep_segmenter"]),
        np.random.default_rng(0))
    disc = Discriminator(
        DiscriminatorConfig(image_size=mae_config.image_size,
                            channels=tuple(saved["disc_channels"])),
        np.random.default_rng(0))
    opt_s = Adam(seg, lr=config.lr, betas=config.betas_s)
    opt_d = Adam(disc, lr=config.lr, betas=config.betas_d)
    _unpack_into(arrays, {"seg": seg, "disc": disc},
                 {"seg": opt_s, "disc": opt_d}, meta["opt_steps"])
    return seg, disc, opt_s, opt_d, restore_rng(meta["rng"]), \
        meta["iteration"]


def load_segmenter(path: Path, mae_config: MAEConfig) -> SegmenterHead:
    """Load just the segmenter from an adversarial-training checkpoint."""
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "move":
        raise CheckpointError(f"{path}: not an adversarial-training "
                              f"checkpoint")
    saved = meta["config"]
    seg = SegmenterHead(
        SegmenterConfig(in_dim=mae_config.dim,
                        channels=tuple(saved["seg_channels"]),
                        deep=saved["deep_segmenter"]),
        np.random.default_rng(0))
    prefix = "model/seg/"
    seg.load_state({k[len(prefix):]: v for k, v in arrays.items()
                    if k.startswith(prefix)})
    return seg


# -- supervised capacity check ----------------------------------------------

def train_supervised(images: np.ndarray, gt_masks: np.ndarray,
                     val_images: np.ndarray, val_masks: np.ndarray,
                     mae: TinyMAE, iterations: int = 600,
                     batch_size: int = 16, lr: float = 2e-3,
                     seed: int = 0,
                     target_iou: float | None = None,
                     seg_config: SegmenterConfig | None = None
                     ) -> tuple[SegmenterHead, float]:
    """Fit the head directly to reference masks with cross-entropy.

    This is a capacity check for the architecture, not part of the
    unsupervised method; returns the head and its final validation IoU.
    """
    mae.freeze()
    rng = np.random.default_rng(seed)
    seg = SegmenterHead(seg_config or SegmenterConfig(in_dim=mae.config.dim),
                        rng)
    opt = Adam(seg, lr=lr, betas=(0.9, 0.95))
    best = 0.0
    for it in range(iterations):
        idx = rng.integers(0, len(images), size=batch_size)
        x = Tensor(images[idx].astype(np.float32))
        gt = Tensor(gt_masks[idx].astype(np.float32))
        with T.tape():
            feats = features_to_grid(mae.features(x), mae.config.grid)
            m = seg.forward(feats, training=True)
            loss = L.bce(m, gt)
            _check_finite(it, "cross-entropy", loss)
            T.backward(loss)
        opt.step()
        if (it + 1) % 50 == 0 or it + 1 == iterations:
            iou, _ = _val_stats(seg, mae, val_images, val_masks)
            best = max(best, iou)
            if target_iou is not None and iou >= target_iou:
                return seg, iou
    iou, _ = _val_stats(seg, mae, val_images, val_masks)
    return seg, max(best, iou)
