"""PNG panel rendering: training composites and inpainting comparisons."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from . import tensor as T
from .tensor import Tensor
from .compose import build_training_batch
from .inpaint import default_sparse_inpaint, inpaint_background
from .nn import SegmenterHead, TinyMAE

TRAIN_PANEL_COLUMNS = 6
INPAINT_PANEL_COLUMNS = 4
_PAD = 2


def _to_rgb(a: np.ndarray) -> np.ndarray:
    """[3,H,W] or [H,W] float in [0,1] -> [H,W,3] uint8."""
    a = np.asarray(a)
    if a.ndim == 2:
        a = np.stack([a] * 3)
    return np.round(np.clip(a, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)


def panel_image(columns: list[np.ndarray]) -> Image.Image:
    """Horizontal strip of equally sized images with a thin separator."""
    tiles = [_to_rgb(c) for c in columns]
    h, w, _ = tiles[0].shape
    strip = np.full((h, len(tiles) * (w + _PAD) - _PAD, 3), 255, np.uint8)
    for i, t in enumerate(tiles):
        if t.shape != (h, w, 3):
            raise ValueError("panel tiles must share one size")
        strip[:, i * (w + _PAD):i * (w + _PAD) + w] = t
    return Image.fromarray(strip)


def render_training_panels(images: np.ndarray, segmenter: SegmenterHead,
                           mae: TinyMAE, out_dir: Path, delta: float = 0.125,
                           seed: int = 0) -> list[Path]:
    """One strip per sample: input, mask, background, shifted composite,
    zero-shift composite, copy-paste."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    with T.no_grad():
        cs = build_training_batch(Tensor(images.astype(np.float32)),
                                  segmenter, mae, delta, rng,
                                  training=False, update_stats=False)
    paths = []
    for i in range(len(images)):
        strip = panel_image([
            cs.x.data[i], cs.m.data[i], cs.b_hat.data[i],
            cs.comp_shift.data[i], cs.comp_zero.data[i],
            cs.copy_paste.data[i],
        ])
        p = out_dir / f"train_panel_{i:03d}.png"
        strip.save(p)
        paths.append(p)
    return paths


def render_inpaint_panels(images: np.ndarray, mae: TinyMAE, out_dir: Path,
                          mask_ratio: float = 0.9, seed: int = 0
                          ) -> list[Path]:
    """One strip per sample: input, masked input, sparse-path reconstruction,
    soft-mask reconstruction (same mask)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    c = mae.config
    paths = []
    for i in range(len(images)):
        x = Tensor(images[i:i + 1].astype(np.float32))
        n_masked = int(round(c.tokens * mask_ratio))
        masked = rng.permutation(c.tokens)[:n_masked]
        m_hat = np.zeros((1, c.tokens), np.float32)
        m_hat[0, masked] = 1.0
        with T.no_grad():
            default = default_sparse_inpaint(x, masked, mae)
            modified = inpaint_background(x, Tensor(m_hat), mae)
        shown = images[i].copy()
        grid = m_hat.reshape(c.grid, c.grid)
        hole = np.repeat(np.repeat(grid, c.patch, 0), c.patch, 1)
        shown = shown * (1 - hole) + 0.5 * hole
        strip = panel_image([images[i], shown, default.data[0],
                             modified.data[0]])
        p = out_dir / f"inpaint_panel_{i:03d}.png"
        strip.save(p)
        paths.append(p)
    return paths
