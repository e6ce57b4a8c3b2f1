"""Mask regularizers, hinge adversarial losses and the reconstruction loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .compose import Shift, downsample_mask, shift_batch, union_mask
from .tensor import Tensor


@dataclass
class LossWeights:
    theta_min: float = 0.05
    lambda_min: float = 100.0
    lambda_bin_max: float = 12.5
    ramp_iters: int = 2500
    pooled_maxpool: bool = True
    pooled_avgpool: bool = True

    def __post_init__(self):
        if not 0.0 < self.theta_min < 1.0:
            raise ValueError("theta_min must lie in (0, 1)")
        if self.lambda_min < 0 or self.lambda_bin_max < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.ramp_iters < 1:
            raise ValueError("ramp_iters must be >= 1")


def loss_min(m: Tensor, theta_min: float) -> Tensor:
    """Hinge on per-image mask coverage: mean_i max(theta - coverage_i, 0)."""
    if m.ndim == 2:
        m = T.reshape(m, (1,) + tuple(m.shape))
    coverage = T.tmean(m, axis=(1, 2))
    return T.tmean(T.maximum(theta_min - coverage, 0.0))


def loss_bin(m: Tensor) -> Tensor:
    """Distance of mask values from {0,1}: mean of min(m, 1-m)."""
    return T.tmean(T.minimum(m, 1.0 - m))


class PooledLosses(NamedTuple):
    min_pooled: Tensor
    bin_pooled: Tensor

    def scalar(self) -> Tensor:
        return self.min_pooled + self.bin_pooled


def pooled_mask_losses(m: Tensor, shifts: list[Shift], patch: int,
                       theta_min: float, source: str = "union",
                       use_maxpool: bool = True,
                       use_avgpool: bool = True) -> PooledLosses:
    """Coverage and binarization losses on downsampled masks.

    The maxpool term runs on the pooled inpainting mask (union of the mask
    with its shifted version by default, ``source="mask"`` for the mask
    alone); the avgpool term runs on the mask itself.  Coverage fractions are
    taken over the grid cells.
    """
    if m.ndim == 2:
        m = T.reshape(m, (1,) + tuple(m.shape))
        shifts = shifts or [Shift(0, 0)]
    B, H, W = m.shape
    if H % patch or W % patch:
        raise ValueError(f"mask dims {H}x{W} not divisible by patch {patch}")
    h, w = H // patch, W // patch
    l_min = Tensor(np.zeros((), dtype=np.float32))
    l_bin = Tensor(np.zeros((), dtype=np.float32))
    if use_maxpool:
        if source == "union":
            pooled_src = union_mask(m, shift_batch(m, shifts))
        elif source == "mask":
            pooled_src = m
        else:
            raise ValueError(f"unknown pooled-loss source {source!r}")
        grid = T.reshape(downsample_mask(pooled_src, patch, "max"), (B, h, w))
        l_min = l_min + loss_min(grid, theta_min)
        l_bin = l_bin + loss_bin(grid)
    if use_avgpool:
        grid = T.reshape(downsample_mask(m, patch, "avg"), (B, h, w))
        l_min = l_min + loss_min(grid, theta_min)
        l_bin = l_bin + loss_bin(grid)
    return PooledLosses(l_min, l_bin)


def loss_adv_d(real_logits: Tensor, fake_logits: Tensor) -> Tensor:
    """Hinge discriminator loss: -E min(0, D(real)-1) - E min(0, -D(fake)-1)."""
    if real_logits.size == 0 or fake_logits.size == 0:
        raise ValueError("hinge loss needs at least one real and one fake "
                         "logit")
    real_term = T.tmean(T.minimum(real_logits - 1.0, 0.0))
    fake_term = T.tmean(T.minimum(-fake_logits - 1.0, 0.0))
    return -real_term - fake_term


def loss_adv_s(fake_logits: Tensor) -> Tensor:
    """Generator-side loss on the shifted composites: -E D(comp_shift)."""
    return -T.tmean(fake_logits)


def lambda_bin_ramp(iteration: int, lambda_max: float = 12.5,
                    ramp_iters: int = 2500) -> float:
    """Linear ramp of the binarization weight from 0 to lambda_max."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    return lambda_max * min(iteration / ramp_iters, 1.0)


def total_segmenter_loss(adv_s: Tensor, l_min: Tensor, l_bin: Tensor,
                         pooled: PooledLosses, weights: LossWeights,
                         iteration: int) -> Tensor:
    """advS + lambda_min*(L_min + pooled L_min) + ramp*(L_bin + pooled L_bin)."""
    lam_bin = lambda_bin_ramp(iteration, weights.lambda_bin_max,
                              weights.ramp_iters)
    total = adv_s + weights.lambda_min * (l_min + pooled.min_pooled)
    if lam_bin > 0.0:
        total = total + lam_bin * (l_bin + pooled.bin_pooled)
    return total


def recon_mse(pred: Tensor, target: Tensor, masked_patches: np.ndarray,
              patch: int) -> Tensor:
    """Mean squared error over pixels inside the masked patches only.

    masked_patches: binary [B,N] (N = token grid cells).
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    B, C, H, W = pred.shape
    h, w = H // patch, W // patch
    mp = np.asarray(masked_patches, dtype=np.float32)
    if mp.sum() == 0:
        raise ValueError("recon_mse needs a nonempty masked patch set")
    pix = np.repeat(np.repeat(mp.reshape(B, 1, h, w), patch, 2), patch, 3)
    weight = Tensor(np.broadcast_to(pix, (B, C, H, W)).copy())
    diff = pred - target
    total = T.tsum(weight * diff * diff)
    return total * (1.0 / float(pix.sum() * C))


def bce(pred: Tensor, target: Tensor, eps: float = 1e-6) -> Tensor:
    """Pixelwise binary cross-entropy (used by the supervised capacity check)."""
    p = T.clamp(pred, eps, 1.0 - eps)
    t = target
    return -T.tmean(t * T.log(p) + (1.0 - t) * T.log(1.0 - p))
