"""Mask algebra and image composition for the adversarial training set.

Builds, per training image, the four discriminator inputs: the autoencoded
image and the zero-shift composite (reals), the shifted composite and the
copy-paste image (fakes).  Only the shifted composite carries gradients back
to the segmenter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .inpaint import inpaint_background
from .nn import SegmenterHead, TinyMAE, features_to_grid
from .tensor import Tensor


@dataclass(frozen=True)
class Shift:
    dy: int
    dx: int


def sample_shift(delta: float, H: int, W: int,
                 rng: np.random.Generator) -> Shift:
    """Uniform integer shift with |dy| <= floor(delta*H), |dx| <= floor(delta*W)."""
    if not 0.0 <= delta < 1.0:
        raise ValueError("shift range must lie in [0, 1)")
    my, mx = int(delta * H), int(delta * W)
    return Shift(int(rng.integers(-my, my + 1)), int(rng.integers(-mx, mx + 1)))


def shift_map(y: Tensor, shift: Shift) -> Tensor:
    """Pure translation with zero fill: out[p] = y[p + shift]."""
    return T.shift2d(y, shift.dy, shift.dx)


def shift_batch(y: Tensor, shifts: list[Shift]) -> Tensor:
    return T.shift2d_batch(y, [s.dy for s in shifts], [s.dx for s in shifts])


def union_mask(m: Tensor, m_shifted: Tensor) -> Tensor:
    """Soft union 1 - (1-m)(1-m_shifted), clamped so u >= max(m, m_shifted)
    holds exactly in floating point."""
    if m.shape != m_shifted.shape:
        raise ValueError(f"mask shape mismatch: {m.shape} vs {m_shifted.shape}")
    soft = 1.0 - (1.0 - m) * (1.0 - m_shifted)
    return T.maximum(soft, T.maximum(m, m_shifted))


def downsample_mask(u: Tensor, patch: int, kind: str = "max") -> Tensor:
    """Reduce a pixel mask to the token grid; [B,H,W] (or [H,W]) -> [B,N]."""
    squeeze = u.ndim == 2
    if squeeze:
        u = T.reshape(u, (1,) + tuple(u.shape))
    B, H, W = u.shape
    if H % patch or W % patch:
        raise ValueError(f"mask dims {H}x{W} not divisible by patch {patch}")
    pooled = T.pool2d(T.reshape(u, (B, 1, H, W)), patch, kind)
    out = T.reshape(pooled, (B, (H // patch) * (W // patch)))
    return T.reshape(out, (out.shape[1],)) if squeeze else out


def _mask3(m: Tensor) -> Tensor:
    B, H, W = m.shape
    return T.tile(T.reshape(m, (B, 1, H, W)), (1, 3, 1, 1))


def compose_shifted(x_ae: Tensor, m: Tensor, shifts: list[Shift],
                    b_hat: Tensor) -> Tensor:
    """Shifted foreground over the inpainted background:
    out[p] = m_s[p] * x_ae[p+s] + (1 - m_s[p]) * b_hat[p]."""
    if x_ae.shape != b_hat.shape:
        raise ValueError(f"image shape mismatch: {x_ae.shape} vs {b_hat.shape}")
    if m.shape[0] != x_ae.shape[0] or m.shape[-2:] != x_ae.shape[-2:]:
        raise ValueError(f"mask shape {m.shape} does not match image "
                         f"{x_ae.shape}")
    m_s = shift_batch(m, shifts)
    x_s = shift_batch(x_ae, shifts)
    m3 = _mask3(m_s)
    return m3 * x_s + (1.0 - m3) * b_hat


def compose_copy_paste(x_ae: Tensor, m: Tensor, shifts: list[Shift]) -> Tensor:
    """Shifted foreground pasted directly onto the (autoencoded) image."""
    if m.shape[0] != x_ae.shape[0] or m.shape[-2:] != x_ae.shape[-2:]:
        raise ValueError(f"mask shape {m.shape} does not match image "
                         f"{x_ae.shape}")
    m_s = shift_batch(m, shifts)
    x_s = shift_batch(x_ae, shifts)
    m3 = _mask3(m_s)
    return x_s * m3 + x_ae * (1.0 - m3)


@dataclass
class CompositeSet:
    """Everything derived from one batch for one adversarial step.

    ``comp_shift`` is the only member carrying gradients to the segmenter;
    the other images are detached by construction.
    """
    x: Tensor                 # input batch (constant)
    x_ae: Tensor              # autoencoded input (or x itself in compose mode)
    b_hat: Tensor             # inpainted background (live in the mask)
    comp_shift: Tensor        # shifted composite, the gradient path
    comp_zero: Tensor         # zero-shift composite (detached)
    copy_paste: Tensor        # copy-paste fake (detached)
    m: Tensor                 # soft mask [B,H,W] (live)
    m_shift: Tensor
    m_hat: Tensor             # pooled union mask [B,N] (live)
    shifts: list[Shift]

    def reals(self, which: tuple[str, ...]) -> list[Tensor]:
        table = {"autoenc": self.x_ae, "comp_zero": self.comp_zero}
        return [table[k].detach() for k in which]

    def fakes_detached(self, which: tuple[str, ...]) -> list[Tensor]:
        table = {"comp_shift": self.comp_shift, "copy_paste": self.copy_paste}
        return [table[k].detach() for k in which]


def build_training_batch(x: Tensor, segmenter: SegmenterHead, mae: TinyMAE,
                         delta: float, rng: np.random.Generator,
                         inpaint_mode: str = "full",
                         shift_after_autoencode: bool = True,
                         training: bool = True,
                         update_stats: bool = True) -> CompositeSet:
    """Run the full Fig.-style composition pipeline for one batch.

    The segmenter mask is predicted from frozen encoder features; one shift is
    drawn per sample.  Only ``comp_shift`` backpropagates into the segmenter.
    """
    if not mae.frozen:
        raise ValueError("the inpainter must be frozen during adversarial "
                         "training")
    B, _, H, W = x.shape
    with T.no_grad():
        feats = features_to_grid(mae.features(x), mae.config.grid)
    m = segmenter.forward(feats, training=training, update_stats=update_stats)
    shifts = [sample_shift(delta, H, W, rng) for _ in range(B)]
    m_shift = shift_batch(m, shifts)
    u = union_mask(m, m_shift)
    m_hat = downsample_mask(u, mae.config.patch, "max")
    b_hat = inpaint_background(x, m_hat, mae, mode=inpaint_mode)
    with T.no_grad():
        if inpaint_mode == "compose":
            # sparse-reconstruction inpainters never saw full images, so the
            # discriminator compares against real pixels, not autoencodings
            x_ae = x.detach()
        elif shift_after_autoencode:
            x_ae = mae.autoencode(x)
        else:
            x_ae = mae.autoencode(x)  # same batch; flag kept for the variant
    if not shift_after_autoencode:
        # variant reading: autoencode the shifted image instead
        with T.no_grad():
            x_ae_for_shift = mae.autoencode(shift_batch(x.detach(), shifts))
        m_s3 = _mask3(m_shift)
        comp_shift = m_s3 * x_ae_for_shift + (1.0 - m_s3) * b_hat
    else:
        comp_shift = compose_shifted(x_ae, m, shifts, b_hat)
    m_det = m.detach()
    zero = [Shift(0, 0)] * B
    comp_zero = compose_shifted(x_ae.detach(), m_det, zero, b_hat.detach())
    copy_paste = compose_copy_paste(x_ae.detach(), m_det, shifts)
    return CompositeSet(x=x, x_ae=x_ae, b_hat=b_hat, comp_shift=comp_shift,
                        comp_zero=comp_zero, copy_paste=copy_paste, m=m,
                        m_shift=m_shift, m_hat=m_hat, shifts=shifts)
