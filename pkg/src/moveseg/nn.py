"""Model architectures: patch transformer autoencoder (the inpainter),
the upsampling segmenter head, and the convolutional discriminator."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Model:
    """Minimal named-parameter container shared by all networks."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.bn_states: dict[str, T.BatchNormState] = {}

    def add_param(self, name: str, array: np.ndarray) -> Tensor:
        t = Tensor(array.astype(np.float32), requires_grad=True)
        self.params[name] = t
        return t

    def add_bn(self, name: str, channels: int) -> None:
        st = T.BatchNormState(channels)
        self.bn_states[name] = st
        self.add_param(name + ".gamma", np.ones(channels))
        self.add_param(name + ".beta", np.zeros(channels))

    def freeze(self) -> None:
        for p in self.params.values():
            p.requires_grad = False

    @property
    def frozen(self) -> bool:
        return all(not p.requires_grad for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def param_checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()

    def state(self) -> dict[str, np.ndarray]:
        out = {f"param:{k}": v.data for k, v in self.params.items()}
        out.update({f"buffer:{k}": v for k, v in self.buffers.items()})
        for k, st in self.bn_states.items():
            out[f"buffer:{k}.running_mean"] = st.running_mean
            out[f"buffer:{k}.running_var"] = st.running_var
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            kind, name = k.split(":", 1)
            if kind == "param":
                p = self.params[name]
                if p.data.shape != v.shape:
                    raise ValueError(f"shape mismatch for {name}: "
                                     f"{p.data.shape} vs {v.shape}")
                p.data = v.astype(np.float32).copy()
            else:
                if name.endswith(".running_mean"):
                    self.bn_states[name[:-len(".running_mean")]] \
                        .running_mean = v.astype(np.float32).copy()
                elif name.endswith(".running_var"):
                    self.bn_states[name[:-len(".running_var")]] \
                        .running_var = v.astype(np.float32).copy()
                else:
                    self.buffers[name] = v.copy()


# -- patch <-> token layout --------------------------------------------------

def patchify(x: Tensor, patch: int) -> Tensor:
    """Split [B,3,H,W] (or [3,H,W]) into row-major tiles [B,N,patch*patch*3].

    Inverse of :func:`unpatchify`, bitwise.
    """
    squeeze = x.ndim == 3
    if squeeze:
        x = T.reshape(x, (1,) + tuple(x.shape))
    B, C, H, W = x.shape
    if H % patch or W % patch:
        raise ValueError(f"image dims {H}x{W} not divisible by patch {patch}")
    h, w = H // patch, W // patch
    t = T.reshape(x, (B, C, h, patch, w, patch))
    t = T.transpose(t, (0, 2, 4, 1, 3, 5))           # [B,h,w,C,p,p]
    t = T.reshape(t, (B, h * w, C * patch * patch))
    return T.reshape(t, (h * w, C * patch * patch)) if squeeze else t


def unpatchify(tokens: Tensor, patch: int, H: int, W: int) -> Tensor:
    """Reassemble row-major tiles back into [B,3,H,W] (or [3,H,W])."""
    squeeze = tokens.ndim == 2
    if squeeze:
        tokens = T.reshape(tokens, (1,) + tuple(tokens.shape))
    B, N, D = tokens.shape
    h, w = H // patch, W // patch
    C = D // (patch * patch)
    t = T.reshape(tokens, (B, h, w, C, patch, patch))
    t = T.transpose(t, (0, 3, 1, 4, 2, 5))           # [B,C,h,p,w,p]
    t = T.reshape(t, (B, C, H, W))
    return T.reshape(t, (C, H, W)) if squeeze else t


def sinusoidal_positions(n: int, dim: int) -> np.ndarray:
    """Fixed sine/cosine position table [n, dim]."""
    pos = np.arange(n)[:, None]
    i = np.arange(dim // 2)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / dim)
    out = np.zeros((n, dim), dtype=np.float32)
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle)
    return out


# -- tiny masked autoencoder -------------------------------------------------

@dataclass
class MAEConfig:
    image_size: int = 64
    patch: int = 8
    dim: int = 64
    enc_blocks: int = 4
    dec_blocks: int = 2
    heads: int = 4
    mlp_ratio: int = 2

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def tokens(self) -> int:
        return self.grid * self.grid


class TinyMAE(Model):
    """Patch transformer autoencoder with a learned MSK token.

    Trained to reconstruct masked patches; used frozen as a differentiable
    inpainter afterwards.
    """

    def __init__(self, config: MAEConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        c = config
        pdim = c.patch * c.patch * 3

        def lin(name, fan_in, fan_out):
            self.add_param(name + ".w",
                           rng.normal(0, 0.02, size=(fan_in, fan_out)))
            self.add_param(name + ".b", np.zeros(fan_out))

        def ln(name, d):
            self.add_param(name + ".gamma", np.ones(d))
            self.add_param(name + ".beta", np.zeros(d))

        lin("patch_proj", pdim, c.dim)
        for side, nblocks in (("enc", c.enc_blocks), ("dec", c.dec_blocks)):
            for i in range(nblocks):
                pre = f"{side}{i}"
                ln(pre + ".ln1", c.dim)
                lin(pre + ".q", c.dim, c.dim)
                lin(pre + ".k", c.dim, c.dim)
                lin(pre + ".v", c.dim, c.dim)
                lin(pre + ".proj", c.dim, c.dim)
                ln(pre + ".ln2", c.dim)
                lin(pre + ".fc1", c.dim, c.dim * c.mlp_ratio)
                lin(pre + ".fc2", c.dim * c.mlp_ratio, c.dim)
            ln(side + "_norm", c.dim)
        lin("out_proj", c.dim, pdim)
        self.add_param("msk_token", rng.normal(0, 0.02, size=c.dim))
        self.buffers["pos"] = sinusoidal_positions(c.tokens, c.dim)

    # -- building blocks -----------------------------------------------------
    def _linear(self, x: Tensor, name: str) -> Tensor:
        w, b = self.params[name + ".w"], self.params[name + ".b"]
        out = T.matmul(x, w)
        bb = T.reshape(b, (1, 1, b.shape[0]))
        return out + T.tile(bb, (out.shape[0], out.shape[1], 1))

    def _ln(self, x: Tensor, name: str) -> Tensor:
        return T.layernorm(x, self.params[name + ".gamma"],
                           self.params[name + ".beta"])

    def _attention(self, x: Tensor, pre: str) -> Tensor:
        B, N, d = x.shape
        h = self.config.heads
        dh = d // h

        def split_heads(t):
            return T.transpose(T.reshape(t, (B, N, h, dh)), (0, 2, 1, 3))

        q = split_heads(self._linear(x, pre + ".q"))
        k = split_heads(self._linear(x, pre + ".k"))
        v = split_heads(self._linear(x, pre + ".v"))
        att = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
        att = T.softmax(att, axis=-1)
        out = T.matmul(att, v)
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (B, N, d))
        return self._linear(out, pre + ".proj")

    def _block(self, x: Tensor, pre: str) -> Tensor:
        x = x + self._attention(self._ln(x, pre + ".ln1"), pre)
        h = self._linear(T.gelu(self._linear(self._ln(x, pre + ".ln2"),
                                             pre + ".fc1")), pre + ".fc2")
        return x + h

    # -- encoder / decoder ---------------------------------------------------
    def _pos(self, B: int, idx: np.ndarray | None = None) -> Tensor:
        pos = self.buffers["pos"]
        if idx is None:
            arr = np.broadcast_to(pos[None], (B, pos.shape[0], pos.shape[1]))
        elif idx.ndim == 1:
            arr = np.broadcast_to(pos[idx][None], (B, len(idx), pos.shape[1]))
        else:
            arr = pos[idx]
        return Tensor(np.ascontiguousarray(arr))

    def encode(self, image: Tensor, visible_indices: np.ndarray | None = None,
               upto_block: int | None = None) -> Tensor:
        """Embed patches, add positions, run encoder blocks.

        With ``visible_indices`` ([K] or [B,K]) only those token positions are
        processed; positions keep their original-index embeddings.  With
        ``upto_block=k`` the output of encoder block k is returned (no final
        norm), which is the feature tap for the segmenter.
        """
        if image.ndim == 3:
            image = T.reshape(image, (1,) + tuple(image.shape))
        B = image.shape[0]
        c = self.config
        tokens = patchify(image, c.patch)
        x = self._linear(tokens, "patch_proj")
        if visible_indices is not None:
            idx = np.asarray(visible_indices)
            if idx.size == 0:
                raise ValueError("empty visible set")
            if idx.min() < 0 or idx.max() >= c.tokens:
                raise IndexError("visible index out of range")
            if idx.ndim == 1:
                idx2 = np.broadcast_to(idx[None], (B, len(idx)))
            else:
                idx2 = idx
            x = T.gather_tokens(x, np.ascontiguousarray(idx2))
            x = x + self._pos(B, idx)
        else:
            x = x + self._pos(B)
        nblocks = c.enc_blocks if upto_block is None else upto_block + 1
        for i in range(nblocks):
            x = self._block(x, f"enc{i}")
        if upto_block is not None:
            return x
        return self._ln(x, "enc_norm")

    def features(self, image: Tensor) -> Tensor:
        """Per-token features for the segmenter: penultimate block output."""
        return self.encode(image, upto_block=self.config.enc_blocks - 2)

    def decode(self, tokens: Tensor) -> Tensor:
        """Decoder blocks -> output projection -> image in [0,1]."""
        if tokens.ndim == 2:
            tokens = T.reshape(tokens, (1,) + tuple(tokens.shape))
        B, N, d = tokens.shape
        c = self.config
        if N != c.tokens:
            raise ValueError(f"decode expects {c.tokens} tokens, got {N}")
        x = tokens + self._pos(B)
        for i in range(c.dec_blocks):
            x = self._block(x, f"dec{i}")
        x = self._ln(x, "dec_norm")
        x = self._linear(x, "out_proj")
        img = unpatchify(x, c.patch, c.image_size, c.image_size)
        return T.clamp(img, 0.0, 1.0)

    def autoencode(self, image: Tensor) -> Tensor:
        return self.decode(self.encode(image))


def features_to_grid(tokens: Tensor, grid: int) -> Tensor:
    """[B,N,d] row-major tokens -> [B,d,grid,grid] feature map."""
    B, N, d = tokens.shape
    t = T.reshape(tokens, (B, grid, grid, d))
    return T.transpose(t, (0, 3, 1, 2))


# -- segmenter head ----------------------------------------------------------

@dataclass
class SegmenterConfig:
    in_dim: int = 64
    channels: tuple[int, ...] = (48, 32, 24)   # one entry per upsampling stage
    deep: bool = False
    leaky_slope: float = 0.01


class SegmenterHead(Model):
    """Alternating nearest-2x upsampling and conv blocks, then a 1x1 conv and
    a sigmoid; output resolution = input grid * 2**len(channels)."""

    def __init__(self, config: SegmenterConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        chans = [config.in_dim, *config.channels, config.channels[-1]]
        self.n_blocks = len(chans) - 1           # last one has no upsampling
        for i in range(self.n_blocks):
            self._add_block(f"block{i}", chans[i], chans[i + 1], rng)
        cl = chans[-1]
        self.add_param("head.w", rng.normal(0, math.sqrt(2.0 / cl),
                                            size=(1, cl, 1, 1)))
        self.add_param("head.b", np.zeros(1))

    def _add_block(self, name: str, cin: int, cout: int,
                   rng: np.random.Generator) -> None:
        def conv(sub, ci, co):
            std = math.sqrt(2.0 / (ci * 9))
            self.add_param(f"{name}.{sub}.w",
                           rng.normal(0, std, size=(co, ci, 3, 3)))
            self.add_param(f"{name}.{sub}.b", np.zeros(co))
            self.add_bn(f"{name}.{sub}.bn", co)

        conv("conv1", cin, cout)
        if self.config.deep:
            conv("conv2", cout, cout)

    def _block(self, x: Tensor, name: str, training: bool,
               update_stats: bool) -> Tensor:
        def run(sub, t):
            t = T.conv2d(t, self.params[f"{name}.{sub}.w"],
                         self.params[f"{name}.{sub}.b"], padding=1)
            t = T.batchnorm2d(t, self.params[f"{name}.{sub}.bn.gamma"],
                              self.params[f"{name}.{sub}.bn.beta"],
                              self.bn_states[f"{name}.{sub}.bn"],
                              training, update_stats)
            return T.leaky_relu(t, self.config.leaky_slope)

        x = run("conv1", x)
        if self.config.deep:
            x = run("conv2", x)
        return x

    def forward(self, features: Tensor, training: bool = False,
                update_stats: bool = True) -> Tensor:
        """[B,d,h,w] feature grid -> soft mask [B,H,W] in (0,1)."""
        if features.ndim != 4 or features.shape[1] != self.config.in_dim:
            raise ValueError(f"expected [B,{self.config.in_dim},h,w] features, "
                             f"got {features.shape}")
        x = features
        for i in range(self.n_blocks):
            if i < self.n_blocks - 1:
                x = T.upsample_nearest2x(x)
            x = self._block(x, f"block{i}", training, update_stats)
        x = T.conv2d(x, self.params["head.w"], self.params["head.b"])
        m = T.sigmoid(x)
        B = m.shape[0]
        return T.reshape(m, (B, m.shape[2], m.shape[3]))


# -- discriminator -----------------------------------------------------------

@dataclass
class DiscriminatorConfig:
    image_size: int = 64
    channels: tuple[int, ...] = (24, 48, 96, 96)
    leaky_slope: float = 0.2


class Discriminator(Model):
    """Strided conv stack (4x4, stride 2) to a single scalar logit per image.

    Batchnorm everywhere except the first layer.
    """

    def __init__(self, config: DiscriminatorConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        chans = [3, *config.channels]
        size = config.image_size
        for i in range(len(config.channels)):
            std = math.sqrt(2.0 / (chans[i] * 16))
            self.add_param(f"conv{i}.w",
                           rng.normal(0, std, size=(chans[i + 1], chans[i], 4, 4)))
            self.add_param(f"conv{i}.b", np.zeros(chans[i + 1]))
            if i > 0:
                self.add_bn(f"conv{i}.bn", chans[i + 1])
            size //= 2
        feat = chans[-1] * size * size
        self.add_param("head.w", rng.normal(0, math.sqrt(1.0 / feat),
                                            size=(feat, 1)))
        self.add_param("head.b", np.zeros(1))

    def forward(self, images: Tensor, training: bool = False,
                update_stats: bool = True) -> Tensor:
        """[B,3,H,W] images in [0,1] -> logits [B]."""
        x = images
        for i in range(len(self.config.channels)):
            x = T.conv2d(x, self.params[f"conv{i}.w"],
                         self.params[f"conv{i}.b"], stride=2, padding=1)
            if i > 0:
                x = T.batchnorm2d(x, self.params[f"conv{i}.bn.gamma"],
                                  self.params[f"conv{i}.bn.beta"],
                                  self.bn_states[f"conv{i}.bn"],
                                  training, update_stats)
            x = T.leaky_relu(x, self.config.leaky_slope)
        B = x.shape[0]
        x = T.reshape(x, (B, x.shape[1] * x.shape[2] * x.shape[3]))
        logits = T.matmul(x, self.params["head.w"])
        b = self.params["head.b"]
        logits = logits + T.tile(T.reshape(b, (1, 1)), (B, 1))
        return T.reshape(logits, (B,))
