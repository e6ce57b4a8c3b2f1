"""Dense tensors with reverse-mode automatic differentiation.

Every numeric operation used by the models, losses and compositing code lives
here.  Tensors wrap a numpy array; operations record nodes on a tape and
``backward`` replays the tape in reverse.  float32 is the working precision,
float64 is used by the finite-difference gradient checker.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import erf as _erf

__all__ = [
    "Tensor",
    "Tape",
    "tape",
    "no_grad",
    "backward",
    "grad_check",
    "add", "sub", "mul", "div", "minimum", "maximum",
    "matmul", "conv2d", "pool2d", "upsample_nearest2x",
    "sigmoid", "leaky_relu", "gelu", "softmax",
    "batchnorm2d", "layernorm", "BatchNormState",
    "tsum", "tmean", "reshape", "transpose", "tile", "concat",
    "clamp", "exp", "log", "shift2d", "shift2d_batch",
    "gather_tokens", "scatter_tokens",
]

DEFAULT_DTYPE = np.float32


class Tape:
    """Ordered record of operations; inputs always precede their consumers."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.closed = False


class _Node:
    __slots__ = ("inputs", "out", "bwd")

    def __init__(self, inputs, out, bwd):
        self.inputs = inputs
        self.out = out
        self.bwd = bwd


_current_tape: Optional[Tape] = Tape()
_grad_enabled = True


@contextlib.contextmanager
def tape():
    """Run ops on a fresh tape (freed on exit), e.g. one per training step.

    The record is dropped eagerly on exit — it forms reference cycles with
    its tensors, and waiting for the cycle collector fragments the heap
    during long trainings.  ``backward`` must run inside the block.
    """
    global _current_tape
    prev = _current_tape
    t = Tape()
    _current_tape = t
    try:
        yield t
    finally:
        _current_tape = prev
        t.nodes.clear()
        t.closed = True


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_leaf", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._leaf = True
        self._tape: Optional[Tape] = None

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        t = Tensor(self.data, requires_grad=False)
        return t

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operators -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


# -- recording helpers -------------------------------------------------------

def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(inputs: Sequence[Tensor], out_data: np.ndarray,
            bwd: Callable) -> Tensor:
    """Create the output tensor and, when grads are live, a tape node.

    ``bwd(g, needs)`` must return one gradient array (or None) per input;
    ``needs[i]`` tells it whether input i's gradient is actually required.
    """
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.requires_grad = _grad_enabled and any(t.requires_grad for t in inputs)
    out._leaf = not out.requires_grad
    out._tape = None
    if out.requires_grad and _current_tape is not None:
        out._tape = _current_tape
        _current_tape.nodes.append(_Node(tuple(inputs), out, bwd))
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``.

    Repeated calls accumulate into ``grad``.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    t = loss._tape
    if t is not None and t.closed:
        raise ValueError("tape already freed; call backward inside the "
                         "tape() context that built the loss")
    if t is None:
        if loss.requires_grad and loss._leaf:
            g = np.ones_like(loss.data)
            loss.grad = g if loss.grad is None else loss.grad + g
            return
        raise ValueError("loss is not attached to a tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(t.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        needs = tuple(inp.requires_grad for inp in node.inputs)
        in_grads = node.bwd(g, needs)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp._leaf:
                inp.grad = gi if inp.grad is None else inp.grad + gi
            else:
                k = id(inp)
                if k in grads:
                    grads[k] = grads[k] + gi
                else:
                    grads[k] = gi


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise -------------------------------------------------------------

def _check_elementwise(a: Tensor, b) -> tuple[Tensor, Optional[Tensor]]:
    a = _as_tensor(a)
    if isinstance(b, (int, float, np.floating, np.integer)):
        return a, None
    b = _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"elementwise shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def add(a, b):
    if not isinstance(a, Tensor):
        a, b = b, a
    a, bt = _check_elementwise(a, b)
    if bt is None:
        return _record([a], a.data + a.data.dtype.type(b),
                       lambda g, needs: (g,))
    return _record([a, bt], a.data + bt.data, lambda g, needs: (g, g))


def sub(a, b):
    if not isinstance(a, Tensor):
        # scalar - tensor
        bt = _as_tensor(b)
        return _record([bt], bt.data.dtype.type(a) - bt.data,
                       lambda g, needs: (-g,))
    a, bt = _check_elementwise(a, b)
    if bt is None:
        return _record([a], a.data - a.data.dtype.type(b),
                       lambda g, needs: (g,))
    return _record([a, bt], a.data - bt.data, lambda g, needs: (g, -g))


def mul(a, b):
    if not isinstance(a, Tensor):
        a, b = b, a
    a, bt = _check_elementwise(a, b)
    if bt is None:
        s = a.data.dtype.type(b)
        return _record([a], a.data * s, lambda g, needs: (g * s,))
    ad, bd = a.data, bt.data
    return _record([a, bt], ad * bd,
                   lambda g, needs: (g * bd if needs[0] else None,
                                     g * ad if needs[1] else None))


def div(a, b):
    if not isinstance(a, Tensor):
        bt = _as_tensor(b)
        if np.any(bt.data == 0):
            raise ZeroDivisionError("division by zero in tensor divide")
        s = bt.data.dtype.type(a)
        out = s / bt.data
        bd = bt.data
        return _record([bt], out, lambda g, needs: (-g * s / (bd * bd),))
    a, btt = _check_elementwise(a, b)
    if btt is None:
        if b == 0:
            raise ZeroDivisionError("division by zero in tensor divide")
        s = a.data.dtype.type(b)
        return _record([a], a.data / s, lambda g, needs: (g / s,))
    if np.any(btt.data == 0):
        raise ZeroDivisionError("division by zero in tensor divide")
    ad, bd = a.data, btt.data
    out = ad / bd
    return _record([a, btt], out,
                   lambda g, needs: (g / bd if needs[0] else None,
                                     -g * ad / (bd * bd) if needs[1] else None))


def minimum(a, b):
    """Elementwise min; gradient routes to the selected argument, ties to a."""
    a, bt = _check_elementwise(_as_tensor(a), b)
    if bt is None:
        bt = Tensor(np.full_like(a.data, b))
    take_a = a.data <= bt.data
    out = np.where(take_a, a.data, bt.data)
    return _record([a, bt], out,
                   lambda g, needs: (np.where(take_a, g, 0) if needs[0] else None,
                                     np.where(take_a, 0, g) if needs[1] else None))


def maximum(a, b):
    """Elementwise max; gradient routes to the selected argument, ties to a."""
    a, bt = _check_elementwise(_as_tensor(a), b)
    if bt is None:
        bt = Tensor(np.full_like(a.data, b))
    take_a = a.data >= bt.data
    out = np.where(take_a, a.data, bt.data)
    return _record([a, bt], out,
                   lambda g, needs: (np.where(take_a, g, 0) if needs[0] else None,
                                     np.where(take_a, 0, g) if needs[1] else None))


def power(a, p):
    a = _as_tensor(a)
    p = float(p)
    out = a.data ** p
    ad = a.data
    return _record([a], out, lambda g, needs: (g * p * ad ** (p - 1.0),))


def exp(a):
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _record([a], out, lambda g, needs: (g * out,))


def log(a):
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("log of non-positive value")
    ad = a.data
    return _record([a], np.log(ad), lambda g, needs: (g / ad,))


def clamp(a, lo: float, hi: float):
    """Clamp to [lo, hi]; gradient is 1 inside (inclusive), 0 outside."""
    a = _as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    out = np.clip(a.data, lo, hi)
    return _record([a], out, lambda g, needs: (np.where(inside, g, 0),))


# -- linear algebra ----------------------------------------------------------

def _swap_last(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs at least 2-D operands")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dims mismatch: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)
    ad, bd = a.data, b.data

    def bwd(g, needs):
        da = db = None
        if needs[0]:
            da = _unbroadcast(np.matmul(g, _swap_last(bd)), ad.shape)
        if needs[1]:
            db = _unbroadcast(np.matmul(_swap_last(ad), g), bd.shape)
        return da, db

    return _record([a, b], out, bwd)


# -- conv / pool / upsample --------------------------------------------------

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int):
    # xp: [B, C, Hp, Wp] padded input -> [B, C, Ho, Wo, kh, kw] view
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0):
    """Cross-correlation with zero padding.

    x: [B, Cin, H, W], w: [Cout, Cin, kh, kw], b: [Cout] or None.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError("conv2d expects 4-D input and kernel")
    B, Cin, H, W = x.shape
    Cout, Cin_w, kh, kw = w.shape
    if Cin != Cin_w:
        raise ValueError(f"conv2d channel mismatch: input {Cin}, kernel {Cin_w}")
    for name, dim, k in (("H", H, kh), ("W", W, kw)):
        num = dim + 2 * padding - k
        if num < 0 or num % stride != 0:
            raise ValueError(f"conv2d non-integer output size along {name}")
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    cols = _im2col(xp, kh, kw, stride)                       # [B,C,Ho,Wo,kh,kw]
    cols2 = np.ascontiguousarray(cols.transpose(0, 2, 3, 1, 4, 5)) \
        .reshape(B * Ho * Wo, Cin * kh * kw)
    wmat = w.data.reshape(Cout, Cin * kh * kw)
    out = (cols2 @ wmat.T).reshape(B, Ho, Wo, Cout).transpose(0, 3, 1, 2)
    inputs = [x, w]
    bt = None
    if b is not None:
        bt = _as_tensor(b)
        if bt.shape != (Cout,):
            raise ValueError("conv2d bias must have shape [Cout]")
        out = out + bt.data[None, :, None, None]
        inputs.append(bt)
    out = np.ascontiguousarray(out)

    def bwd(g, needs):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)) \
            .reshape(B * Ho * Wo, Cout)
        dx = dw = db = None
        if needs[0]:
            if stride == 1 and padding < kh and padding < kw:
                # transposed convolution as one im2col matmul: full
                # correlation of the padded gradient with the rotated kernel
                ph, pw = kh - 1 - padding, kw - 1 - padding
                gp = np.pad(g, ((0, 0), (0, 0), (ph, ph), (pw, pw))) \
                    if ph or pw else g
                wrot = w.data[:, :, ::-1, ::-1]
                wmat2 = np.ascontiguousarray(wrot.transpose(1, 0, 2, 3)) \
                    .reshape(Cin, Cout * kh * kw)
                gcols = np.ascontiguousarray(
                    _im2col(gp, kh, kw, 1).transpose(0, 2, 3, 1, 4, 5)) \
                    .reshape(B * H * W, Cout * kh * kw)
                dx = (gcols @ wmat2.T).reshape(B, H, W, Cin) \
                    .transpose(0, 3, 1, 2)
            else:
                dcols2 = g2 @ wmat                           # [BHoWo, C*kh*kw]
                dcols = dcols2.reshape(B, Ho, Wo, Cin, kh, kw)
                dxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, i:i + stride * Ho:stride,
                            j:j + stride * Wo:stride] += \
                            dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                dx = dxp[:, :, padding:padding + H, padding:padding + W] \
                    if padding else dxp
        if needs[1]:
            dw = (g2.T @ cols2).reshape(Cout, Cin, kh, kw)
        if bt is not None and needs[2]:
            db = g.sum(axis=(0, 2, 3))
        grads = [dx, dw]
        if bt is not None:
            grads.append(db)
        return grads

    return _record(inputs, out, bwd)


def pool2d(x, k: int, kind: str = "max"):
    """Non-overlapping k x k pooling (stride == k).

    max records the argmax per window (ties -> first in row-major order);
    avg backward distributes 1/k^2.
    """
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ValueError("pool2d expects [B, C, H, W]")
    B, C, H, W = x.shape
    if H % k or W % k:
        raise ValueError(f"pool2d dims {H}x{W} not divisible by {k}")
    Ho, Wo = H // k, W // k
    win = x.data.reshape(B, C, Ho, k, Wo, k).transpose(0, 1, 2, 4, 3, 5) \
        .reshape(B, C, Ho, Wo, k * k)
    if kind == "max":
        am = np.argmax(win, axis=-1)
        out = np.take_along_axis(win, am[..., None], axis=-1)[..., 0]

        def bwd(g, needs):
            dwin = np.zeros((B, C, Ho, Wo, k * k), dtype=g.dtype)
            np.put_along_axis(dwin, am[..., None], g[..., None], axis=-1)
            dx = dwin.reshape(B, C, Ho, Wo, k, k).transpose(0, 1, 2, 4, 3, 5) \
                .reshape(B, C, H, W)
            return (dx,)

        return _record([x], np.ascontiguousarray(out), bwd)
    elif kind == "avg":
        out = win.mean(axis=-1)

        def bwd(g, needs):
            dwin = np.broadcast_to(g[..., None] / (k * k),
                                   (B, C, Ho, Wo, k * k))
            dx = dwin.reshape(B, C, Ho, Wo, k, k).transpose(0, 1, 2, 4, 3, 5) \
                .reshape(B, C, H, W)
            return (np.ascontiguousarray(dx),)

        return _record([x], np.ascontiguousarray(out), bwd)
    raise ValueError(f"unknown pool kind {kind!r}")


def upsample_nearest2x(x):
    """Replicate each pixel into a 2x2 block; backward sums the 4 gradients."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ValueError("upsample_nearest2x expects [B, C, H, W]")
    B, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bwd(g, needs):
        return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return _record([x], out, bwd)


# -- activations -------------------------------------------------------------

_SIG_EPS = 1e-6


def sigmoid(x):
    x = _as_tensor(x)
    s = np.where(x.data >= 0,
                 1.0 / (1.0 + np.exp(-np.abs(x.data))),
                 np.exp(-np.abs(x.data)) / (1.0 + np.exp(-np.abs(x.data))))
    s = np.clip(s, _SIG_EPS, 1.0 - _SIG_EPS).astype(x.dtype)
    return _record([x], s, lambda g, needs: (g * s * (1.0 - s),))


def leaky_relu(x, slope: float = 0.01):
    x = _as_tensor(x)
    pos = x.data >= 0
    out = np.where(pos, x.data, slope * x.data)
    return _record([x], out, lambda g, needs: (np.where(pos, g, slope * g),))


def gelu(x):
    x = _as_tensor(x)
    xd = x.data
    cdf = 0.5 * (1.0 + _erf(xd / math.sqrt(2.0)))
    out = (xd * cdf).astype(x.dtype)

    def bwd(g, needs):
        pdf = np.exp(-0.5 * xd * xd) / math.sqrt(2.0 * math.pi)
        return (g * (cdf + xd * pdf),)

    return _record([x], out, bwd)


def softmax(x, axis: int = -1):
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bwd(g, needs):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _record([x], s, bwd)


# -- normalization -----------------------------------------------------------

class BatchNormState:
    """Running statistics for one batchnorm layer (not learned parameters)."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5,
                 dtype=DEFAULT_DTYPE):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps


def batchnorm2d(x, gamma, beta, state: BatchNormState, training: bool,
                update_stats: bool = True):
    """Per-channel batchnorm over batch+spatial dims of [B, C, H, W]."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.ndim != 4:
        raise ValueError("batchnorm2d expects [B, C, H, W]")
    B, C, H, W = x.shape
    eps = state.eps
    gd = gamma.data[None, :, None, None]
    if training:
        if B < 2:
            raise ValueError("batchnorm2d train mode requires batch >= 2")
        n = B * H * W
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if update_stats:
            m = state.momentum
            unbiased = var * n / max(n - 1, 1)
            state.running_mean = ((1 - m) * state.running_mean
                                  + m * mean).astype(state.running_mean.dtype)
            state.running_var = ((1 - m) * state.running_var
                                 + m * unbiased).astype(state.running_var.dtype)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]
        out = xhat * gd + beta.data[None, :, None, None]

        def bwd(g, needs):
            dx = dgamma = dbeta = None
            if needs[2]:
                dbeta = g.sum(axis=(0, 2, 3))
            if needs[1]:
                dgamma = (g * xhat).sum(axis=(0, 2, 3))
            if needs[0]:
                gh = g * gd
                mean_gh = gh.mean(axis=(0, 2, 3), keepdims=True)
                mean_ghx = (gh * xhat).mean(axis=(0, 2, 3), keepdims=True)
                dx = (gh - mean_gh - xhat * mean_ghx) * inv[None, :, None, None]
            return dx, dgamma, dbeta

        return _record([x, gamma, beta], out.astype(x.dtype), bwd)
    else:
        inv = 1.0 / np.sqrt(state.running_var + eps)
        xhat = (x.data - state.running_mean[None, :, None, None]) \
            * inv[None, :, None, None]
        out = xhat * gd + beta.data[None, :, None, None]

        def bwd(g, needs):
            dx = dgamma = dbeta = None
            if needs[2]:
                dbeta = g.sum(axis=(0, 2, 3))
            if needs[1]:
                dgamma = (g * xhat).sum(axis=(0, 2, 3))
            if needs[0]:
                dx = g * gd * inv[None, :, None, None]
            return dx, dgamma, dbeta

        return _record([x, gamma, beta], out.astype(x.dtype), bwd)


def layernorm(x, gamma, beta, eps: float = 1e-5):
    """Normalize over the last (feature) dimension."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv
    out = xhat * gamma.data + beta.data
    d = x.shape[-1]

    def bwd(g, needs):
        dx = dgamma = dbeta = None
        if needs[2]:
            dbeta = g.reshape(-1, d).sum(axis=0)
        if needs[1]:
            dgamma = (g * xhat).reshape(-1, d).sum(axis=0)
        if needs[0]:
            gh = g * gamma.data
            mean_gh = gh.mean(axis=-1, keepdims=True)
            mean_ghx = (gh * xhat).mean(axis=-1, keepdims=True)
            dx = (gh - mean_gh - xhat * mean_ghx) * inv
        return dx, dgamma, dbeta

    return _record([x, gamma, beta], out.astype(x.dtype), bwd)


# -- reductions and shape ops ------------------------------------------------

def tsum(x, axis=None, keepdims: bool = False):
    x = _as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)
    shape = x.shape

    def bwd(g, needs):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shape).copy(),)

    return _record([x], np.asarray(out), bwd)


def tmean(x, axis=None, keepdims: bool = False):
    x = _as_tensor(x)
    if axis is None:
        n = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for a in axes:
            n *= x.shape[a]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x, shape):
    x = _as_tensor(x)
    old = x.shape
    out = x.data.reshape(shape)
    return _record([x], out, lambda g, needs: (g.reshape(old),))


def transpose(x, axes):
    x = _as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _record([x], out,
                   lambda g, needs: (np.ascontiguousarray(g.transpose(inv)),))


def tile(x, reps):
    """np.tile semantics; backward sums over the repeats."""
    x = _as_tensor(x)
    reps = tuple(reps)
    if len(reps) != x.ndim:
        raise ValueError("tile reps must match tensor rank")
    out = np.tile(x.data, reps)
    shape = x.shape

    def bwd(g, needs):
        inter = []
        for r, s in zip(reps, shape):
            inter.extend([r, s])
        gg = g.reshape(inter)
        return (gg.sum(axis=tuple(range(0, 2 * len(shape), 2))),)

    return _record([x], out, bwd)


def concat(tensors: Iterable[Tensor], axis: int = 0):
    ts = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g, needs):
        grads = []
        for i in range(len(ts)):
            if needs[i]:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(offsets[i], offsets[i + 1])
                grads.append(np.ascontiguousarray(g[tuple(sl)]))
            else:
                grads.append(None)
        return grads

    return _record(ts, out, bwd)


# -- spatial shift (zero fill outside the domain) ----------------------------

def shift2d(x, dy: int, dx: int):
    """out[..., i, j] = x[..., i+dy, j+dx]; out-of-bounds reads yield 0."""
    x = _as_tensor(x)
    H, W = x.shape[-2], x.shape[-1]

    def do_shift(arr, dy, dx):
        out = np.zeros_like(arr)
        ys = slice(max(0, -dy), min(H, H - dy))
        yr = slice(max(0, dy), min(H, H + dy))
        xs = slice(max(0, -dx), min(W, W - dx))
        xr = slice(max(0, dx), min(W, W + dx))
        if yr.start < yr.stop and xr.start < xr.stop:
            out[..., ys, xs] = arr[..., yr, xr]
        return out

    out = do_shift(x.data, dy, dx)
    return _record([x], out, lambda g, needs: (do_shift(g, -dy, -dx),))


def shift2d_batch(x, dys: Sequence[int], dxs: Sequence[int]):
    """Per-sample spatial shift of [B, ..., H, W]; zero fill outside."""
    x = _as_tensor(x)
    B = x.shape[0]
    if len(dys) != B or len(dxs) != B:
        raise ValueError("one (dy, dx) pair per batch element required")
    H, W = x.shape[-2], x.shape[-1]

    def do_shift(arr, dy, dx):
        out = np.zeros_like(arr)
        ys = slice(max(0, -dy), min(H, H - dy))
        yr = slice(max(0, dy), min(H, H + dy))
        xs = slice(max(0, -dx), min(W, W - dx))
        xr = slice(max(0, dx), min(W, W + dx))
        if yr.start < yr.stop and xr.start < xr.stop:
            out[..., ys, xs] = arr[..., yr, xr]
        return out

    out = np.stack([do_shift(x.data[i], int(dys[i]), int(dxs[i]))
                    for i in range(B)])

    def bwd(g, needs):
        return (np.stack([do_shift(g[i], -int(dys[i]), -int(dxs[i]))
                          for i in range(B)]),)

    return _record([x], out, bwd)


# -- token gather/scatter (for the masked-autoencoder sparse path) -----------

def gather_tokens(x, idx: np.ndarray):
    """x: [B, N, d], idx: [B, K] int -> [B, K, d] with out[b,i] = x[b, idx[b,i]]."""
    x = _as_tensor(x)
    B, N, d = x.shape
    idx = np.asarray(idx)
    if idx.ndim != 2 or idx.shape[0] != B:
        raise ValueError("gather_tokens index must be [B, K]")
    if idx.min() < 0 or idx.max() >= N:
        raise IndexError("gather_tokens index out of range")
    out = np.take_along_axis(x.data, idx[:, :, None], axis=1)

    def bwd(g, needs):
        dx = np.zeros((B, N, d), dtype=g.dtype)
        np.add.at(dx, (np.arange(B)[:, None], idx), g)
        return (dx,)

    return _record([x], np.ascontiguousarray(out), bwd)


def scatter_tokens(rows, idx: np.ndarray, n: int):
    """rows: [B, K, d] -> [B, n, d] with rows placed at idx, zeros elsewhere."""
    rows = _as_tensor(rows)
    B, K, d = rows.shape
    idx = np.asarray(idx)
    if idx.ndim != 2 or idx.shape != (B, K):
        raise ValueError("scatter_tokens index must be [B, K]")
    if idx.min() < 0 or idx.max() >= n:
        raise IndexError("scatter_tokens index out of range")
    out = np.zeros((B, n, d), dtype=rows.dtype)
    out[np.arange(B)[:, None], idx] = rows.data

    def bwd(g, needs):
        return (np.take_along_axis(g, idx[:, :, None], axis=1),)

    return _record([rows], out, bwd)


# -- gradient checking -------------------------------------------------------

def grad_check(fn: Callable[[Tensor], Tensor], x: Tensor,
               eps: float = 1e-5) -> float:
    """Compare autodiff gradients of scalar-valued ``fn`` to central differences.

    Returns the max relative error with denominator max(|a|, |b|, 1e-8).
    ``x`` should be float64 and ``fn`` smooth at ``x``.
    """
    with tape():
        y = fn(x)
        if y.size != 1:
            raise ValueError("grad_check needs a scalar-valued function")
        x.zero_grad()
        backward(y)
        analytic = np.zeros(x.size) if x.grad is None else x.grad.reshape(-1).copy()
    flat = x.data.reshape(-1)
    numeric = np.zeros(x.size)
    with no_grad():
        for i in range(x.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = fn(x).item()
            flat[i] = orig - eps
            fm = fn(x).item()
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
