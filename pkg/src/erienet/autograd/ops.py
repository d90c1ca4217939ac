"""Differentiable operators over :class:`Tensor`.

Only the operators the network and the losses need. Layout is
batch-channel-height-width throughout and all padding is zero padding.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, as_tensor, make_result

_flops = threading.local()


@dataclass
class FlopCounter:
    total: int = 0
    by_op: dict[str, int] = field(default_factory=dict)

    def add(self, op: str, n: int) -> None:
        self.total += n
        self.by_op[op] = self.by_op.get(op, 0) + n


@contextmanager
def count_flops() -> Iterator[FlopCounter]:
    """Tally convolution-class flops executed on this thread."""
    prev = getattr(_flops, "counter", None)
    counter = FlopCounter()
    _flops.counter = counter
    try:
        yield counter
    finally:
        _flops.counter = prev


def _record(op: str, n: int) -> None:
    counter = getattr(_flops, "counter", None)
    if counter is not None:
        counter.add(op, int(n))


def _require_4d(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{op}: expected a 4-d (batch, channels, height, width) tensor, got shape {x.shape}")


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_result(
        a.data + b.data, (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_result(
        a.data - b.data, (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_result(
        a.data * b.data, (a, b),
        lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def back(g):
        gb = -g * out / b.data
        return unbroadcast(g / b.data, a.shape), unbroadcast(gb, b.shape)

    return make_result(out, (a, b), back, "div")


def square(x: Tensor) -> Tensor:
    return make_result(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return make_result(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(np.asarray(out, dtype=x.dtype), (x,), back, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = tuple(range(x.ndim)) if axis is None else (axis if isinstance(axis, tuple) else (axis,))
    n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# ---------------------------------------------------------------------------
# activations

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    # tanh form stays finite for large |x|
    s = (0.5 * (1.0 + np.tanh(0.5 * x.data))).astype(x.dtype)
    return make_result(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def clamp(x: Tensor, lo: float = 0.0, hi: float = 1.0) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return make_result(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clamp")


# ---------------------------------------------------------------------------
# convolutions

def _out_size(n: int, k: int, stride: int, pad: int, op: str, dim: str) -> int:
    m = (n + 2 * pad - k) // stride + 1
    if m < 1:
        raise ShapeError(f"{op}: {dim}={n} too small for kernel {k} with pad {pad}")
    return m


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (B,Cin,H,W) with ``weight`` (Cout,Cin,kh,kw)."""
    _require_4d(x, "conv2d")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d: weight must be 4-d (Cout, Cin, kh, kw), got {weight.shape}")
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d: need stride >= 1 and pad >= 0, got stride={stride} pad={pad}")
    B, C, H, W = x.shape
    O, Cw, kh, kw = weight.shape
    if C != Cw:
        raise ShapeError(f"conv2d: input channels {C} != weight in_channels {Cw}")
    if bias is not None and bias.shape != (O,):
        raise ShapeError(f"conv2d: bias length {bias.shape} != out_channels {O}")
    Ho = _out_size(H, kh, stride, pad, "conv2d", "height")
    Wo = _out_size(W, kw, stride, pad, "conv2d", "width")
    _record("conv2d", 2 * kh * kw * C * O * Ho * Wo * B + (O * Ho * Wo * B if bias is not None else 0))

    w2 = weight.data.reshape(O, C * kh * kw)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    if kh == 1 and kw == 1 and stride == 1 and pad == 0:
        xf = x.data.reshape(B, C, H * W)
        out = np.matmul(w2, xf).reshape(B, O, H, W)
        if bias is not None:
            out += bias.data[None, :, None, None]

        def back_pointwise(g):
            gf = g.reshape(B, O, H * W)
            gx = np.matmul(w2.T, gf).reshape(x.shape) if x.requires_grad else None
            gw = np.einsum("bop,bcp->oc", gf, xf).reshape(weight.shape) if weight.requires_grad else None
            gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
            return (gx, gw, gb)

        return make_result(out, inputs, back_pointwise, "conv2d")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    out = (cols @ w2.T).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def back(g):
        go = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        gw = (go.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        gx = None
        if x.requires_grad:
            gcols = (go @ w2).reshape(B, Ho, Wo, C, kh, kw)
            gxp = np.zeros(xp.shape, dtype=x.dtype)
            hs, ws = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + hs:stride, j:j + ws:stride] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad:pad + H, pad:pad + W] if pad else gxp
        return (gx, gw, gb)

    return make_result(out, inputs, back, "conv2d")


def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
                     pad: int = 0) -> Tensor:
    """Per-channel spatial cross-correlation; ``weight`` is (C,1,kh,kw)."""
    _require_4d(x, "depthwise_conv2d")
    B, C, H, W = x.shape
    if weight.ndim != 4 or weight.shape[0] != C or weight.shape[1] != 1:
        raise ShapeError(f"depthwise_conv2d: weight {weight.shape} does not match input channels {C}")
    _, _, kh, kw = weight.shape
    Ho = _out_size(H, kh, stride, pad, "depthwise_conv2d", "height")
    Wo = _out_size(W, kw, stride, pad, "depthwise_conv2d", "width")
    _record("depthwise_conv2d", 2 * kh * kw * C * Ho * Wo * B + (C * Ho * Wo * B if bias is not None else 0))

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    hs, ws = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
    w = weight.data[:, 0]
    out = np.zeros((B, C, Ho, Wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            out += w[None, :, i, j, None, None] * xp[:, :, i:i + hs:stride, j:j + ws:stride]
    if bias is not None:
        out += bias.data[None, :, None, None]

    def back(g):
        gw = np.zeros_like(weight.data) if weight.requires_grad else None
        gxp = np.zeros(xp.shape, dtype=x.dtype) if x.requires_grad else None
        for i in range(kh):
            for j in range(kw):
                sl = (slice(None), slice(None), slice(i, i + hs, stride), slice(j, j + ws, stride))
                if gw is not None:
                    gw[:, 0, i, j] = np.einsum("bchw,bchw->c", g, xp[sl])
                if gxp is not None:
                    gxp[sl] += g * w[None, :, i, j, None, None]
        gx = None
        if gxp is not None:
            gx = gxp[:, :, pad:pad + H, pad:pad + W] if pad else gxp
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx, gw, gb)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, inputs, back, "depthwise_conv2d")


def depthwise_separable_conv(x: Tensor, dw_weight: Tensor, pw_weight: Tensor,
                             dw_bias: Optional[Tensor] = None, pw_bias: Optional[Tensor] = None,
                             stride: int = 1, pad: int = 0) -> Tensor:
    """Depthwise k x k conv followed by a 1x1 pointwise conv."""
    if dw_weight.shape[0] != x.shape[1]:
        raise ShapeError(f"depthwise_separable_conv: dw_weight channels {dw_weight.shape[0]} != input channels {x.shape[1]}")
    h = depthwise_conv2d(x, dw_weight, dw_bias, stride=stride, pad=pad)
    return conv2d(h, pw_weight, pw_bias)


def conv1d_channels(pooled: Tensor, weight: Tensor) -> Tensor:
    """Zero-padded 1-d cross-correlation along the channel axis of a (B,C,1,1) tensor."""
    _require_4d(pooled, "conv1d_channels")
    k = weight.shape[0]
    if weight.ndim != 1 or k % 2 == 0:
        raise ValueError(f"conv1d_channels: kernel must be 1-d with odd length, got shape {weight.shape}")
    B, C = pooled.shape[:2]
    p = (k - 1) // 2
    vp = np.pad(pooled.data.reshape(B, C), ((0, 0), (p, p)))
    w = weight.data
    out = np.zeros((B, C), dtype=pooled.dtype)
    for i in range(k):
        out += w[i] * vp[:, i:i + C]
    _record("conv1d_channels", 2 * k * C * B)

    def back(g):
        g2 = g.reshape(B, C)
        gw = np.array([np.sum(g2 * vp[:, i:i + C]) for i in range(k)], dtype=weight.dtype)
        gvp = np.zeros_like(vp)
        for i in range(k):
            gvp[:, i:i + C] += w[i] * g2
        return (gvp[:, p:p + C].reshape(pooled.shape), gw)

    return make_result(out.reshape(B, C, 1, 1), (pooled, weight), back, "conv1d_channels")


# ---------------------------------------------------------------------------
# structural ops

def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ShapeError("concat_channels: empty input list")
    if len(xs) == 1:
        return xs[0]
    for x in xs:
        _require_4d(x, "concat_channels")
    ref = xs[0].shape
    for x in xs[1:]:
        if x.shape[0] != ref[0]:
            raise ShapeError(f"concat_channels: batch {x.shape[0]} != {ref[0]}")
        if x.shape[2:] != ref[2:]:
            raise ShapeError(f"concat_channels: spatial size {x.shape[2:]} != {ref[2:]}")
    splits = np.cumsum([x.shape[1] for x in xs])[:-1]
    out = np.concatenate([x.data for x in xs], axis=1)
    return make_result(out, tuple(xs), lambda g: tuple(np.split(g, splits, axis=1)), "concat_channels")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    _require_4d(x, "slice_channels")

    def back(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return make_result(x.data[:, start:stop].copy(), (x,), back, "slice_channels")


def global_avg_pool(x: Tensor) -> Tensor:
    _require_4d(x, "global_avg_pool")
    B, C, H, W = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)
    return make_result(out, (x,), lambda g: (np.broadcast_to(g / (H * W), x.shape).copy(),), "global_avg_pool")


def avg_pool(x: Tensor, factor: int) -> Tensor:
    _require_4d(x, "avg_pool")
    B, C, H, W = x.shape
    if H % factor or W % factor:
        raise ShapeError(f"avg_pool: spatial size {H}x{W} not divisible by factor {factor}")
    if factor == 1:
        return x
    out = x.data.reshape(B, C, H // factor, factor, W // factor, factor).mean(axis=(3, 5))

    def back(g):
        g = g / (factor * factor)
        return (np.repeat(np.repeat(g, factor, axis=2), factor, axis=3),)

    return make_result(out, (x,), back, "avg_pool")


def _upsample_axis(a: np.ndarray, axis: int) -> np.ndarray:
    a = np.moveaxis(a, axis, -1)
    prev = np.concatenate([a[..., :1], a[..., :-1]], axis=-1)
    nxt = np.concatenate([a[..., 1:], a[..., -1:]], axis=-1)
    out = np.stack([0.75 * a + 0.25 * prev, 0.75 * a + 0.25 * nxt], axis=-1)
    out = out.reshape(*a.shape[:-1], 2 * a.shape[-1])
    return np.moveaxis(out, -1, axis)


def _upsample_axis_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    g = np.moveaxis(g, axis, -1)
    ge, go = g[..., 0::2], g[..., 1::2]
    ga = 0.75 * (ge + go)
    ga[..., :-1] += 0.25 * ge[..., 1:]
    ga[..., 0] += 0.25 * ge[..., 0]
    ga[..., 1:] += 0.25 * go[..., :-1]
    ga[..., -1] += 0.25 * go[..., -1]
    return np.moveaxis(ga, -1, axis)


def bilinear_upsample2x(x: Tensor) -> Tensor:
    """Bilinear x2 with half-pixel centers and edge clamping.

    Output index ``o`` samples source coordinate ``(o + 0.5) / 2 - 0.5``, so
    ``out[2i] = 0.75 x[i] + 0.25 x[i-1]`` and ``out[2i+1] = 0.75 x[i] + 0.25 x[i+1]``
    with out-of-range neighbours replaced by the edge sample.
    """
    _require_4d(x, "bilinear_upsample2x")
    out = _upsample_axis(_upsample_axis(x.data, 2), 3).astype(x.dtype)

    def back(g):
        return (_upsample_axis_adjoint(_upsample_axis_adjoint(g, 3), 2),)

    return make_result(np.ascontiguousarray(out), (x,), back, "bilinear_upsample2x")


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """(B, C*r*r, H, W) -> (B, C, H*r, W*r); channel c*r*r + dy*r + dx lands at (r*y+dy, r*x+dx)."""
    _require_4d(x, "pixel_shuffle")
    B, Cr, H, W = x.shape
    if Cr % (r * r):
        raise ShapeError(f"pixel_shuffle: channels {Cr} not divisible by r^2={r * r}")
    C = Cr // (r * r)
    out = x.data.reshape(B, C, r, r, H, W).transpose(0, 1, 4, 2, 5, 3).reshape(B, C, H * r, W * r)

    def back(g):
        return (g.reshape(B, C, H, r, W, r).transpose(0, 1, 3, 5, 2, 4).reshape(x.shape),)

    return make_result(np.ascontiguousarray(out), (x,), back, "pixel_shuffle")


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Inverse of :func:`pixel_shuffle`."""
    _require_4d(x, "pixel_unshuffle")
    B, C, Hr, Wr = x.shape
    if Hr % r or Wr % r:
        raise ShapeError(f"pixel_unshuffle: spatial size {Hr}x{Wr} not divisible by {r}")
    H, W = Hr // r, Wr // r
    out = x.data.reshape(B, C, H, r, W, r).transpose(0, 1, 3, 5, 2, 4).reshape(B, C * r * r, H, W)

    def back(g):
        return (g.reshape(B, C, r, r, H, W).transpose(0, 1, 4, 2, 5, 3).reshape(x.shape),)

    return make_result(np.ascontiguousarray(out), (x,), back, "pixel_unshuffle")


# ---------------------------------------------------------------------------
# normalization

class RunningStats:
    """Per-channel running mean/variance for batch norm."""

    def __init__(self, channels: int, momentum: float = 0.1, initialized: bool = False, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.initialized = initialized

    @classmethod
    def fresh(cls, channels: int, momentum: float = 0.1, dtype=np.float32) -> "RunningStats":
        """Explicitly initialized stats (mean 0, var 1), usable in eval mode."""
        return cls(channels, momentum, initialized=True, dtype=dtype)

    def update(self, batch_mean: np.ndarray, batch_var_unbiased: np.ndarray) -> None:
        m = self.momentum
        self.mean = ((1 - m) * self.mean + m * batch_mean).astype(self.mean.dtype)
        self.var = ((1 - m) * self.var + m * batch_var_unbiased).astype(self.var.dtype)
        self.initialized = True


def _normalize(x: Tensor, gamma: Optional[Tensor], beta: Optional[Tensor], axes: tuple[int, ...],
               mean: np.ndarray, var: np.ndarray, eps: float, batch_stats: bool, op: str) -> Tensor:
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = ((x.data - mean) * inv_std).astype(x.dtype)
    shape = (1, x.shape[1], 1, 1)
    out = xhat
    if gamma is not None:
        out = out * gamma.data.reshape(shape)
    if beta is not None:
        out = out + beta.data.reshape(shape)
    n = int(np.prod([x.shape[a] for a in axes]))

    def back(g):
        gg = np.sum(g * xhat, axis=(0, 2, 3)) if gamma is not None else None
        gb = np.sum(g, axis=(0, 2, 3)) if beta is not None else None
        gxhat = g * gamma.data.reshape(shape) if gamma is not None else g
        if batch_stats:
            s1 = gxhat.sum(axis=axes, keepdims=True)
            s2 = (gxhat * xhat).sum(axis=axes, keepdims=True)
            gx = inv_std * (gxhat - s1 / n - xhat * s2 / n)
        else:
            gx = gxhat * inv_std
        grads = [gx]
        if gamma is not None:
            grads.append(gg)
        if beta is not None:
            grads.append(gb)
        return tuple(grads)

    inputs = [x] + [t for t in (gamma, beta) if t is not None]
    return make_result(out.astype(x.dtype), tuple(inputs), back, op)


def batch_norm(x: Tensor, gamma: Optional[Tensor], beta: Optional[Tensor], stats: Optional[RunningStats],
               mode: str = "train", eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over (batch, H, W).

    Train mode uses batch statistics (biased variance) and folds them into
    ``stats`` with the unbiased variance; eval mode uses ``stats``. Passing
    ``gamma``/``beta`` as None disables the affine part.
    """
    _require_4d(x, "batch_norm")
    C = x.shape[1]
    for t, label in ((gamma, "gamma"), (beta, "beta")):
        if t is not None and t.shape != (C,):
            raise ShapeError(f"batch_norm: {label} length {t.shape} != channels {C}")
    if mode == "train":
        axes = (0, 2, 3)
        mean = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
        if stats is not None:
            n = x.shape[0] * x.shape[2] * x.shape[3]
            unbiased = var.reshape(C) * (n / (n - 1) if n > 1 else 1.0)
            stats.update(mean.reshape(C), unbiased)
        return _normalize(x, gamma, beta, axes, mean, var, eps, True, "batch_norm")
    if mode != "eval":
        raise ValueError(f"batch_norm: unknown mode {mode!r}")
    if stats is None or not stats.initialized:
        raise RuntimeError("batch_norm: eval mode needs recorded or explicitly initialized running stats")
    shape = (1, C, 1, 1)
    return _normalize(x, gamma, beta, (0, 2, 3), stats.mean.reshape(shape), stats.var.reshape(shape),
                      eps, False, "batch_norm")


def layer_norm(x: Tensor, gamma: Optional[Tensor], beta: Optional[Tensor], eps: float = 1e-5) -> Tensor:
    """Per-sample normalization over (C, H, W) with per-channel affine."""
    _require_4d(x, "layer_norm")
    axes = (1, 2, 3)
    mean = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    return _normalize(x, gamma, beta, axes, mean, var, eps, True, "layer_norm")
