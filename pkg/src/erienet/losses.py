"""Haar wavelet pyramid, SSIM, the three-term training loss, and PSNR/SSIM metrics.

Wavelet bands follow the orthonormal 2-D Haar convention. For each 2x2
block ``[[a, b], [c, d]]``::

    LL = (a + b + c + d) / 2      HL = (a - b + c - d) / 2
    LH = (a + b - c - d) / 2      HH = (a - b - c + d) / 2
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from .autograd import ShapeError, Tensor, depthwise_conv2d, no_grad
from .autograd import ops
from .autograd.tensor import make_result

BANDS = ("LL", "HL", "LH", "HH")
# sign of (a, b, c, d) in each band
_SIGNS = {
    "LL": (1, 1, 1, 1),
    "HL": (1, -1, 1, -1),
    "LH": (1, 1, -1, -1),
    "HH": (1, -1, -1, 1),
}
_PHASES = ((0, 0), (0, 1), (1, 0), (1, 1))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_even(x: Tensor, op: str) -> None:
    if x.ndim < 2:
        raise ShapeError(f"{op}: needs at least 2 dims, got {x.shape}")
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError(f"{op}: spatial dims must be even, got {h}x{w}")


def _band(x: Tensor, name: str) -> Tensor:
    signs = _SIGNS[name]
    d = x.data
    out = sum(s * d[..., dy::2, dx::2] for s, (dy, dx) in zip(signs, _PHASES)) * 0.5

    def back(g):
        gx = np.empty_like(d)
        for s, (dy, dx) in zip(signs, _PHASES):
            gx[..., dy::2, dx::2] = (0.5 * s) * g
        return (gx,)

    return make_result(np.ascontiguousarray(out, dtype=d.dtype), (x,), back, f"haar_{name}")


def haar_dwt2d(x) -> dict[str, Tensor]:
    """One level of the orthonormal Haar transform over the last two axes."""
    x = _as_tensor(x)
    _check_even(x, "haar_dwt2d")
    return {name: _band(x, name) for name in BANDS}


def haar_idwt2d(bands: dict[str, Tensor]) -> Tensor:
    """Exact inverse of :func:`haar_dwt2d` (the transform matrix is its own inverse)."""
    ts = [_as_tensor(bands[name]) for name in BANDS]
    shape = ts[0].shape
    for name, t in zip(BANDS, ts):
        if t.shape != shape:
            raise ShapeError(f"haar_idwt2d: band {name} has shape {t.shape}, expected {shape}")
    out_shape = shape[:-2] + (2 * shape[-2], 2 * shape[-1])
    out = np.empty(out_shape, dtype=ts[0].dtype)
    for k, (dy, dx) in enumerate(_PHASES):
        out[..., dy::2, dx::2] = 0.5 * sum(_SIGNS[n][k] * t.data for n, t in zip(BANDS, ts))

    def back(g):
        return tuple(
            0.5 * sum(_SIGNS[n][k] * g[..., dy::2, dx::2] for k, (dy, dx) in enumerate(_PHASES))
            for n in BANDS
        )

    return make_result(out, tuple(ts), back, "haar_idwt2d")


@dataclass
class WaveletPyramid:
    """Per-level Haar bands; ``levels[t-1]`` holds level t at 1/2**t resolution."""

    levels: list[dict[str, Tensor]] = field(default_factory=list)

    def bands(self) -> Iterator[tuple[int, str, Tensor]]:
        for t, level in enumerate(self.levels, start=1):
            for name in BANDS:
                yield t, name, level[name]

    def reconstruct(self) -> Tensor:
        ll = self.levels[-1]["LL"]
        for level in reversed(self.levels):
            ll = haar_idwt2d({**level, "LL": ll})
        return ll


def dwt_pyramid(x, levels: int = 3) -> WaveletPyramid:
    """Decompose recursively on LL, keeping all four bands at every level."""
    x = _as_tensor(x)
    h, w = x.shape[-2:]
    f = 2 ** levels
    if h % f or w % f:
        raise ShapeError(f"dwt_pyramid: spatial dims {h}x{w} must be divisible by {f}")
    pyr = WaveletPyramid()
    ll = x
    for _ in range(levels):
        level = haar_dwt2d(ll)
        pyr.levels.append(level)
        ll = level["LL"]
    return pyr


# ---------------------------------------------------------------------------
# SSIM

WINDOW = 11
SIGMA = 1.5


def gaussian_window(size: int, sigma: float = SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _gaussian_filter(x: Tensor, size: int) -> Tensor:
    C = x.shape[1]
    g = gaussian_window(size).astype(x.dtype)
    kv = Tensor(np.broadcast_to(g.reshape(1, 1, size, 1), (C, 1, size, 1)).copy(), dtype=x.dtype)
    kh = Tensor(np.broadcast_to(g.reshape(1, 1, 1, size), (C, 1, 1, size)).copy(), dtype=x.dtype)
    return depthwise_conv2d(depthwise_conv2d(x, kv), kh)


def _to_4d(x: Tensor) -> Tensor:
    if x.ndim == 4:
        return x
    if x.ndim == 2:
        return ops.reshape(x, (1, 1) + x.shape)
    if x.ndim == 3:
        return ops.reshape(x, (1,) + x.shape)
    raise ShapeError(f"ssim: unsupported shape {x.shape}")


def ssim(x, y, L: float = 1.0, window: int = WINDOW) -> Tensor:
    """Mean SSIM over valid Gaussian-window positions and channels.

    The window is ``min(window, H, W)`` taps wide (sigma 1.5), so small
    wavelet bands are still scored; C1 = (0.01 L)^2, C2 = (0.03 L)^2.
    """
    x, y = _as_tensor(x), _as_tensor(y)
    if x.shape != y.shape:
        raise ShapeError(f"ssim: shape mismatch {x.shape} vs {y.shape}")
    x, y = _to_4d(x), _to_4d(y)
    size = min(window, x.shape[2], x.shape[3])
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    mu_x, mu_y = _gaussian_filter(x, size), _gaussian_filter(y, size)
    mu_xx, mu_yy, mu_xy = ops.square(mu_x), ops.square(mu_y), ops.mul(mu_x, mu_y)
    s_xx = ops.sub(_gaussian_filter(ops.square(x), size), mu_xx)
    s_yy = ops.sub(_gaussian_filter(ops.square(y), size), mu_yy)
    s_xy = ops.sub(_gaussian_filter(ops.mul(x, y), size), mu_xy)
    num = ops.mul(ops.add(ops.mul(mu_xy, 2.0), c1), ops.add(ops.mul(s_xy, 2.0), c2))
    den = ops.mul(ops.add(ops.add(mu_xx, mu_yy), c1), ops.add(ops.add(s_xx, s_yy), c2))
    return ops.mean(ops.div(num, den))


# ---------------------------------------------------------------------------
# training loss

N_TERMS = 3 * len(BANDS)


@dataclass
class LossWeights:
    wssim: float = 0.5
    wmse: float = 0.5
    ratios: Sequence[float] = field(default_factory=lambda: [1.0 / N_TERMS] * N_TERMS)

    def __post_init__(self):
        if self.wssim < 0 or self.wmse < 0:
            raise ValueError(f"loss weights must be >= 0, got wssim={self.wssim} wmse={self.wmse}")
        if len(self.ratios) != N_TERMS:
            raise ValueError(f"need {N_TERMS} band ratios, got {len(self.ratios)}")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ValueError(f"band ratios must sum to 1, got {sum(self.ratios)}")


def _same_shape(out: Tensor, gt: Tensor, op: str) -> None:
    if out.shape != gt.shape:
        raise ShapeError(f"{op}: shape mismatch {out.shape} vs {gt.shape}")


def band_range(band: Tensor) -> float:
    """Dynamic range for a band's SSIM constants: max |coefficient|, floored at 1."""
    return max(float(np.max(np.abs(band.data))) if band.size else 0.0, 1.0)


def wavelet_ssim_loss(out, gt, weights: Optional[LossWeights] = None) -> Tensor:
    """-sum_i r_i SSIM over the 12 bands of a 3-level Haar pyramid."""
    weights = weights or LossWeights()
    out, gt = _as_tensor(out), _as_tensor(gt)
    _same_shape(out, gt, "wavelet_ssim_loss")
    po, pg = dwt_pyramid(out), dwt_pyramid(gt)
    total = None
    for r, (_, _, bo), (_, _, bg) in zip(weights.ratios, po.bands(), pg.bands()):
        term = ops.mul(ssim(bo, bg, L=band_range(bg)), float(r))
        total = term if total is None else ops.add(total, term)
    return ops.mul(total, -1.0)


def mse(a: Tensor, b: Tensor) -> Tensor:
    return ops.mean(ops.square(ops.sub(a, b)))


def wavelet_mse_loss(out, gt) -> Tensor:
    """Pixel MSE plus, for t = 1..3, the MSE over all level-t coefficients (four bands pooled)."""
    out, gt = _as_tensor(out), _as_tensor(gt)
    _same_shape(out, gt, "wavelet_mse_loss")
    po, pg = dwt_pyramid(out), dwt_pyramid(gt)
    total = mse(out, gt)
    for lo, lg in zip(po.levels, pg.levels):
        sq = None
        count = 0
        for name in BANDS:
            s = ops.sum(ops.square(ops.sub(lo[name], lg[name])))
            sq = s if sq is None else ops.add(sq, s)
            count += lo[name].size
        total = ops.add(total, ops.mul(sq, 1.0 / count))
    return total


def l1_loss(out, gt) -> Tensor:
    out, gt = _as_tensor(out), _as_tensor(gt)
    _same_shape(out, gt, "l1_loss")
    return ops.mean(ops.abs(ops.sub(out, gt)))


def total_loss(out, gt, weights: Optional[LossWeights] = None) -> Tensor:
    """L1 + wssim * L_wssim + wmse * L_wmse."""
    weights = weights or LossWeights()
    out, gt = _as_tensor(out), _as_tensor(gt)
    loss = l1_loss(out, gt)
    if weights.wssim:
        loss = ops.add(loss, ops.mul(wavelet_ssim_loss(out, gt, weights), weights.wssim))
    if weights.wmse:
        loss = ops.add(loss, ops.mul(wavelet_mse_loss(out, gt), weights.wmse))
    return loss


# ---------------------------------------------------------------------------
# evaluation metrics (no graph)

def psnr(out, gt, max_val: float = 1.0) -> float:
    a, b = np.asarray(out, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    err = float(np.mean((a - b) ** 2))
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(max_val ** 2 / err)


def ssim_metric(a, b, max_val: float = 1.0) -> float:
    """SSIM between two images given as (H, W), (H, W, 3) or (C, H, W) arrays."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 3 and a.shape[-1] == 3 and a.shape[0] != 3:
        a, b = a.transpose(2, 0, 1), b.transpose(2, 0, 1)
    with no_grad():
        return float(ssim(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64), L=max_val).data)
