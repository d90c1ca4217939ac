"""Adam, the seeded synthetic toy dataset, the training loop and checkpoint files.

Checkpoint layout (little-endian throughout)::

    b"ERIE" | u32 version | u32 len + UTF-8 JSON | u32 tensor count |
    per tensor: u16 name len + UTF-8 name | u8 ndim | ndim x u32 | f32 payload

Model tensors keep their parameter names; Adam moments are stored as
``adam.m.<name>`` / ``adam.v.<name>`` and batch-norm running statistics as
``bn.<site>.mean`` / ``bn.<site>.var``. Tensors are written sorted by name
and the JSON with sorted keys, so equal states give equal bytes.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, Sequence, Union

import numpy as np

from .autograd import Rng, RunningStats, Tensor
from .bayer import PackedRaw, SidecarMeta, amplify, mosaic_from_rgb, pack_float
from .losses import LossWeights, total_loss
from .model import ERIENetParams, ModelConfig, build, forward

MAGIC = b"ERIE"
VERSION = 1
CLIP_NORM = 10.0


# ---------------------------------------------------------------------------
# Adam

class MissingGradError(ValueError):
    pass


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params: Union[ERIENetParams, dict[str, Tensor]], **hyper) -> "AdamState":
        tensors = params.tensors if isinstance(params, ERIENetParams) else params
        return cls({k: np.zeros_like(t.data) for k, t in tensors.items()},
                   {k: np.zeros_like(t.data) for k, t in tensors.items()}, **hyper)

    def hyper(self) -> dict[str, Any]:
        return {"step": self.step, "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}


def collect_grads(tensors: dict[str, Tensor]) -> dict[str, np.ndarray]:
    grads = {}
    for name, t in tensors.items():
        if t.grad is None:
            raise MissingGradError(f"no gradient for parameter {name}")
        grads[name] = t.grad
    return grads


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float = CLIP_NORM) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``; returns the norm before."""
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * np.asarray(scale, dtype=grads[k].dtype)
    return norm


def adam_step(params: Union[ERIENetParams, dict[str, Tensor]], grads: Optional[dict[str, np.ndarray]],
              state: AdamState) -> AdamState:
    """One bias-corrected Adam update, in place. ``grads=None`` reads ``.grad`` off each tensor."""
    tensors = params.tensors if isinstance(params, ERIENetParams) else params
    if grads is None:
        grads = collect_grads(tensors)
    for name in tensors:
        if name not in grads or grads[name] is None:
            raise MissingGradError(f"no gradient for parameter {name}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for name, p in tensors.items():
        g = grads[name]
        dt = p.data.dtype
        m = state.m[name] = (b1 * state.m[name] + (1.0 - b1) * g).astype(dt)
        v = state.v[name] = (b2 * state.v[name] + (1.0 - b2) * g * g).astype(dt)
        p.data = (p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(dt)
    return state


# ---------------------------------------------------------------------------
# synthetic data

@dataclass
class Sample:
    dark: PackedRaw          # 4 x H/2 x W/2, exposure scaled by 1 / ratio, noisy
    target: np.ndarray       # 3 x H x W in [0, 1]
    meta: SidecarMeta


def synthetic_target(rng: Rng, size: int) -> np.ndarray:
    """A smooth colour gradient with a few flat rectangles and discs, (3, size, size) in [0, 1]."""
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    base = rng.uniform(0.1, 0.6, (3, 1, 1))
    img = base + rng.uniform(-0.3, 0.3, (3, 1, 1)) * xx + rng.uniform(-0.3, 0.3, (3, 1, 1)) * yy
    for _ in range(int(rng.integers(1, 4))):
        colour = rng.uniform(0.0, 1.0, (3, 1, 1))
        cy, cx = rng.uniform(0.1, 0.9, 2)
        r = rng.uniform(0.1, 0.3)
        if rng.uniform(0, 1) < 0.5:
            mask = (np.abs(yy - cy) < r) & (np.abs(xx - cx) < r)
        else:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        img = np.where(mask, colour, img)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synthetic_dataset(n: int, size: int = 32, ratio: float = 8.0, noise: float = 0.01,
                      seed: int = 0) -> list[Sample]:
    """Dark input = RGGB-mosaicked target / ratio + N(0, noise^2), clipped to [0, 1]."""
    if size % 32:
        raise ValueError(f"patch size must be a multiple of 32, got {size}")
    rng = Rng(seed).child("synthetic")
    out = []
    for _ in range(n):
        target = synthetic_target(rng, size)
        mosaic = mosaic_from_rgb(target.transpose(1, 2, 0)) / ratio
        mosaic = np.clip(mosaic + rng.normal(0.0, noise, mosaic.shape), 0.0, 1.0)
        out.append(Sample(pack_float(mosaic), target, SidecarMeta(ratio_override=ratio)))
    return out


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainState:
    config: ModelConfig
    params: ERIENetParams
    adam: AdamState
    rng: Rng
    step: int = 0


def init_training(config: ModelConfig, seed: int = 0, **adam_hyper) -> TrainState:
    params = build(config, seed)
    return TrainState(config, params, AdamState.fresh(params, **adam_hyper), Rng(seed).child("batches"))


def _batch(data: Sequence[Sample], idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([amplify(data[i].dark, data[i].meta).data for i in idx])
    y = np.stack([data[i].target for i in idx])
    return x, y


def train_steps(state: TrainState, data: Sequence[Sample], steps: int, batch_size: int = 4,
                weights: Optional[LossWeights] = None, clip: float = CLIP_NORM,
                on_step: Optional[Callable[[int, float], None]] = None) -> list[float]:
    """Run ``steps`` Adam steps in place; returns the pre-update loss of each step."""
    if not data:
        raise ValueError("training data is empty")
    shapes = {s.dark.data.shape for s in data}
    if len(shapes) != 1:
        raise ValueError(f"all samples must share one shape, got {sorted(shapes)}")
    h, w = next(iter(shapes))[1:]
    if h % 16 or w % 16:
        raise ValueError(f"mosaic dims must be multiples of 32, got {2 * h}x{2 * w}")
    trace = []
    tensors = state.params.tensors
    for _ in range(steps):
        idx = state.rng.integers(0, len(data), batch_size)
        x, y = _batch(data, idx)
        state.params.zero_grad()
        loss = total_loss(forward(state.params, state.config, x, mode="train"), y, weights)
        value = float(loss.data)
        if not math.isfinite(value):
            raise FloatingPointError(f"non-finite loss at step {state.step + 1}")
        loss.backward()
        grads = collect_grads(tensors)
        clip_grad_norm(grads, clip)
        adam_step(tensors, grads, state.adam)
        state.step += 1
        trace.append(value)
        if on_step is not None:
            on_step(state.step, value)
    return trace


@dataclass
class TrainResult:
    losses: list[float]
    state: TrainState


def train_toy(config: ModelConfig, data: Sequence[Sample], steps: int, seed: int = 0, batch_size: int = 4,
              weights: Optional[LossWeights] = None, **kw) -> TrainResult:
    if not data:
        raise ValueError("training data is empty")
    state = init_training(config, seed)
    return TrainResult(train_steps(state, data, steps, batch_size, weights, **kw), state)


# ---------------------------------------------------------------------------
# checkpoints

class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class NameCollisionError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    adam: dict[str, Any] = field(default_factory=dict)
    stats: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    stats_initialized: dict[str, bool] = field(default_factory=dict)
    step: int = 0
    rng_state: Optional[dict[str, Any]] = None

    def named_tensors(self) -> list[tuple[str, np.ndarray]]:
        out: dict[str, np.ndarray] = {}

        def put(name, arr):
            if name in out:
                raise NameCollisionError(f"tensor name {name!r} used twice")
            out[name] = arr

        for k, a in self.params.items():
            put(k, a)
        for k, a in self.adam_m.items():
            put(f"adam.m.{k}", a)
        for k, a in self.adam_v.items():
            put(f"adam.v.{k}", a)
        for k, (mean, var) in self.stats.items():
            put(f"bn.{k}.mean", mean)
            put(f"bn.{k}.var", var)
        return sorted(out.items())


def checkpoint_from_state(state: TrainState) -> Checkpoint:
    p = state.params
    return Checkpoint(
        config=state.config,
        params={k: t.data for k, t in p.tensors.items()},
        adam_m=dict(state.adam.m),
        adam_v=dict(state.adam.v),
        adam={k: v for k, v in state.adam.hyper().items()},
        stats={k: (s.mean, s.var) for k, s in p.stats.items()},
        stats_initialized={k: bool(s.initialized) for k, s in p.stats.items()},
        step=state.step,
        rng_state=state.rng.state,
    )


def state_from_checkpoint(cp: Checkpoint) -> TrainState:
    params = build(cp.config, 0)
    missing = set(params.tensors) ^ set(cp.params)
    if missing:
        raise CheckpointError(f"checkpoint parameters do not match the config: {sorted(missing)[:5]}")
    for k, t in params.tensors.items():
        if t.shape != cp.params[k].shape:
            raise CheckpointError(f"parameter {k}: shape {cp.params[k].shape} != expected {t.shape}")
        t.data = cp.params[k].astype(np.float32).copy()
    for k, s in params.stats.items():
        if k in cp.stats:
            s.mean, s.var = (a.astype(np.float32).copy() for a in cp.stats[k])
            s.initialized = cp.stats_initialized.get(k, True)
    hyper = dict(cp.adam)
    adam = AdamState(
        {k: cp.adam_m.get(k, np.zeros_like(t.data)).copy() for k, t in params.tensors.items()},
        {k: cp.adam_v.get(k, np.zeros_like(t.data)).copy() for k, t in params.tensors.items()},
        **hyper,
    )
    rng = Rng.from_state(cp.rng_state) if cp.rng_state else Rng(0).child("batches")
    return TrainState(cp.config, params, adam, rng, cp.step)


def params_from_checkpoint(cp: Checkpoint) -> ERIENetParams:
    return state_from_checkpoint(cp).params


def serialize_checkpoint(cp: Checkpoint) -> bytes:
    meta = {
        "config": cp.config.to_dict(),
        "step": cp.step,
        "adam": cp.adam,
        "rng": cp.rng_state,
        "stats_initialized": cp.stats_initialized,
    }
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tensors = cp.named_tensors()
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(blob)), blob,
             struct.pack("<I", len(tensors))]
    for name, arr in tensors:
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        a = np.asarray(arr)
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(path: Union[str, Path], cp: Union[Checkpoint, TrainState]) -> None:
    if isinstance(cp, TrainState):
        cp = checkpoint_from_state(cp)
    Path(path).write_bytes(serialize_checkpoint(cp))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(f"checkpoint truncated while reading {what} "
                                           f"(need {n} bytes at offset {self.pos}, file has {len(self.buf)})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def deserialize_checkpoint(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise BadMagicError(f"not a checkpoint: magic {magic!r} != {MAGIC!r}")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version} is not supported (expected {VERSION})")
    (n,) = r.unpack("<I", "config length")
    try:
        meta = json.loads(r.take(n, "config").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"checkpoint config is not valid JSON: {e}") from None
    (count,) = r.unpack("<I", "tensor count")
    tensors: dict[str, np.ndarray] = {}
    for i in range(count):
        (ln,) = r.unpack("<H", f"tensor {i} name length")
        name = r.take(ln, f"tensor {i} name").decode("utf-8")
        (ndim,) = r.unpack("<B", f"{name} ndim")
        dims = r.unpack(f"<{ndim}I", f"{name} dims")
        size = int(np.prod(dims)) if ndim else 1
        data = np.frombuffer(r.take(4 * size, f"{name} payload"), dtype="<f4").reshape(dims)
        if name in tensors:
            raise NameCollisionError(f"tensor name {name!r} appears twice")
        tensors[name] = data.astype(np.float32)
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after {count} tensors")

    cp = Checkpoint(ModelConfig.from_dict(meta["config"]), {}, step=int(meta.get("step", 0)),
                    adam=meta.get("adam", {}), rng_state=meta.get("rng"),
                    stats_initialized=meta.get("stats_initialized", {}))
    pending_stats: dict[str, dict[str, np.ndarray]] = {}
    for name, a in tensors.items():
        if name.startswith("adam.m."):
            cp.adam_m[name[7:]] = a
        elif name.startswith("adam.v."):
            cp.adam_v[name[7:]] = a
        elif name.startswith("bn.") and name.endswith((".mean", ".var")):
            site, _, kind = name[3:].rpartition(".")
            pending_stats.setdefault(site, {})[kind] = a
        else:
            cp.params[name] = a
    for site, d in pending_stats.items():
        if set(d) != {"mean", "var"}:
            raise CheckpointError(f"batch-norm statistics for {site} are incomplete")
        cp.stats[site] = (d["mean"], d["var"])
    return cp


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    return deserialize_checkpoint(Path(path).read_bytes())
