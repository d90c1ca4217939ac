"""Multi-scale parallel enhancement network over packed RGGB input.

The architecture is written once, in :func:`_network`, against a small
context interface. :class:`_Planner` walks it symbolically (shapes only) to
allocate parameters, build the layer manifest and count flops;
:class:`_Runner` walks it on tensors. Both therefore agree on every layer.

Resolution bookkeeping (mosaic H x W):

* packed input ``I_input``: 4 x H/2 x W/2
* branch ``s`` in {4, 8, 16}: ``log2(s) - 1`` stride-2 depthwise-separable
  stages bring the packed input to H/s, then a learnable scalar mask and
  the branch's residual dense blocks (three in parallel, averaged, at 16)
* fusion: upsample x2 from H/16, concat with the next branch, 3x3 conv, ...
  until H/4; one more upsample and a 3x3 conv reach H/2
* head: add a 1x1 projection of the packed input, one residual block,
  3x3 conv to 12 channels, pixel shuffle x2 -> 3 x H x W
"""

from __future__ import annotations

import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Optional, Sequence, Union

import numpy as np

from .autograd import Rng, RunningStats, Tensor, kaiming_uniform, no_grad
from .autograd import ops
from .bayer import PackedRaw

SCALES = (16, 8, 4)
GUIDANCE = ("none_bn", "gcg_ln", "gcg_bn")
VARIANTS = ("rb", "db", "rdb", "rdb_star", "crdb")
REFERENCE_PARAMS = 1.419e6  # published parameter count the default widths aim near
OUTPUT_INIT_SCALE = 0.01  # untrained outputs start near zero instead of far outside [0, 1]


class ConfigError(ValueError):
    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("invalid model config: " + "; ".join(self.problems))


def _scale_map(values: dict) -> dict[int, int]:
    return {int(k): int(v) for k, v in values.items()}


@dataclass
class ModelConfig:
    scales: tuple[int, ...] = (16, 8, 4)
    widths: dict[int, int] = field(default_factory=lambda: {16: 64, 8: 48, 4: 32})
    growth: dict[int, int] = field(default_factory=lambda: {16: 32, 8: 24, 4: 16})
    crdb_depths: dict[int, int] = field(default_factory=lambda: {16: 4, 8: 3, 4: 2})
    parallel_crdbs_at_16: int = 3
    guidance: str = "gcg_bn"
    block_variant: str = "crdb"
    eca_kernel: int = 3
    gcg_hidden: int = 16
    head_width: Optional[int] = None  # defaults to widths[4]

    def __post_init__(self):
        self.scales = tuple(sorted({int(s) for s in self.scales}, reverse=True))
        self.widths = _scale_map(self.widths)
        self.growth = _scale_map(self.growth)
        self.crdb_depths = _scale_map(self.crdb_depths)

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        """The small configuration used for full-graph gradient checks."""
        base = dict(widths={16: 8, 8: 6, 4: 4}, growth={16: 4, 8: 3, 4: 2}, crdb_depths={16: 2, 8: 2, 4: 1},
                    gcg_hidden=4)
        base.update(overrides)
        return cls(**base)

    @property
    def head_channels(self) -> int:
        return self.head_width if self.head_width is not None else self.widths[4]

    def problems(self) -> list[str]:
        out = []
        if 16 not in self.scales:
            out.append("scales must include 16")
        bad = [s for s in self.scales if s not in SCALES]
        if bad:
            out.append(f"scales must be a subset of {{4, 8, 16}}, got {bad}")
        for label, table in (("widths", self.widths), ("growth", self.growth), ("crdb_depths", self.crdb_depths)):
            for s in SCALES:
                if table.get(s, 0) <= 0:
                    out.append(f"{label}[{s}] must be a positive integer")
        if self.eca_kernel <= 0 or self.eca_kernel % 2 == 0:
            out.append(f"eca_kernel must be a positive odd integer, got {self.eca_kernel}")
        if self.parallel_crdbs_at_16 < 1:
            out.append("parallel_crdbs_at_16 must be >= 1")
        if self.guidance not in GUIDANCE:
            out.append(f"guidance must be one of {GUIDANCE}, got {self.guidance!r}")
        if self.block_variant not in VARIANTS:
            out.append(f"block_variant must be one of {VARIANTS}, got {self.block_variant!r}")
        if self.gcg_hidden <= 0:
            out.append("gcg_hidden must be positive")
        if self.head_width is not None and self.head_width <= 0:
            out.append("head_width must be positive")
        return out

    def validate(self) -> "ModelConfig":
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        return self

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["scales"] = list(self.scales)
        for key in ("widths", "growth", "crdb_depths"):
            d[key] = {str(k): v for k, v in sorted(d[key].items(), reverse=True)}
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        d = dict(d)
        d["scales"] = tuple(d.get("scales", SCALES))
        return cls(**d)


def bottleneck_width(cin: int, growth: int) -> int:
    """1x1 bottleneck width giving rdb_star roughly the params of a plain 3x3 dense layer."""
    return max(1, round(9 * cin * growth / (cin + 9 * growth)))


# ---------------------------------------------------------------------------
# the architecture, written once

def _norm_site(ctx, site: str, x, san):
    """Plain affine batch norm, or norm-then-SAN modulation when ``san`` is set."""
    if san is None:
        return ctx.batch_norm(f"{site}.norm", x, affine=True)
    kind, trunk = san
    xhat = ctx.batch_norm(f"{site}.norm", x, affine=False) if kind == "bn" else ctx.layer_norm(f"{site}.norm", x)
    c = ctx.channels(x)
    gamma = ctx.conv(f"{site}.san.gamma", trunk, c, 3, init="zeros")
    beta = ctx.conv(f"{site}.san.beta", trunk, c, 3, init="zeros")
    return ctx.add(ctx.mul(ctx.add_scalar(gamma, 1.0), xhat), beta)


def _eca(ctx, name: str, x, k: int):
    gate = ctx.sigmoid(ctx.conv1d_channels(f"{name}", ctx.global_avg_pool(x), k))
    return ctx.mul(x, gate)


def _block(ctx, name: str, x, variant: str, growth: int, depth: int, eca_k: int, san):
    c = ctx.channels(x)
    if variant == "rb":
        h = ctx.conv(f"{name}.layer0.conv", ctx.relu(_norm_site(ctx, f"{name}.layer0", x, san)), c, 3)
        h = ctx.conv(f"{name}.layer1.conv", ctx.relu(_norm_site(ctx, f"{name}.layer1", h, san)), c, 3)
        return ctx.add(x, h)
    feats = [x]
    for j in range(depth):
        inp = ctx.concat(feats)
        h = ctx.relu(_norm_site(ctx, f"{name}.layer{j}", inp, san))
        if variant == "rdb_star":
            b = bottleneck_width(ctx.channels(inp), growth)
            h = ctx.relu(ctx.conv(f"{name}.layer{j}.bottleneck", h, b, 1))
        feats.append(ctx.conv(f"{name}.layer{j}.conv", h, growth, 3))
    fused = ctx.conv(f"{name}.fuse", ctx.concat(feats), c, 1)
    if variant == "crdb":
        fused = _eca(ctx, f"{name}.eca", fused, eca_k)
    if variant == "db":
        return fused
    return ctx.add(x, fused)


def _branch(ctx, cfg: ModelConfig, s: int, packed, san):
    x = packed
    for i in range(int(math.log2(s)) - 1):
        x = ctx.dsconv(f"branch{s}.down{i}", x, cfg.widths[s], stride=2)
    x = ctx.mask(f"branch{s}.mask", x)
    g, n = cfg.growth[s], cfg.crdb_depths[s]
    if s == 16:
        outs = [
            _block(ctx, f"branch16.crdb{j}", x, cfg.block_variant, g, n, cfg.eca_kernel, san)
            for j in range(cfg.parallel_crdbs_at_16)
        ]
        return ctx.average(outs)
    return _block(ctx, f"branch{s}.crdb0", x, cfg.block_variant, g, n, cfg.eca_kernel, None)


def _network(ctx, cfg: ModelConfig, packed, green):
    san = None
    if cfg.guidance != "none_bn":
        pooled = ctx.avg_pool(green, 8)
        trunk = ctx.relu(ctx.conv("gcg.trunk", pooled, cfg.gcg_hidden, 3))
        san = ("bn" if cfg.guidance == "gcg_bn" else "ln", trunk)

    thunks = [(s, (lambda s=s: _branch(ctx, cfg, s, packed, san if s == 16 else None))) for s in cfg.scales]
    feats = dict(zip([s for s, _ in thunks], ctx.parallel([t for _, t in thunks])))

    cur = feats[16]
    for s in (8, 4):
        cur = ctx.upsample(cur)
        if s in feats:
            cur = ctx.conv(f"fuse{s}", ctx.concat([cur, feats[s]]), cfg.widths[s], 3)
    cur = ctx.conv("head.up", ctx.upsample(cur), cfg.head_channels, 3)

    ch = cfg.head_channels
    h = ctx.add(cur, ctx.conv("head.skip", packed, ch, 1))
    r = ctx.conv("head.res2", ctx.relu(ctx.conv("head.res1", h, ch, 3)), ch, 3)
    h = ctx.add(h, r)
    out = ctx.pixel_shuffle(ctx.conv("head.out", h, 12, 3, init="kaiming_small"), 2)
    return ctx.output(out)


# ---------------------------------------------------------------------------
# symbolic walk: parameters, manifest, flops

@dataclass(frozen=True)
class Shape:
    c: int
    h: int
    w: int

    def numel(self) -> int:
        return self.c * self.h * self.w

    def as_list(self) -> list[int]:
        return [self.c, self.h, self.w]


@dataclass
class ParamSpec:
    name: str
    shape: tuple[int, ...]
    init: str  # kaiming | kaiming_small | zeros | ones
    fan_in: int = 1


@dataclass
class LayerRecord:
    name: str
    type: str
    in_shape: list
    out_shape: list[int]
    params: int
    flops: int
    conv_flops: int = 0
    note: str = ""

    def to_json(self) -> dict[str, Any]:
        d = {"name": self.name, "type": self.type, "in_shape": self.in_shape, "out_shape": self.out_shape,
             "params": self.params, "flops": self.flops}
        if self.note:
            d["note"] = self.note
        return d


class _Planner:
    def __init__(self):
        self.params: dict[str, ParamSpec] = {}
        self.stats: dict[str, int] = {}
        self.layers: list[LayerRecord] = []
        self._anon = 0

    def _auto(self, kind: str) -> str:
        self._anon += 1
        return f"{kind}{self._anon}"

    def _add_param(self, name, shape, init, fan_in=1) -> int:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name}")
        self.params[name] = ParamSpec(name, tuple(shape), init, fan_in)
        return int(np.prod(shape))

    def _log(self, name, kind, ins, out: Shape, params=0, flops=None, conv_flops=0, note=""):
        flops = out.numel() if flops is None else flops
        self.layers.append(LayerRecord(name, kind, [s.as_list() for s in ins], out.as_list(), params,
                                       int(flops), int(conv_flops), note))
        return out

    # shape queries
    def channels(self, x: Shape) -> int:
        return x.c

    # parametric layers
    def conv(self, name, x: Shape, cout, k, stride=1, init="kaiming"):
        pad = k // 2
        out = Shape(cout, (x.h + 2 * pad - k) // stride + 1, (x.w + 2 * pad - k) // stride + 1)
        n = self._add_param(f"{name}.weight", (cout, x.c, k, k), init, x.c * k * k)
        n += self._add_param(f"{name}.bias", (cout,), "zeros")
        fl = 2 * k * k * x.c * cout * out.h * out.w + cout * out.h * out.w
        note = f"{k}x{k}"
        if name.endswith(".bottleneck"):
            note += f" bottleneck, width {cout} for parameter parity with a plain 3x3 dense layer"
        return self._log(name, "conv", [x], out, n, fl, fl, note)

    def dsconv(self, name, x: Shape, cout, stride=2):
        mid = Shape(x.c, (x.h - 1) // stride + 1, (x.w - 1) // stride + 1)
        n = self._add_param(f"{name}.dw.weight", (x.c, 1, 3, 3), "kaiming", 9)
        n += self._add_param(f"{name}.dw.bias", (x.c,), "zeros")
        n += self._add_param(f"{name}.pw.weight", (cout, x.c, 1, 1), "kaiming", x.c)
        n += self._add_param(f"{name}.pw.bias", (cout,), "zeros")
        hw = mid.h * mid.w
        fl = 2 * 9 * x.c * hw + x.c * hw + 2 * x.c * cout * hw + cout * hw
        return self._log(name, "dsconv", [x], Shape(cout, mid.h, mid.w), n, fl, fl, f"3x3 dw stride {stride} + 1x1")

    def mask(self, name, x: Shape):
        n = self._add_param(name, (1,), "ones")
        return self._log(name, "mask", [x], x, n)

    def batch_norm(self, name, x: Shape, affine=True):
        n = 0
        if affine:
            n += self._add_param(f"{name}.gamma", (x.c,), "ones")
            n += self._add_param(f"{name}.beta", (x.c,), "zeros")
        self.stats[name] = x.c
        return self._log(name, "batch_norm", [x], x, n, note="affine" if affine else "no affine")

    def layer_norm(self, name, x: Shape):
        return self._log(name, "layer_norm", [x], x, 0, note="no affine")

    def conv1d_channels(self, name, x: Shape, k):
        n = self._add_param(f"{name}.weight", (k,), "kaiming", k)
        fl = 2 * k * x.c
        return self._log(name, "conv1d_channels", [x], x, n, fl, fl)

    # parameter-free ops
    def relu(self, x):
        return self._log(self._auto("relu"), "relu", [x], x)

    def sigmoid(self, x):
        return self._log(self._auto("sigmoid"), "sigmoid", [x], x)

    def add(self, a, b):
        return self._log(self._auto("add"), "add", [a, b], a if a.numel() >= b.numel() else b)

    def mul(self, a, b):
        return self._log(self._auto("mul"), "mul", [a, b], a if a.numel() >= b.numel() else b)

    def add_scalar(self, x, c):
        return self._log(self._auto("add"), "add_scalar", [x], x)

    def average(self, xs):
        if len(xs) == 1:
            return xs[0]
        # (n - 1) adds plus one scale
        return self._log(self._auto("average"), "average", list(xs), xs[0], flops=len(xs) * xs[0].numel())

    def concat(self, xs):
        if len(xs) == 1:
            return xs[0]
        out = Shape(sum(x.c for x in xs), xs[0].h, xs[0].w)
        return self._log(self._auto("concat"), "concat", list(xs), out, flops=0)

    def global_avg_pool(self, x):
        return self._log(self._auto("gap"), "global_avg_pool", [x], Shape(x.c, 1, 1), flops=x.numel())

    def avg_pool(self, x, f):
        return self._log(self._auto("avg_pool"), "avg_pool", [x], Shape(x.c, x.h // f, x.w // f), flops=x.numel())

    def upsample(self, x):
        return self._log(self._auto("upsample"), "bilinear_upsample2x", [x], Shape(x.c, 2 * x.h, 2 * x.w))

    def pixel_shuffle(self, x, r):
        return self._log(self._auto("pixel_shuffle"), "pixel_shuffle", [x],
                         Shape(x.c // (r * r), x.h * r, x.w * r), flops=0)

    def parallel(self, thunks):
        return [t() for t in thunks]

    def output(self, x):
        return x


def plan(config: ModelConfig, height: int = 512, width: int = 512) -> _Planner:
    """Symbolically trace the network for an ``height`` x ``width`` mosaic."""
    config.validate()
    _check_dims(height, width)
    p = _Planner()
    packed = Shape(4, height // 2, width // 2)
    green = p._log("green", "slice_channels", [packed], Shape(2, packed.h, packed.w), flops=0)
    _network(p, config, packed, green)
    return p


def _check_dims(height: int, width: int) -> None:
    if height % 32 or width % 32 or height <= 0 or width <= 0:
        raise ValueError(f"mosaic dims must be positive multiples of 32, got {height}x{width}")


# ---------------------------------------------------------------------------
# parameters

@dataclass
class ERIENetParams:
    config: ModelConfig
    tensors: dict[str, Tensor]
    stats: dict[str, RunningStats]
    manifest: list[dict[str, Any]] = field(default_factory=list)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def named(self):
        return self.tensors.items()

    def astype(self, dtype) -> "ERIENetParams":
        tensors = {k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad, dtype=dtype, name=k)
                   for k, v in self.tensors.items()}
        stats = {}
        for k, s in self.stats.items():
            ns = RunningStats(len(s.mean), s.momentum, s.initialized, dtype=dtype)
            ns.mean, ns.var = s.mean.astype(dtype), s.var.astype(dtype)
            stats[k] = ns
        return ERIENetParams(self.config, tensors, stats, self.manifest)

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None


def build(config: ModelConfig, seed: int = 0, dtype=np.float32) -> ERIENetParams:
    """Allocate every parameter deterministically.

    Each tensor draws from its own stream keyed by ``(seed, name)``, so a
    tensor's initial value does not depend on which other layers exist.
    """
    planner = plan(config)
    root = Rng(seed)
    tensors: dict[str, Tensor] = {}
    for name, spec in planner.params.items():
        if spec.init.startswith("kaiming"):
            data = kaiming_uniform(root.child(name), spec.shape, spec.fan_in, dtype=dtype)
            if spec.init == "kaiming_small":
                data *= dtype(OUTPUT_INIT_SCALE)
        elif spec.init == "ones":
            data = np.ones(spec.shape, dtype=dtype)
        else:
            data = np.zeros(spec.shape, dtype=dtype)
        tensors[name] = Tensor(data, requires_grad=True, dtype=dtype, name=name)
    stats = {name: RunningStats.fresh(c, dtype=dtype) for name, c in planner.stats.items()}
    manifest = [rec.to_json() for rec in planner.layers]
    return ERIENetParams(config, tensors, stats, manifest)


def param_count(params: Union[ERIENetParams, dict]) -> int:
    tensors = params.tensors if isinstance(params, ERIENetParams) else params
    return int(sum(t.size for t in tensors.values()))


@dataclass
class FlopReport:
    total: int
    per_module: dict[str, int]
    conv_flops: int
    params: int
    layers: list[LayerRecord]

    @property
    def gflops(self) -> float:
        return self.total / 1e9

    def to_json(self) -> dict[str, Any]:
        return {"total_flops": self.total, "gflops": self.gflops, "per_module": self.per_module,
                "params": self.params, "layers": [r.to_json() for r in self.layers]}


def _module_of(name: str) -> str:
    head = name.split(".")[0]
    if head.startswith(("relu", "add", "mul", "sigmoid", "gap", "average", "concat", "upsample",
                        "avg_pool", "pixel_shuffle")):
        return "elementwise"
    return head


def flop_count(config: ModelConfig, height: int, width: int) -> FlopReport:
    """Flops for one ``height`` x ``width`` mosaic.

    Convolutions count 2 flops per multiply-accumulate plus one per output
    element for the bias; other elementwise ops count one flop per output
    element (pooling: per input element); concat and pixel shuffle are free.
    """
    p = plan(config, height, width)
    per: dict[str, int] = {}
    owner = "input"
    for rec in p.layers:
        mod = _module_of(rec.name)
        # anonymous elementwise ops are billed to the last named layer's module
        if mod == "elementwise":
            mod = owner
        else:
            owner = mod
        per[mod] = per.get(mod, 0) + rec.flops
    total = sum(r.flops for r in p.layers)
    params = sum(int(np.prod(s.shape)) for s in p.params.values())
    return FlopReport(total, per, sum(r.conv_flops for r in p.layers), params, p.layers)


def layer_manifest(config: ModelConfig, height: int = 512, width: int = 512) -> list[dict[str, Any]]:
    return [r.to_json() for r in plan(config, height, width).layers]


# ---------------------------------------------------------------------------
# execution

class _Runner:
    def __init__(self, params: ERIENetParams, mode: str, workers: int = 1):
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        self.p = params.tensors
        self.stats = params.stats
        self.mode = mode
        self.workers = workers

    def channels(self, x: Tensor) -> int:
        return x.shape[1]

    def conv(self, name, x, cout, k, stride=1, init=None):
        return ops.conv2d(x, self.p[f"{name}.weight"], self.p[f"{name}.bias"], stride=stride, pad=k // 2)

    def dsconv(self, name, x, cout, stride=2):
        return ops.depthwise_separable_conv(x, self.p[f"{name}.dw.weight"], self.p[f"{name}.pw.weight"],
                                            self.p[f"{name}.dw.bias"], self.p[f"{name}.pw.bias"],
                                            stride=stride, pad=1)

    def mask(self, name, x):
        return ops.mul(x, self.p[name])

    def batch_norm(self, name, x, affine=True):
        gamma = self.p[f"{name}.gamma"] if affine else None
        beta = self.p[f"{name}.beta"] if affine else None
        return ops.batch_norm(x, gamma, beta, self.stats[name], self.mode)

    def layer_norm(self, name, x):
        return ops.layer_norm(x, None, None)

    def conv1d_channels(self, name, x, k):
        return ops.conv1d_channels(x, self.p[f"{name}.weight"])

    relu = staticmethod(ops.relu)
    sigmoid = staticmethod(ops.sigmoid)
    add = staticmethod(ops.add)
    mul = staticmethod(ops.mul)
    global_avg_pool = staticmethod(ops.global_avg_pool)
    avg_pool = staticmethod(ops.avg_pool)
    upsample = staticmethod(ops.bilinear_upsample2x)
    pixel_shuffle = staticmethod(ops.pixel_shuffle)

    def add_scalar(self, x, c):
        return ops.add(x, c)

    def average(self, xs):
        if len(xs) == 1:
            return xs[0]
        acc = xs[0]
        for x in xs[1:]:
            acc = ops.add(acc, x)
        return ops.mul(acc, 1.0 / len(xs))

    def concat(self, xs):
        return ops.concat_channels(xs)

    def parallel(self, thunks):
        if self.workers <= 1 or len(thunks) == 1:
            return [t() for t in thunks]
        with ThreadPoolExecutor(max_workers=min(self.workers, len(thunks))) as pool:
            return list(pool.map(lambda t: t(), thunks))

    def output(self, x):
        return ops.clamp(x, 0.0, 1.0) if self.mode == "eval" else x


def _to_batch(x, channels: int, dtype) -> Tensor:
    if isinstance(x, PackedRaw):
        x = x.data
    if isinstance(x, Tensor):
        t = x
    else:
        t = Tensor(np.asarray(x), dtype=dtype)
    if t.ndim == 3:
        t = ops.reshape(t, (1,) + t.shape)
    if t.ndim != 4 or t.shape[1] != channels:
        raise ValueError(f"expected ({channels}, h, w) or (B, {channels}, h, w) input, got {t.shape}")
    return t


def default_threads() -> int:
    env = os.environ.get("ERIENET_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def forward(params: ERIENetParams, config: ModelConfig, packed, green=None, mode: str = "eval",
            workers: int = 1) -> Tensor:
    """Run the network; returns a (B, 3, H, W) tensor, clamped to [0, 1] in eval mode.

    ``packed`` is (4, H/2, W/2) or batched; ``green`` defaults to the packed
    G1/G2 planes. ``workers`` > 1 evaluates the scale branches on threads.
    """
    dtype = next(iter(params.tensors.values())).dtype
    x = _to_batch(packed, 4, dtype)
    h, w = x.shape[2:]
    if h % 16 or w % 16:
        raise ValueError(f"packed dims {h}x{w} must be multiples of 16 (mosaic multiples of 32)")
    g = ops.slice_channels(x, 1, 3) if green is None else _to_batch(green, 2, dtype)
    if g.shape[2:] != (h, w):
        raise ValueError(f"green planes {g.shape[2:]} do not match packed input {(h, w)}")
    return _network(_Runner(params, mode, workers), config, x, g)


def enhance(params: ERIENetParams, packed, workers: int = 1) -> np.ndarray:
    """Eval-mode forward of a single packed image; returns (H, W, 3) in [0, 1]."""
    with no_grad():
        out = forward(params, params.config, packed, mode="eval", workers=workers)
    return out.data[0].transpose(1, 2, 0)


def benchmark(params: ERIENetParams, config: ModelConfig, height: int, width: int, repeats: int = 5,
              warmup: int = 3, workers: Optional[int] = None, seed: int = 0) -> dict[str, Any]:
    """Wall-clock eval forwards on a random ``height`` x ``width`` mosaic; warmup runs excluded."""
    _check_dims(height, width)
    workers = default_threads() if workers is None else workers
    dtype = next(iter(params.tensors.values())).dtype
    x = Rng(seed).uniform(0.0, 1.0, (1, 4, height // 2, width // 2)).astype(dtype)
    samples = []
    with no_grad():
        for i in range(warmup + repeats):
            t0 = time.perf_counter()
            forward(params, config, x, mode="eval", workers=workers)
            dt = (time.perf_counter() - t0) * 1e3
            if i >= warmup:
                samples.append(dt)
    mean_ms = float(np.mean(samples))
    return {"height": height, "width": width, "repeats": repeats, "samples_ms": samples, "mean_ms": mean_ms,
            "std_ms": float(np.std(samples)), "fps": 1000.0 / mean_ms, "workers": workers}


def manifest_json(params: ERIENetParams) -> str:
    return json.dumps(params.manifest, indent=2)


# ---------------------------------------------------------------------------
# standalone blocks

@dataclass(frozen=True)
class CRDBSpec:
    in_channels: int
    growth: int
    depth: int
    eca_kernel: int = 3

    def layer_in_channels(self, j: int) -> int:
        return self.in_channels + j * self.growth

    @property
    def fusion_in_channels(self) -> int:
        return self.in_channels + self.depth * self.growth


def _init_tensors(specs: dict[str, ParamSpec], seed: int, dtype) -> dict[str, Tensor]:
    root = Rng(seed)
    out = {}
    for name, spec in specs.items():
        if spec.init.startswith("kaiming"):
            data = kaiming_uniform(root.child(name), spec.shape, spec.fan_in, dtype=dtype)
        elif spec.init == "ones":
            data = np.ones(spec.shape, dtype=dtype)
        else:
            data = np.zeros(spec.shape, dtype=dtype)
        out[name] = Tensor(data, requires_grad=True, dtype=dtype, name=name)
    return out


def block_params(spec: CRDBSpec, variant: str = "crdb", seed: int = 0, name: str = "crdb",
                 san: Optional[str] = None, gcg_hidden: int = 4, dtype=np.float32) -> ERIENetParams:
    """Parameters for one block on its own; ``san`` in {None, "bn", "ln"} adds SAN heads."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown block variant {variant!r}; expected one of {VARIANTS}")
    p = _Planner()
    x = Shape(spec.in_channels, 8, 8)
    san_ctx = None
    if san:
        san_ctx = (san, p.relu(p.conv("gcg.trunk", Shape(2, 8, 8), gcg_hidden, 3)))
    _block(p, name, x, variant, spec.growth, spec.depth, spec.eca_kernel, san_ctx)
    tensors = _init_tensors(p.params, seed, dtype)
    stats = {k: RunningStats.fresh(c, dtype=dtype) for k, c in p.stats.items()}
    return ERIENetParams(None, tensors, stats, [r.to_json() for r in p.layers])


def block_variant_forward(variant: str, spec: CRDBSpec, params: ERIENetParams, x, green=None,
                          san: Optional[str] = None, mode: str = "eval", name: str = "crdb") -> Tensor:
    """Run one block (any variant) built by :func:`block_params` on (B, C, h, w) input."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown block variant {variant!r}; expected one of {VARIANTS}")
    dtype = next(iter(params.tensors.values())).dtype
    x = _to_batch(x, spec.in_channels, dtype) if not isinstance(x, Tensor) or x.ndim != 4 else x
    if x.shape[1] != spec.in_channels:
        raise ValueError(f"block expects {spec.in_channels} input channels, got {x.shape[1]}")
    ctx = _Runner(params, mode)
    san_ctx = None
    if san:
        g = _to_batch(green, 2, dtype)
        if g.shape[2:] != x.shape[2:]:
            raise ValueError(f"green planes {g.shape[2:]} do not match features {x.shape[2:]}")
        san_ctx = (san, ctx.relu(ctx.conv("gcg.trunk", g, 0, 3)))
    return _block(ctx, name, x, variant, spec.growth, spec.depth, spec.eca_kernel, san_ctx)


def crdb_forward(spec: CRDBSpec, params: ERIENetParams, x, san=None, mode: str = "eval",
                 name: str = "crdb") -> Tensor:
    """CRDB forward; ``san`` is None or a ``(norm, green)`` pair with norm in {"bn", "ln"}."""
    norm, green = san if san is not None else (None, None)
    return block_variant_forward("crdb", spec, params, x, green=green, san=norm, mode=mode, name=name)


def eca(x, weight) -> Tensor:
    """x * sigmoid(conv1d over channels of the global average pool)."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    w = weight if isinstance(weight, Tensor) else Tensor(weight, dtype=x.dtype)
    gate = ops.sigmoid(ops.conv1d_channels(ops.global_avg_pool(x), w))
    return ops.mul(x, gate)


def gcg_modulate(green, feat, san_params: dict[str, Tensor], norm: str = "bn",
                 stats: Optional[RunningStats] = None, mode: str = "train") -> Tensor:
    """(1 + gamma) * norm(feat) + beta with gamma, beta predicted from pooled green planes.

    ``san_params`` holds ``trunk``, ``gamma`` and ``beta`` weights and biases
    (keys ``"trunk.weight"``, ``"trunk.bias"``, ...).
    """
    feat = feat if isinstance(feat, Tensor) else Tensor(feat)
    green = green if isinstance(green, Tensor) else Tensor(green, dtype=feat.dtype)
    if green.shape[2:] != feat.shape[2:]:
        raise ValueError(f"gcg_modulate: green {green.shape[2:]} does not match features {feat.shape[2:]}")
    if norm == "bn":
        stats = stats if stats is not None else RunningStats.fresh(feat.shape[1], dtype=feat.dtype)
        xhat = ops.batch_norm(feat, None, None, stats, mode)
    elif norm == "ln":
        xhat = ops.layer_norm(feat, None, None)
    else:
        raise ValueError(f"norm must be 'bn' or 'ln', got {norm!r}")
    sp = san_params
    trunk = ops.relu(ops.conv2d(green, sp["trunk.weight"], sp["trunk.bias"], pad=1))
    gamma = ops.conv2d(trunk, sp["gamma.weight"], sp["gamma.bias"], pad=1)
    beta = ops.conv2d(trunk, sp["beta.weight"], sp["beta.bias"], pad=1)
    return ops.add(ops.mul(ops.add(gamma, 1.0), xhat), beta)
