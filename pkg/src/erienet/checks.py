"""64-bit gradient-check suites shared by the test suite and the ``gradcheck`` command.

Three suites, each reporting its worst relative error against a tolerance:

* ops: every differentiable primitive on randomized inputs (tolerance 1e-4)
* losses: both wavelet losses and the total loss on random pairs (1e-4)
* network: the total loss through the tiny network, all parameters (1e-3)

Kinked ops (relu, abs, clamp) get inputs at least 0.1 from their kinks, and
loss pairs differ by at least 0.01 everywhere (the L1 term is |out - gt|).
The network check uses a 1e-6 step: its relus sit behind batch norm, so
some inputs land within 1e-4 of a kink and a larger step would straddle it.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np

from .autograd import Tensor, gradcheck
from .autograd import ops
from .losses import BANDS, haar_dwt2d, haar_idwt2d, total_loss, wavelet_mse_loss, wavelet_ssim_loss
from .model import ModelConfig, build, forward

OP_TOL = 1e-4
LOSS_TOL = 1e-4
NETWORK_TOL = 1e-3
NETWORK_STEP = 1e-6


def _rand(rng, *shape):
    return Tensor(rng.normal(size=shape), dtype=np.float64)


def _case_conv2d(rng):
    B, C, O = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    k = int(rng.choice([1, 3]))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    ins = [_rand(rng, B, C, 5, 6), _rand(rng, O, C, k, k), _rand(rng, O)]
    return (lambda x, w, b: ops.conv2d(x, w, b, stride=stride, pad=pad)), ins


def _case_depthwise(rng):
    C = int(rng.integers(1, 4))
    ins = [_rand(rng, 2, C, 6, 5), _rand(rng, C, 1, 3, 3), _rand(rng, C)]
    stride = int(rng.integers(1, 3))
    return (lambda x, w, b: ops.depthwise_conv2d(x, w, b, stride=stride, pad=1)), ins


def _case_dsconv(rng):
    C, O = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    ins = [_rand(rng, 1, C, 6, 6), _rand(rng, C, 1, 3, 3), _rand(rng, O, C, 1, 1), _rand(rng, C), _rand(rng, O)]
    return (lambda x, dw, pw, db, pb: ops.depthwise_separable_conv(x, dw, pw, db, pb, stride=2, pad=1)), ins


def _off_kinks(rng, kinks, *shape):
    """Random values at least 0.1 away from every kink point."""
    x = rng.normal(size=shape)
    for k in kinks:
        near = np.abs(x - k) < 0.1
        x[near] = k + np.where(x[near] >= k, 0.1, -0.1)
    return Tensor(x, dtype=np.float64)


def _case_relu(rng):
    return ops.relu, [_off_kinks(rng, [0.0], 2, 3, 4, 4)]


def _case_sigmoid(rng):
    return ops.sigmoid, [_rand(rng, 2, 3, 4, 4)]


def _case_concat(rng):
    return (lambda a, b: ops.concat_channels([a, b])), [_rand(rng, 2, 2, 3, 3), _rand(rng, 2, 3, 3, 3)]


def _case_slice(rng):
    return (lambda x: ops.slice_channels(x, 1, 3)), [_rand(rng, 2, 4, 3, 3)]


def _case_gap(rng):
    return ops.global_avg_pool, [_rand(rng, 2, 3, 4, 5)]


def _case_conv1d(rng):
    k = int(rng.choice([1, 3, 5]))
    return ops.conv1d_channels, [_rand(rng, 2, 6, 1, 1), _rand(rng, k)]


def _case_bn_train(rng):
    C = int(rng.integers(1, 4))
    return (lambda x, g, b: ops.batch_norm(x, g, b, None, "train")), [_rand(rng, 3, C, 3, 3), _rand(rng, C), _rand(rng, C)]


def _case_bn_eval(rng):
    C = int(rng.integers(1, 4))
    stats = ops.RunningStats.fresh(C, dtype=np.float64)
    stats.mean = rng.normal(size=C)
    stats.var = rng.uniform(0.5, 2.0, size=C)
    return (lambda x, g, b: ops.batch_norm(x, g, b, stats, "eval")), [_rand(rng, 2, C, 3, 3), _rand(rng, C), _rand(rng, C)]


def _case_bn_noaffine(rng):
    return (lambda x: ops.batch_norm(x, None, None, None, "train")), [_rand(rng, 2, 3, 3, 3)]


def _case_ln(rng):
    C = int(rng.integers(1, 4))
    return (lambda x, g, b: ops.layer_norm(x, g, b)), [_rand(rng, 2, C, 3, 3), _rand(rng, C), _rand(rng, C)]


def _case_upsample(rng):
    return ops.bilinear_upsample2x, [_rand(rng, 2, 2, 3, 4)]


def _case_avgpool(rng):
    f = int(rng.choice([2, 4]))
    return (lambda x: ops.avg_pool(x, f)), [_rand(rng, 1, 2, 8, 4)]


def _case_shuffle(rng):
    return (lambda x: ops.pixel_shuffle(x, 2)), [_rand(rng, 1, 8, 2, 3)]


def _case_arith(rng):
    def f(a, b):
        return ops.div(ops.mul(ops.add(a, b), ops.sub(a, b)), ops.add(ops.square(b), 1.0))
    return f, [_rand(rng, 2, 3, 2, 2), _rand(rng, 1, 3, 1, 2)]


def _case_abs(rng):
    return ops.abs, [_off_kinks(rng, [0.0], 2, 2, 3, 3)]


def _case_reduce(rng):
    return (lambda x: ops.mean(x, axis=(2, 3), keepdims=True)), [_rand(rng, 2, 3, 3, 3)]


def _case_clamp(rng):
    return (lambda x: ops.clamp(x, -0.5, 0.5)), [_off_kinks(rng, [-0.5, 0.5], 2, 2, 3, 3)]


def _case_unshuffle(rng):
    return (lambda x: ops.pixel_unshuffle(x, 2)), [_rand(rng, 1, 2, 4, 6)]


def _case_reshape(rng):
    return (lambda x: ops.reshape(x, (2, 12, 1, 1))), [_rand(rng, 2, 3, 2, 2)]


def _case_haar(rng):
    def f(x):
        b = haar_dwt2d(x)
        return ops.concat_channels([b[n] for n in BANDS])
    return f, [_rand(rng, 1, 2, 4, 6)]


def _case_haar_inverse(rng):
    return (lambda a, b, c, d: haar_idwt2d(dict(zip(BANDS, (a, b, c, d))))), [_rand(rng, 1, 2, 2, 3) for _ in range(4)]


OP_CASES = {
    name[len("_case_"):]: fn for name, fn in sorted(globals().items()) if name.startswith("_case_")
}


@dataclass
class CheckResult:
    suite: str
    name: str
    max_rel_err: float
    tol: float
    checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def to_json(self) -> dict:
        d = asdict(self)
        d["passed"] = self.passed
        return d


def _probe_loss(op: Callable, rng: np.random.Generator) -> Callable:
    probe = []

    def loss(*xs):
        out = op(*xs)
        if not probe:
            probe.append(Tensor(rng.normal(size=out.shape), dtype=np.float64))
        return (out * probe[0]).sum()

    return loss


def check_op(name: str, seed: int = 0, trials: int = 20) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst, n = 0.0, 0
    for _ in range(trials):
        op, inputs = OP_CASES[name](rng)
        rep = gradcheck(_probe_loss(op, rng), inputs)
        worst, n = max(worst, rep.max_rel_err), n + rep.n_checked
    return CheckResult("ops", name, worst, OP_TOL, n)


LOSSES = {"wavelet_ssim": wavelet_ssim_loss, "wavelet_mse": wavelet_mse_loss, "total": total_loss}


def check_loss(name: str, seed: int = 0, pairs: int = 10, size: int = 16, max_checks: int = 120) -> CheckResult:
    fn = LOSSES[name]
    rng = np.random.default_rng(seed)
    worst, n = 0.0, 0
    for _ in range(pairs):
        gt_data = rng.random((1, 3, size, size))
        # keep |out - gt| >= 0.01 so the L1 kink is never straddled
        diff = rng.random((1, 3, size, size)) - gt_data
        diff = np.where(np.abs(diff) < 0.01, np.where(diff >= 0, 0.01, -0.01), diff)
        out = Tensor(gt_data + diff, dtype=np.float64)
        gt = Tensor(gt_data, dtype=np.float64)
        rep = gradcheck(lambda o: fn(o, gt), [out], max_checks=max_checks, seed=int(rng.integers(1 << 31)))
        worst, n = max(worst, rep.max_rel_err), n + rep.n_checked
    return CheckResult("losses", name, worst, LOSS_TOL, n)


def check_network(seed: int = 0, per_tensor: int = 3, config: Optional[ModelConfig] = None) -> CheckResult:
    """Total loss through the tiny network (32x32 mosaic), every parameter tensor and the input sampled."""
    cfg = config or ModelConfig.tiny()
    params = build(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    # zero-initialized heads and biases get random values so every path carries gradient
    for t in params.tensors.values():
        if not t.data.any():
            t.data[...] = rng.normal(0.0, 0.1, t.shape)
    x = Tensor(rng.random((2, 4, 16, 16)), dtype=np.float64)
    gt = Tensor(rng.random((2, 3, 32, 32)), dtype=np.float64)
    inputs = [x] + list(params.tensors.values())
    rep = gradcheck(lambda *a: total_loss(forward(params, cfg, x, mode="train"), gt), inputs,
                    h=NETWORK_STEP, max_checks=per_tensor, seed=seed)
    return CheckResult("network", "erienet_tiny_total_loss", rep.max_rel_err, NETWORK_TOL, rep.n_checked)


def run_all(seed: int = 0, trials: int = 20, pairs: int = 10, per_tensor: int = 3,
            on_result: Optional[Callable[[CheckResult], None]] = None) -> list[CheckResult]:
    results = []
    jobs = [lambda n=n: check_op(n, seed, trials) for n in OP_CASES]
    jobs += [lambda n=n: check_loss(n, seed, pairs) for n in LOSSES]
    jobs.append(lambda: check_network(seed, per_tensor))
    for job in jobs:
        r = job()
        results.append(r)
        if on_result is not None:
            on_result(r)
    return results
