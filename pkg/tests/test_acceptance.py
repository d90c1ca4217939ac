"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s`` or as a script.
"""

import math
import time

import numpy as np
import pytest

from erienet.autograd import Rng, Tensor, count_flops, no_grad
from erienet.autograd import ops
from erienet.bayer import RawMosaic, apply_augmentation, pack, unpack
from erienet.checks import run_all
from erienet.losses import dwt_pyramid, l1_loss, psnr, ssim_metric, total_loss, wavelet_mse_loss, wavelet_ssim_loss
from erienet.model import REFERENCE_PARAMS, ModelConfig, _Planner, Shape, benchmark, build, flop_count, forward, \
    param_count
from erienet.trainer import (
    init_training,
    load_checkpoint,
    save_checkpoint,
    state_from_checkpoint,
    synthetic_dataset,
    train_steps,
)


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}")
        assert ok, detail
    return emit


def test_criterion_1_gradient_suite(report):
    t0 = time.perf_counter()
    results = run_all(seed=0, trials=20, pairs=10, per_tensor=3)
    elapsed = time.perf_counter() - t0
    worst = {}
    for r in results:
        worst[r.suite] = max(worst.get(r.suite, 0.0), r.max_rel_err)
    failed = [f"{r.suite}/{r.name}={r.max_rel_err:.2e}" for r in results if not r.passed]
    ok = not failed and worst["ops"] < 1e-4 and worst["losses"] < 1e-4 and worst["network"] < 1e-3 \
        and elapsed < 300
    report(1, ok, f"{len(results)} checks, worst ops {worst['ops']:.2e}, losses {worst['losses']:.2e}, "
                  f"tiny network {worst['network']:.2e}, {elapsed:.0f}s" + (f", failed {failed}" if failed else ""))


def test_criterion_2_wavelet_correctness(report):
    x = np.random.default_rng(2).random((1000, 64, 64)).astype(np.float32)
    pyr = dwt_pyramid(x)
    recon_err = float(np.max(np.abs(pyr.reconstruct().data - x)))
    energy = (pyr.levels[-1]["LL"].data.astype(np.float64) ** 2).sum(axis=(1, 2))
    for _, name, band in pyr.bands():
        if name != "LL":
            energy += (band.data.astype(np.float64) ** 2).sum(axis=(1, 2))
    ref = (x.astype(np.float64) ** 2).sum(axis=(1, 2))
    parseval = float(np.max(np.abs(energy - ref) / ref))
    ok = recon_err < 1e-5 and parseval < 1e-4
    report(2, ok, f"1000 planes, reconstruction max abs err {recon_err:.2e}, Parseval max rel err {parseval:.2e}")


def test_criterion_3_loss_anchors(report):
    rng = np.random.default_rng(3)
    worst = {"l1": 0.0, "wmse": 0.0, "wssim": 0.0, "total": 0.0}
    for _ in range(5):
        x = rng.random((1, 3, 64, 64)).astype(np.float32)
        worst["l1"] = max(worst["l1"], abs(float(l1_loss(x, x).data)))
        worst["wmse"] = max(worst["wmse"], abs(float(wavelet_mse_loss(x, x).data)))
        worst["wssim"] = max(worst["wssim"], abs(float(wavelet_ssim_loss(x, x).data) + 1.0))
        worst["total"] = max(worst["total"], abs(float(total_loss(x, x).data) + 0.5))
    ok = worst["l1"] == 0 and worst["wmse"] == 0 and worst["wssim"] < 1e-5 and worst["total"] < 1e-5
    report(3, ok, f"L1 {worst['l1']}, L_wmse {worst['wmse']}, |L_wssim + 1| {worst['wssim']:.1e}, "
                  f"|total + 0.5| {worst['total']:.1e}")


def test_criterion_4_metric_anchors(report):
    rng = np.random.default_rng(4)
    x = rng.random((64, 64, 3))
    s = ssim_metric(x, x)
    gt = np.full((32, 32, 3), 0.5)
    p = psnr(gt + 1 / 255, gt, max_val=1.0)
    ok = abs(s - 1.0) <= 1e-6 and abs(p - 48.131) <= 1e-3
    report(4, ok, f"SSIM(x, x) = {s:.9f}, PSNR(uniform 1/255 error) = {p:.4f} dB")


def test_criterion_5_bayer_roundtrip(report):
    rng = np.random.default_rng(5)
    exact = 0
    for _ in range(1000):
        h, w = 2 * rng.integers(1, 33, size=2)
        m = RawMosaic(rng.integers(0, 65536, size=(h, w), dtype=np.uint16))
        exact += np.array_equal(unpack(pack(m), 65535).data, m.data)
    x = rng.random((4, 8, 8)).astype(np.float32)
    involutions = all(np.array_equal(apply_augmentation(apply_augmentation(x, f, t), f, t), x)
                      for f, t in [(1, 0), (2, 0), (0, 2)])
    # every one of the 12 draws is invertible: quarter turns undo with the opposite turn
    inverses = all(
        np.array_equal(apply_augmentation(np.rot90(apply_augmentation(x, f, t), k=-t, axes=(1, 2)), f, 0), x)
        for f in range(3) for t in range(4)
    )
    ok = exact == 1000 and involutions and inverses
    report(5, ok, f"{exact}/1000 mosaics exact, flips and 180-degree turn are involutions: {involutions}, "
                  f"all 12 augmentations invertible: {inverses}")


def test_criterion_6_shape_determinism(report):
    cfg = ModelConfig()
    params = build(cfg, seed=6)
    sizes = [(64, 64), (96, 160), (128, 128), (256, 192), (512, 512)]
    shapes_ok, range_ok, det_ok = True, True, True
    with no_grad():
        for h, w in sizes:
            x = np.random.default_rng(h * w).random((4, h // 2, w // 2)).astype(np.float32)
            a = forward(params, cfg, x, mode="eval").data[0]
            b = forward(params, cfg, x, mode="eval").data[0]
            shapes_ok &= a.shape == (3, h, w)
            range_ok &= bool(a.min() >= 0.0 and a.max() <= 1.0)
            det_ok &= a.tobytes() == b.tobytes()
    x = np.random.default_rng(0).random((2, 4, 64, 64)).astype(np.float32)
    outs = []
    for g in ("gcg_bn", "none_bn"):
        c = ModelConfig(guidance=g)
        p = build(c, seed=6)
        with no_grad():
            outs.append((forward(p, c, x, mode="eval").data, forward(p, c, x, mode="train").data))
    san_ok = all(np.array_equal(u, v) for u, v in zip(*outs))
    ok = shapes_ok and range_ok and det_ok and san_ok
    report(6, ok, f"sizes {sizes}: shape (3,H,W) {shapes_ok}, in [0,1] {range_ok}, bitwise repeatable {det_ok}; "
                  f"gcg_bn == none_bn at init {san_ok}")


def test_criterion_7_complexity(report):
    p = _Planner()
    p.conv("c", Shape(4, 8, 8), 32, 3)
    p.dsconv("d", Shape(4, 16, 16), 8, stride=2)
    p.conv1d_channels("e", Shape(16, 1, 1), 3)
    conv, ds, eca = p.layers
    hand = [
        conv.params == 4 * 32 * 9 + 32 == 1184,
        conv.flops == 2 * 9 * 4 * 32 * 64 + 32 * 64 == 149504,
        ds.params == 4 * 9 + 4 + 4 * 8 + 8,
        ds.flops == (2 * 9 * 4 * 64 + 4 * 64) + (2 * 4 * 8 * 64 + 8 * 64),
        eca.params == 3 and eca.flops == 2 * 3 * 16,
    ]
    with count_flops() as fc:
        ops.conv2d(Tensor(np.zeros((1, 4, 8, 8))), Tensor(np.zeros((32, 4, 3, 3))), Tensor(np.zeros(32)), pad=1)
    hand.append(fc.total == 149504)
    single_ok = all(hand)

    order_ok = True
    for h, w in [(64, 64), (256, 256), (512, 512), (2848, 4256)]:
        f = [flop_count(ModelConfig(scales=s), h, w).total for s in [(16,), (16, 8), (16, 8, 4)]]
        g = [flop_count(ModelConfig(guidance=k), h, w).total for k in ("none_bn", "gcg_bn")]
        order_ok &= f[0] < f[1] < f[2] and g[0] < g[1]
    n = param_count(build(ModelConfig()))
    band_ok = 0.7e6 <= n <= 2.2e6
    sony = flop_count(ModelConfig(), 2848, 4256).gflops
    ok = single_ok and order_ok and band_ok
    report(7, ok, f"single-layer counts exact {single_ok}; scale and guidance orderings hold {order_ok}; "
                  f"params {n:,} ({n / REFERENCE_PARAMS:.2f}x the 1.419M reference, band [0.7M, 2.2M]); "
                  f"{sony:.1f} GFLOPs at 2848x4256")


def test_criterion_8_toy_training(report, tmp_path):
    cfg = ModelConfig()
    data = synthetic_dataset(16, size=32, seed=0)
    t0 = time.perf_counter()
    full = init_training(cfg, seed=0)
    losses = train_steps(full, data, 200)
    elapsed = time.perf_counter() - t0
    first, last = losses[0], losses[-1]
    tail = float(np.mean(losses[-10:]))
    reduction = (first - last) / abs(first)

    half = init_training(cfg, seed=0)
    train_steps(half, data, 100)
    save_checkpoint(tmp_path / "mid.ckpt", half)
    resumed = state_from_checkpoint(load_checkpoint(tmp_path / "mid.ckpt"))
    train_steps(resumed, data, 100)
    same = all(t.data.tobytes() == resumed.params[k].data.tobytes() for k, t in full.params.tensors.items())

    ok = all(math.isfinite(v) for v in losses) and reduction >= 0.5 and same and elapsed < 600
    report(8, ok, f"loss {first:.4f} -> {last:.4f} (last-10 mean {tail:.4f}), reduction {100 * reduction:.0f}% "
                  f"in 200 steps ({elapsed:.0f}s); 100+100 resumed run bit-identical {same}")


def test_criterion_9_throughput(report):
    cfg = ModelConfig()
    params = build(cfg)
    r256 = benchmark(params, cfg, 256, 256, repeats=3, warmup=3)
    r512 = benchmark(params, cfg, 512, 512, repeats=3, warmup=3)
    ratio = r512["mean_ms"] / r256["mean_ms"]
    ok = ratio <= 6.0
    report(9, ok, f"256x256 {r256['fps']:.2f} FPS ({r256['mean_ms']:.0f} ms), "
                  f"512x512 {r512['fps']:.2f} FPS ({r512['mean_ms']:.0f} ms), time ratio {ratio:.2f} (limit 6)")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v", "-s"]))
