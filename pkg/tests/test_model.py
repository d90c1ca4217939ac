import json
import math

import numpy as np
import pytest

from erienet.autograd import Tensor, count_flops, gradcheck, no_grad
from erienet.model import (
    GUIDANCE,
    VARIANTS,
    ConfigError,
    CRDBSpec,
    ModelConfig,
    Shape,
    _Planner,
    benchmark,
    block_params,
    block_variant_forward,
    build,
    crdb_forward,
    eca,
    flop_count,
    forward,
    gcg_modulate,
    layer_manifest,
    param_count,
)


def packed_input(h, w, seed=0, batch=None):
    shape = (4, h // 2, w // 2) if batch is None else (batch, 4, h // 2, w // 2)
    return np.random.default_rng(seed).random(shape).astype(np.float32)


def randomize(params, scale=0.1, seed=0):
    """Give zero-initialized tensors random values so every path carries gradient."""
    rng = np.random.default_rng(seed)
    for t in params.tensors.values():
        if not t.data.any():
            t.data[...] = rng.normal(0.0, scale, t.shape)


class TestConfig:
    def test_defaults_valid(self):
        ModelConfig().validate()

    def test_violations_listed(self):
        cfg = ModelConfig(scales=(8, 4), eca_kernel=4, widths={16: 0, 8: 48, 4: 32}, guidance="x")
        with pytest.raises(ConfigError) as e:
            cfg.validate()
        text = str(e.value)
        for part in ("scales must include 16", "eca_kernel", "widths[16]", "guidance"):
            assert part in text
        assert len(e.value.problems) == 4

    def test_dict_roundtrip(self):
        cfg = ModelConfig(scales=(16, 4), guidance="gcg_ln", block_variant="rdb_star")
        back = ModelConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert back == cfg

    def test_build_rejects_invalid(self):
        with pytest.raises(ConfigError):
            build(ModelConfig(block_variant="nope"))


class TestBuild:
    def test_deterministic_bytes(self):
        a, b = build(ModelConfig.tiny(), seed=3), build(ModelConfig.tiny(), seed=3)
        assert list(a.tensors) == list(b.tensors)
        assert all(a[k].data.tobytes() == b[k].data.tobytes() for k in a.tensors)

    def test_seed_changes_weights(self):
        a, b = build(ModelConfig.tiny(), seed=1), build(ModelConfig.tiny(), seed=2)
        assert not np.array_equal(a["head.out.weight"].data, b["head.out.weight"].data)

    def test_names_unique_and_finite(self):
        p = build(ModelConfig())
        assert len(set(p.tensors)) == len(p.tensors)
        assert all(np.all(np.isfinite(t.data)) for t in p.tensors.values())

    def test_masks_start_at_one(self):
        p = build(ModelConfig())
        for s in (16, 8, 4):
            assert p[f"branch{s}.mask"].data.tolist() == [1.0]

    def test_scale16_only_has_no_fusion(self):
        names = build(ModelConfig(scales=(16,))).tensors
        assert not any(n.startswith(("fuse8", "fuse4", "branch8", "branch4")) for n in names)
        assert "branch16.crdb2.fuse.weight" in names

    def test_parallel_crdbs_at_16(self):
        names = build(ModelConfig()).tensors
        assert {n.split(".")[1] for n in names if n.startswith("branch16.crdb")} == {"crdb0", "crdb1", "crdb2"}
        assert not any(n.startswith("branch8.crdb1") for n in names)

    def test_crdb_layer_widths(self):
        p = build(ModelConfig())
        for j in range(4):
            assert p[f"branch16.crdb0.layer{j}.conv.weight"].shape == (32, 64 + 32 * j, 3, 3)
        assert p["branch16.crdb0.fuse.weight"].shape == (64, 64 + 4 * 32, 1, 1)

    def test_init_independent_of_config(self):
        a = build(ModelConfig(scales=(16,)), seed=5)
        b = build(ModelConfig(), seed=5)
        for name, t in a.tensors.items():
            if name.startswith("branch16"):
                assert np.array_equal(t.data, b[name].data), name


def hand_param_count(cfg: ModelConfig) -> int:
    """Independent count: per conv Cin*Cout*k^2 + Cout, summed by hand over the architecture."""
    def conv(cin, cout, k):
        return cin * cout * k * k + cout

    def ds(cin, cout):
        return cin * 9 + cin + cin * cout + cout

    gcg = cfg.guidance != "none_bn"
    total = conv(2, cfg.gcg_hidden, 3) if gcg else 0
    for s in cfg.scales:
        w, g, n = cfg.widths[s], cfg.growth[s], cfg.crdb_depths[s]
        stages = int(math.log2(s)) - 1
        total += ds(4, w) + (stages - 1) * ds(w, w) + 1
        blocks = cfg.parallel_crdbs_at_16 if s == 16 else 1
        for _ in range(blocks):
            for j in range(n):
                cin = w + j * g
                total += 2 * conv(cfg.gcg_hidden, cin, 3) if (gcg and s == 16) else 2 * cin
                total += conv(cin, g, 3)
            total += conv(w + n * g, w, 1) + cfg.eca_kernel
    if 8 in cfg.scales:
        total += conv(cfg.widths[16] + cfg.widths[8], cfg.widths[8], 3)
    prev = cfg.widths[8] if 8 in cfg.scales else cfg.widths[16]
    if 4 in cfg.scales:
        total += conv(prev + cfg.widths[4], cfg.widths[4], 3)
        prev = cfg.widths[4]
    hc = cfg.head_channels
    total += conv(prev, hc, 3) + conv(4, hc, 1) + 2 * conv(hc, hc, 3) + conv(hc, 12, 3)
    return total


class TestCounting:
    MINI = dict(widths={16: 8, 8: 8, 4: 8}, growth={16: 4, 8: 4, 4: 4}, crdb_depths={16: 2, 8: 2, 4: 1},
                gcg_hidden=4)

    @pytest.mark.parametrize("guidance", GUIDANCE)
    @pytest.mark.parametrize("scales", [(16,), (16, 8), (16, 4), (16, 8, 4)])
    def test_hand_oracle_mini(self, guidance, scales):
        cfg = ModelConfig(scales=scales, guidance=guidance, **self.MINI)
        assert param_count(build(cfg)) == hand_param_count(cfg)

    def test_hand_oracle_default(self):
        cfg = ModelConfig()
        assert param_count(build(cfg)) == hand_param_count(cfg)
        assert flop_count(cfg, 64, 64).params == param_count(build(cfg))

    def test_single_conv(self):
        p = _Planner()
        out = p.conv("c", Shape(4, 8, 8), 32, 3)
        rec = p.layers[-1]
        assert (out.c, out.h, out.w) == (32, 8, 8)
        assert rec.params == 1184 == 4 * 32 * 9 + 32
        assert rec.flops == 2 * 9 * 4 * 32 * 64 + 32 * 64 == 149504

    def test_single_conv_matches_instrumented(self):
        from erienet.autograd import conv2d
        x = Tensor(np.zeros((1, 4, 8, 8), dtype=np.float32))
        with count_flops() as fc:
            conv2d(x, Tensor(np.zeros((32, 4, 3, 3))), Tensor(np.zeros(32)), pad=1)
        assert fc.total == 149504

    @pytest.mark.parametrize("cfg", [ModelConfig.tiny(), ModelConfig.tiny(guidance="none_bn", scales=(16, 4)),
                                     ModelConfig.tiny(block_variant="rdb_star", guidance="gcg_ln")])
    def test_conv_flops_match_instrumented_forward(self, cfg):
        p = build(cfg)
        with no_grad(), count_flops() as fc:
            forward(p, cfg, packed_input(64, 96))
        assert fc.total == flop_count(cfg, 64, 96).conv_flops

    def test_scale_ordering(self):
        for h, w in [(64, 64), (256, 384), (512, 512)]:
            f = [flop_count(ModelConfig(scales=s), h, w).total for s in [(16,), (16, 8), (16, 8, 4)]]
            assert f[0] < f[1] < f[2]

    def test_guidance_ordering(self):
        for h, w in [(64, 64), (512, 512)]:
            assert flop_count(ModelConfig(guidance="none_bn"), h, w).total < \
                flop_count(ModelConfig(guidance="gcg_bn"), h, w).total
        assert param_count(build(ModelConfig(guidance="gcg_bn"))) > param_count(build(ModelConfig(guidance="none_bn")))

    def test_default_param_band(self):
        n = param_count(build(ModelConfig()))
        assert 0.7e6 <= n <= 2.2e6

    def test_per_module_sums_to_total(self):
        rep = flop_count(ModelConfig(), 128, 128)
        assert sum(rep.per_module.values()) == rep.total
        assert {"branch16", "branch8", "branch4", "gcg", "fuse8", "fuse4", "head"} <= set(rep.per_module)

    def test_flops_scale_with_pixels(self):
        a = flop_count(ModelConfig(), 128, 128).total
        b = flop_count(ModelConfig(), 256, 256).total
        # per-channel gate terms do not grow with the image, everything else does
        assert 3.99 * a < b < 4 * a

    def test_indivisible(self):
        with pytest.raises(ValueError):
            flop_count(ModelConfig(), 48, 64)


class TestManifest:
    def test_json_fields(self):
        p = build(ModelConfig.tiny())
        entries = json.loads(json.dumps(p.manifest))
        assert all({"name", "type", "in_shape", "out_shape", "params", "flops"} <= set(e) for e in entries)
        assert sum(e["params"] for e in entries) == param_count(p)

    def test_rdb_star_documents_bottleneck(self):
        entries = layer_manifest(ModelConfig.tiny(block_variant="rdb_star"), 64, 64)
        notes = [e["note"] for e in entries if e["name"].endswith(".bottleneck")]
        assert notes and all("parameter parity" in n for n in notes)

    def test_branch16_subpath_shared(self):
        full = [e for e in layer_manifest(ModelConfig(), 64, 64) if e["name"].startswith(("branch16", "gcg"))]
        only = [e for e in layer_manifest(ModelConfig(scales=(16,)), 64, 64)
                if e["name"].startswith(("branch16", "gcg"))]
        assert full == only

    def test_output_shape(self):
        assert layer_manifest(ModelConfig(), 64, 96)[-1]["out_shape"] == [3, 64, 96]


class TestForward:
    @pytest.mark.parametrize("h,w", [(32, 32), (64, 96), (128, 64)])
    def test_shape_and_range(self, h, w):
        cfg = ModelConfig.tiny()
        with no_grad():
            out = forward(build(cfg), cfg, packed_input(h, w))
        assert out.shape == (1, 3, h, w)
        assert out.data.min() >= 0.0 and out.data.max() <= 1.0

    def test_batched(self):
        cfg = ModelConfig.tiny()
        with no_grad():
            out = forward(build(cfg), cfg, packed_input(32, 64, batch=3))
        assert out.shape == (3, 3, 32, 64)

    def test_eval_deterministic(self):
        cfg = ModelConfig()
        p = build(cfg)
        x = packed_input(64, 64)
        with no_grad():
            a = forward(p, cfg, x).data
            b = forward(p, cfg, x).data
        assert a.tobytes() == b.tobytes()

    def test_threaded_branches_match(self):
        cfg = ModelConfig.tiny()
        p = build(cfg)
        x = packed_input(64, 64)
        with no_grad():
            assert np.array_equal(forward(p, cfg, x, workers=1).data, forward(p, cfg, x, workers=3).data)

    def test_indivisible(self):
        cfg = ModelConfig.tiny()
        with pytest.raises(ValueError):
            forward(build(cfg), cfg, packed_input(48, 64))

    def test_bad_mode(self):
        cfg = ModelConfig.tiny()
        with pytest.raises(ValueError):
            forward(build(cfg), cfg, packed_input(32, 32), mode="infer")

    def test_train_mode_unclamped_and_updates_stats(self):
        cfg = ModelConfig.tiny()
        p = build(cfg)
        before = p.stats["branch8.crdb0.layer0.norm"].mean.copy()
        forward(p, cfg, packed_input(32, 32, batch=2), mode="train")
        assert not np.array_equal(before, p.stats["branch8.crdb0.layer0.norm"].mean)

    @pytest.mark.parametrize("variant", ["rb", "rdb_star", "crdb"])
    def test_san_identity_at_init(self, variant):
        x = packed_input(64, 64, batch=2)
        outs = {}
        for g in ("none_bn", "gcg_bn"):
            cfg = ModelConfig.tiny(guidance=g, block_variant=variant)
            p = build(cfg, seed=9)
            with no_grad():
                outs[g] = (forward(p, cfg, x, mode="eval").data, forward(p, cfg, x, mode="train").data)
        for a, b in zip(outs["none_bn"], outs["gcg_bn"]):
            assert np.array_equal(a, b)

    def test_zero_weights_hand_trace(self):
        cfg = ModelConfig.tiny()
        p = build(cfg)
        for name, t in p.tensors.items():
            if name.endswith(("weight", "bias", "beta")):
                t.data[...] = 0.0
        rng = np.random.default_rng(4)
        ch = cfg.head_channels
        skip = rng.uniform(-1, 1, (ch, 4)).astype(np.float32)
        head = rng.uniform(-1, 1, (12, ch)).astype(np.float32)
        p["head.skip.weight"].data[:, :, 0, 0] = skip
        p["head.out.weight"].data[:, :, 1, 1] = head
        v = 0.3
        mosaic_packed = np.full((4, 16, 16), v, dtype=np.float32)
        with no_grad():
            out = forward(p, cfg, mosaic_packed).data[0]
        # hand trace: every branch is zero, so h = skip(packed), the residual is zero,
        # and each of the 12 pre-shuffle channels is head @ skip @ (v, v, v, v)
        pre = head.astype(np.float64) @ (skip.astype(np.float64) @ np.full(4, v))
        expect = np.empty((3, 32, 32))
        for c in range(3):
            for dy in range(2):
                for dx in range(2):
                    expect[c, dy::2, dx::2] = pre[c * 4 + dy * 2 + dx]
        expect = np.clip(expect, 0, 1)
        np.testing.assert_allclose(out, expect, atol=1e-6)
        assert 0 < np.count_nonzero((expect > 0) & (expect < 1))


class TestBlocks:
    def test_crdb_zero_convs_is_identity(self):
        spec = CRDBSpec(6, 3, 3)
        p = block_params(spec, "crdb")
        for name, t in p.tensors.items():
            if "conv" in name or "fuse" in name:
                t.data[...] = 0.0
        x = np.random.default_rng(0).random((2, 6, 8, 8)).astype(np.float32)
        for mode in ("eval", "train"):
            assert np.array_equal(crdb_forward(spec, p, x, mode=mode).data, x)

    @pytest.mark.parametrize("variant", ["rdb", "rdb_star"])
    def test_rdb_zero_dense_is_identity(self, variant):
        spec = CRDBSpec(5, 2, 2)
        p = block_params(spec, variant)
        for t in p.tensors.values():
            if t.ndim == 4:
                t.data[...] = 0.0
        x = np.random.default_rng(1).random((1, 5, 8, 8)).astype(np.float32)
        assert np.array_equal(block_variant_forward(variant, spec, p, x).data, x)

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_channels_preserved(self, variant):
        spec = CRDBSpec(7, 3, 2)
        p = block_params(spec, variant)
        x = np.random.default_rng(2).random((2, 7, 8, 8)).astype(np.float32)
        assert block_variant_forward(variant, spec, p, x, mode="train").shape == (2, 7, 8, 8)

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            block_params(CRDBSpec(4, 2, 1), "dense")

    def test_channel_mismatch(self):
        spec = CRDBSpec(4, 2, 1)
        with pytest.raises(ValueError):
            crdb_forward(spec, block_params(spec), np.zeros((1, 5, 8, 8), dtype=np.float32))

    def test_crdb_is_rdb_plus_eca(self):
        spec = CRDBSpec(6, 3, 2)
        crdb = block_params(spec, "crdb", seed=4, dtype=np.float64)
        rdb = block_params(spec, "rdb", seed=4, dtype=np.float64)
        x = np.random.default_rng(3).random((2, 6, 8, 8))
        r = block_variant_forward("rdb", spec, rdb, x, mode="train").data
        c = block_variant_forward("crdb", spec, crdb, x, mode="train").data
        expect = x + eca(r - x, crdb["crdb.eca.weight"]).data
        np.testing.assert_allclose(c, expect, atol=1e-12)

    def test_db_has_no_residual(self):
        spec = CRDBSpec(5, 2, 2)
        p = block_params(spec, "db")
        for t in p.tensors.values():
            if t.ndim == 4:
                t.data[...] = 0.0
        x = np.random.default_rng(1).random((1, 5, 8, 8)).astype(np.float32)
        assert not block_variant_forward("db", spec, p, x).data.any()

    def test_rdb_star_param_parity(self):
        spec = CRDBSpec(64, 32, 4)
        n_rdb = param_count(block_params(spec, "rdb"))
        n_star = param_count(block_params(spec, "rdb_star"))
        assert abs(n_star - n_rdb) / n_rdb < 0.05

    def test_crdb_n1_gradcheck(self):
        spec = CRDBSpec(3, 2, 1)
        p = block_params(spec, "crdb", seed=1, dtype=np.float64)
        randomize(p)
        x = Tensor(np.random.default_rng(5).normal(size=(2, 3, 6, 6)))
        probe = np.random.default_rng(6).normal(size=(2, 3, 6, 6))
        ts = [x] + list(p.tensors.values())
        rep = gradcheck(lambda *a: (crdb_forward(spec, p, x, mode="train") * Tensor(probe)).sum(), ts, h=1e-6)
        assert rep.max_rel_err < 1e-4


class TestEca:
    def test_closed_form(self):
        x = np.random.default_rng(0).random((1, 3, 4, 4))
        w = 1.7
        out = eca(x, np.array([0.0, w, 0.0])).data
        v = x.mean(axis=(2, 3))
        expect = x / (1 + np.exp(-w * v))[:, :, None, None]
        np.testing.assert_allclose(out, expect, rtol=1e-12)

    def test_zero_in_zero_out(self):
        assert not eca(np.zeros((2, 4, 3, 3)), np.array([0.3, -1.0, 2.0])).data.any()

    def test_gate_in_unit_interval(self):
        x = np.random.default_rng(1).normal(size=(2, 8, 4, 4)) * 5
        out = eca(np.abs(x), np.random.default_rng(2).normal(size=3)).data
        assert np.all(out <= np.abs(x)) and np.all(out >= 0)


def san_params(hidden=3, c=4, seed=0, zero_heads=True):
    rng = np.random.default_rng(seed)
    d = {"trunk.weight": rng.normal(0, 0.5, (hidden, 2, 3, 3)), "trunk.bias": rng.normal(0, 0.1, hidden)}
    for head in ("gamma", "beta"):
        d[f"{head}.weight"] = np.zeros((c, hidden, 3, 3)) if zero_heads else rng.normal(0, 0.3, (c, hidden, 3, 3))
        d[f"{head}.bias"] = np.zeros(c) if zero_heads else rng.normal(0, 0.1, c)
    return {k: Tensor(v, dtype=np.float64) for k, v in d.items()}


class TestGcg:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.green = rng.random((2, 2, 6, 6))
        self.feat = rng.normal(size=(2, 4, 6, 6))

    @pytest.mark.parametrize("norm", ["bn", "ln"])
    def test_identity_at_init(self, norm):
        from erienet.autograd import batch_norm, layer_norm, RunningStats
        out = gcg_modulate(self.green, self.feat, san_params(), norm).data
        f = Tensor(self.feat)
        xhat = batch_norm(f, None, None, RunningStats(4, dtype=np.float64), "train") if norm == "bn" \
            else layer_norm(f, None, None)
        assert np.array_equal(out, xhat.data)

    def test_forced_gamma_one(self):
        sp = san_params()
        sp["gamma.bias"].data[...] = 1.0
        out = gcg_modulate(self.green, self.feat, sp, "ln").data
        ref = gcg_modulate(self.green, self.feat, san_params(), "ln").data
        np.testing.assert_allclose(out, 2 * ref, rtol=1e-12)

    def test_spatial_mismatch(self):
        with pytest.raises(ValueError):
            gcg_modulate(self.green[:, :, :4, :4], self.feat, san_params())

    def test_green_gradient(self):
        sp = san_params(zero_heads=False)
        green = Tensor(self.green)
        probe = np.random.default_rng(3).normal(size=self.feat.shape)
        rep = gradcheck(lambda g: (gcg_modulate(g, self.feat, sp, "bn") * Tensor(probe)).sum(), [green], h=1e-6)
        assert rep.max_rel_err < 1e-4

    def test_guidance_live_after_one_step(self):
        from erienet.losses import total_loss
        from erienet.trainer import AdamState, adam_step
        cfg = ModelConfig.tiny()
        p = build(cfg)
        x = packed_input(32, 32, batch=2)
        gt = np.random.default_rng(1).random((2, 3, 32, 32)).astype(np.float32)

        def green_grad():
            g = Tensor(x[:, 1:3].copy(), requires_grad=True)
            p.zero_grad()
            total_loss(forward(p, cfg, x, green=g, mode="train"), gt).backward()
            return g.grad

        assert not np.any(green_grad())  # heads are zero at init
        total_loss(forward(p, cfg, x, mode="train"), gt).backward()
        adam_step(p, None, AdamState.fresh(p))
        assert np.abs(green_grad()).sum() > 0


class TestFullGraphGradient:
    def test_tiny_total_loss_sampled(self):
        from erienet.losses import total_loss
        cfg = ModelConfig.tiny()
        p = build(cfg, dtype=np.float64)
        randomize(p)
        rng = np.random.default_rng(0)
        x = rng.random((1, 4, 16, 16))
        gt = rng.random((1, 3, 32, 32))
        names = ["branch16.down0.dw.weight", "branch16.crdb1.layer0.san.gamma.weight", "gcg.trunk.weight",
                 "fuse8.weight", "branch4.crdb0.eca.weight", "head.out.weight"]
        rep = gradcheck(lambda *a: total_loss(forward(p, cfg, x, mode="train"), gt),
                        [p[n] for n in names], h=1e-6, max_checks=4, seed=1)
        assert rep.max_rel_err < 1e-3


class TestBenchmark:
    def test_single_sample(self):
        cfg = ModelConfig.tiny()
        r = benchmark(build(cfg), cfg, 64, 64, repeats=1, warmup=1, workers=1)
        assert len(r["samples_ms"]) == 1
        assert r["fps"] == pytest.approx(1000.0 / r["mean_ms"])

    def test_indivisible(self):
        cfg = ModelConfig.tiny()
        with pytest.raises(ValueError):
            benchmark(build(cfg), cfg, 40, 64, repeats=1)
