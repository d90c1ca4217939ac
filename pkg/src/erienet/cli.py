"""``erienet`` command line: enhance, train, report, bench, gradcheck, metrics, entropy.

stdout carries only machine-readable output (JSON, CSV or a single value
line); progress and diagnostics go to stderr. Failures exit nonzero with a
one-line ``erienet: error: ...`` message.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import bayer
from .losses import psnr, ssim_metric
from .model import GUIDANCE, VARIANTS, ModelConfig, benchmark, build, default_threads, enhance, flop_count, \
    param_count, REFERENCE_PARAMS

SID_SONY = (2848, 4256)  # full-resolution Sony frame used for the GFLOPs headline


class CliError(Exception):
    pass


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


def _out(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=False))


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"no such file: {path}")
    return p


def _writable(path: str) -> Path:
    p = Path(path)
    parent = p.parent if str(p.parent) else Path(".")
    if not parent.is_dir():
        raise CliError(f"output directory does not exist: {parent}")
    return p


def _scales(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"scales must be comma-separated integers, got {text!r}") from None


def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scales", type=_scales, default=(16, 8, 4), help="comma-separated subset of 16,8,4")
    p.add_argument("--guidance", choices=GUIDANCE, default="gcg_bn")
    p.add_argument("--block", choices=VARIANTS, default="crdb")
    p.add_argument("--tiny", action="store_true", help="use the small gradient-check configuration")


def _config(args) -> ModelConfig:
    make = ModelConfig.tiny if args.tiny else ModelConfig
    return make(scales=args.scales, guidance=args.guidance, block_variant=args.block).validate()


def _load_any_image(path: Path) -> np.ndarray:
    """P6 -> (H, W, 3), P5 -> (H, W); both scaled to [0, 1]."""
    magic = path.read_bytes()[:2]
    if magic == b"P5":
        data, maxval = bayer.read_pgm(path)
        return data.astype(np.float64) / maxval
    return bayer.load_image(path).astype(np.float64)


def _fmt_psnr(v: float):
    return "inf" if math.isinf(v) else v


# ---------------------------------------------------------------------------
# subcommands

def cmd_enhance(args) -> int:
    from .trainer import load_checkpoint, params_from_checkpoint

    src = _existing(args.input)
    weights = _existing(args.weights)
    dst = _writable(args.output)
    ref = _existing(args.reference) if args.reference else None
    auto = args.ratio == "auto"
    if not auto:
        try:
            ratio = float(args.ratio)
        except ValueError:
            raise CliError(f"--ratio must be a number or 'auto', got {args.ratio!r}") from None
        if not ratio > 0:
            raise CliError(f"--ratio must be positive, got {ratio}")

    mosaic, meta = bayer.load_mosaic(src, require_sidecar=auto)
    if not auto:
        meta.ratio_override = ratio
    h, w = mosaic.data.shape
    y0, x0, nh, nw = bayer.crop_window(h, w, 32)
    if (nh, nw) != (h, w):
        _err(f"input {h}x{w} is not divisible by 32; center-cropped to {nh}x{nw} at ({y0}, {x0})")
        mosaic = bayer.center_crop(mosaic, 32)
    params = params_from_checkpoint(load_checkpoint(weights))
    packed = bayer.amplify(bayer.pack(mosaic), meta)
    image = enhance(params, packed.data, workers=default_threads())
    bayer.save_image(image, dst)
    if ref is not None:
        gt = _load_any_image(ref)
        if gt.shape[:2] == (h, w):
            gt = gt[y0:y0 + nh, x0:x0 + nw]
        saved = bayer.load_image(dst).astype(np.float64)
        if gt.shape != saved.shape:
            raise CliError(f"reference shape {gt.shape} does not match output {saved.shape}")
        print(f"PSNR: {psnr(saved, gt):.4f} dB, SSIM: {ssim_metric(saved, gt):.6f}")
    else:
        _out({"output": str(dst), "height": nh, "width": nw, "ratio": meta.ratio, "cropped": (nh, nw) != (h, w)})
    return 0


def _load_data_dir(path: Path):
    from .trainer import Sample

    if not path.is_dir():
        raise CliError(f"no such directory: {path}")
    samples = []
    for pgm in sorted(path.glob("*.pgm")):
        target_path = pgm.with_suffix(".ppm")
        if not target_path.is_file():
            raise CliError(f"missing target image {target_path} for {pgm}")
        mosaic, meta = bayer.load_mosaic(pgm)
        target = bayer.load_image(target_path).transpose(2, 0, 1)
        if target.shape[1:] != mosaic.data.shape:
            raise CliError(f"{target_path} is {target.shape[1:]}, mosaic {pgm} is {mosaic.data.shape}")
        samples.append(Sample(bayer.pack(mosaic), target, meta))
    if not samples:
        raise CliError(f"no .pgm mosaics in {path}")
    return samples


def cmd_train(args) -> int:
    from .trainer import init_training, save_checkpoint, synthetic_dataset, train_steps

    out = _writable(args.out)
    if args.steps < 0:
        raise CliError("--steps must be >= 0")
    cfg = _config(args)
    if args.synthetic:
        data = synthetic_dataset(args.samples, size=args.size, seed=args.seed)
    else:
        data = _load_data_dir(Path(args.data))
    state = init_training(cfg, args.seed)
    print("step,loss")

    def report(step, loss):
        print(f"{step},{loss:.8f}", flush=True)

    train_steps(state, data, args.steps, batch_size=args.batch, on_step=report)
    save_checkpoint(out, state)
    _err(f"wrote {out} after {state.step} steps")
    return 0


def _report(cfg: ModelConfig, h: int, w: int) -> dict:
    rep = flop_count(cfg, h, w)
    body = {
        "config": cfg.to_dict(),
        "height": h,
        "width": w,
        "params": rep.params,
        "params_reference": REFERENCE_PARAMS,
        "total_flops": rep.total,
        "gflops": rep.gflops,
        "per_module": rep.per_module,
        "layers": [r.to_json() for r in rep.layers],
    }
    return body


def cmd_report(args) -> int:
    cfg = _config(args)
    h, w = (args.height, args.width) if args.height else SID_SONY
    body = _report(cfg, h, w)
    if args.summary:
        body.pop("layers")
    _out(body)
    return 0


def cmd_bench(args) -> int:
    cfg = _config(args)
    sizes = [(s, s) for s in args.sizes] if args.sizes else [(args.height, args.width)]
    params = build(cfg, args.seed)
    workers = default_threads()
    results = []
    for h, w in sizes:
        _err(f"benchmarking {h}x{w}, {args.repeats} repeats, {workers} worker(s)")
        results.append(benchmark(params, cfg, h, w, repeats=args.repeats, warmup=args.warmup, workers=workers))
    body = {"params": param_count(params), "results": results}
    if len(results) > 1:
        body["time_ratio"] = results[-1]["mean_ms"] / results[0]["mean_ms"]
    _out(body)
    return 0


def cmd_gradcheck(args) -> int:
    from .checks import run_all

    def progress(r):
        _err(f"{r.suite:8s} {r.name:24s} max rel err {r.max_rel_err:.3e} (tol {r.tol:g}) "
             f"{'ok' if r.passed else 'FAIL'}")

    trials, pairs = (3, 2) if args.quick else (20, 10)
    results = run_all(args.seed, trials=trials, pairs=pairs, on_result=progress)
    worst = {}
    for r in results:
        worst[r.suite] = max(worst.get(r.suite, 0.0), r.max_rel_err)
    ok = all(r.passed for r in results)
    _out({"passed": ok, "worst": worst, "checks": [r.to_json() for r in results]})
    return 0 if ok else 1


def cmd_metrics(args) -> int:
    a, b = _load_any_image(_existing(args.a)), _load_any_image(_existing(args.b))
    if a.shape != b.shape:
        raise CliError(f"image shapes differ: {a.shape} vs {b.shape}")
    _out({"psnr": _fmt_psnr(psnr(a, b)), "ssim": ssim_metric(a, b)})
    return 0


def cmd_entropy(args) -> int:
    mosaic, _ = bayer.load_mosaic(_existing(args.input), require_sidecar=False)
    ent = bayer.packed_entropies(bayer.pack(mosaic), bins=args.bins)
    _out({"bins": args.bins, "channels": [
        {"name": name, "entropy": value, "green": i in bayer.GREEN}
        for i, (name, value) in enumerate(ent.items())
    ]})
    return 0


# ---------------------------------------------------------------------------

def _dims(p: argparse.ArgumentParser, required: bool) -> None:
    p.add_argument("--height", type=int, required=required)
    p.add_argument("--width", type=int, required=required)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="erienet", description="Low-light RAW enhancement toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("enhance", help="enhance one dark RAW mosaic")
    p.add_argument("--input", required=True, help="16-bit P5 mosaic with a JSON sidecar")
    p.add_argument("--weights", required=True, help="checkpoint file")
    p.add_argument("--output", required=True, help="P6 output path")
    p.add_argument("--ratio", default="auto", help="amplification ratio, or 'auto' to read the sidecar")
    p.add_argument("--reference", help="ground-truth image; prints PSNR and SSIM")
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("train", help="toy-scale training; loss trace as CSV on stdout")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", help="directory of <name>.pgm + <name>.json + <name>.ppm triples")
    src.add_argument("--synthetic", action="store_true", help="use the seeded synthetic dataset")
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--samples", type=int, default=16, help="synthetic dataset size")
    p.add_argument("--size", type=int, default=32, help="synthetic patch size (mosaic pixels)")
    _config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("report", help="layer manifest with parameter and flop totals (JSON)")
    _config_args(p)
    _dims(p, required=False)
    p.add_argument("--summary", action="store_true", help="omit the per-layer list")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("bench", help="eval-mode throughput (JSON)")
    _config_args(p)
    _dims(p, required=False)
    p.add_argument("--sizes", type=lambda s: [int(v) for v in s.split(",")], help="square sizes, e.g. 256,512")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="64-bit gradient-check suite; exit 0 when all pass")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quick", action="store_true", help="fewer random trials per op and loss")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("metrics", help="PSNR and SSIM between two images")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("entropy", help="per-channel entropy of a packed mosaic")
    p.add_argument("--input", required=True)
    p.add_argument("--bins", type=int, default=256)
    p.set_defaults(func=cmd_entropy)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command in ("report", "bench"):
        if args.command == "bench" and not args.sizes and not (args.height and args.width):
            parser.error("bench needs --height and --width, or --sizes")
        if (args.height is None) != (args.width is None):
            parser.error("--height and --width go together")
    try:
        return args.func(args)
    except (CliError, ValueError, OSError, KeyError) as exc:
        msg = str(exc).strip("'\"") or type(exc).__name__
        print(f"erienet: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
