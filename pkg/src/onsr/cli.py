"""Command-line surface: dataset synthesis, pretraining, adaptation, eval.

Exit codes: 0 success, 2 usage/validation error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .degradation import (DEFAULT_KERNEL_SIZE, DegradationSpec, Kernel2D,
                          degrade, effective_kernel, gd_from_params,
                          gd_to_params, synth_kernel)
from .imaging import ImageBuf, Rng, load_png, psnr, save_png, ssim
from .models import (GrConfig, ModelFormatError, init_params, load_params,
                     save_params)
from .trainer import (ExternalPool, NumericalAbort, TrainConfig, nonblind_adapt,
                      online_adapt, pretrain_gr)

MANIFEST_VERSION = 1


class UsageError(ValueError):
    pass


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("ONSR_THREADS", "1")))
    except ValueError:
        return 1


def _list_pngs(directory: Path):
    if not directory.is_dir():
        raise UsageError(f"not a directory: {directory}")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() == ".png")
    if not files:
        raise UsageError(f"no PNG files in {directory}")
    return files


def _crop_divisible(img: ImageBuf, scale: int) -> ImageBuf:
    h = img.height - img.height % scale
    w = img.width - img.width % scale
    if (h, w) != (img.height, img.width):
        print(f"  auto-cropped {img.height}x{img.width} -> {h}x{w} "
              f"(scale-{scale} divisibility)")
    return ImageBuf(img.data[:, :h, :w])


def _load_pool(hr_dir: Path, scale: int, lr_patch: int = 32,
               limit: int | None = None) -> ExternalPool:
    images = [_crop_divisible(load_png(p).to_rgb(), scale) for p in _list_pngs(hr_dir)]
    return ExternalPool(images, scale=scale, lr_patch=lr_patch, limit=limit)


def _preset_config(preset: str, scale: int) -> GrConfig:
    if preset == "paper":
        return GrConfig.paper_preset(scale)
    return GrConfig(scale=scale)


# -- synth ------------------------------------------------------------------


def cmd_synth(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    hr_files = _list_pngs(Path(args.hr_dir))[:args.count]
    if len(hr_files) < args.count:
        raise UsageError(f"--count {args.count} but only {len(hr_files)} HR images found")
    ksize = args.kernel_size or DEFAULT_KERNEL_SIZE[args.scale]
    root = Rng(args.seed)
    records = []

    def synth_one(item):
        idx, path = item
        rng = root.stream(f"image{idx}")
        img = _crop_divisible(load_png(path).to_rgb(), args.scale)
        kernel, (l1, l2, theta) = synth_kernel(rng.stream("kernel"), ksize)
        spec = DegradationSpec(kernel, args.scale, args.noise_sigma)
        lr = degrade(img, spec, rng.stream("noise"))
        lr_path = out_dir / f"{path.stem}_lr.png"
        csv_path = out_dir / f"{path.stem}_kernel.csv"
        save_png(lr, lr_path)
        kernel.save_csv(csv_path)
        return {"lr_path": str(lr_path), "hr_path": str(path),
                "kernel_csv_path": str(csv_path), "scale": args.scale,
                "noise_sigma": args.noise_sigma, "seed": args.seed,
                "lambda1": l1, "lambda2": l2, "theta": theta}

    items = list(enumerate(hr_files))
    if _workers() > 1:
        with ThreadPoolExecutor(max_workers=_workers()) as ex:
            records = list(ex.map(synth_one, items))
    else:
        records = [synth_one(it) for it in items]
    manifest = {"manifest_version": MANIFEST_VERSION, "generator_seed": args.seed,
                "scale": args.scale, "count": len(records), "images": records}
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
    print(f"wrote {len(records)} LR images + kernels to {out_dir}")
    return 0


# -- pretrain ---------------------------------------------------------------


def cmd_pretrain(args) -> int:
    pool = _load_pool(Path(args.hr_dir), args.scale)
    cfg = TrainConfig(scale=args.scale, seed=args.seed,
                      gr_config=_preset_config(args.preset, args.scale))
    params = pretrain_gr(pool, args.scale, args.steps, cfg)
    save_params(params, args.out)
    # report a smoothed final loss for quick sanity checks
    if args.steps > 0:
        print(f"pretrained {args.steps} steps -> {args.out} "
              f"({params.num_values()} parameter values)")
    else:
        print(f"wrote seeded random init -> {args.out}")
    return 0


# -- adapt ------------------------------------------------------------------


def cmd_adapt(args) -> int:
    if args.non_blind and not args.kernel:
        raise UsageError("--non-blind requires --kernel")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lr_img = load_png(args.lr).to_rgb()
    cfg = TrainConfig(steps=args.steps, test_interval=args.test_interval,
                      lambda_gan=args.lambda_gan, mode=args.mode,
                      variant=args.variant, seed=args.seed, scale=args.scale,
                      external_limit=args.external_limit,
                      gr_config=_preset_config(args.preset, args.scale))
    pool = _load_pool(Path(args.hr_dir), args.scale, cfg.lr_patch,
                      limit=args.external_limit)
    if args.init:
        gr_init = load_params(args.init)
        if gr_init.role != "Gr":
            raise UsageError(f"--init model has role {gr_init.role}, expected Gr")
    else:
        gr_init = init_params(cfg.gr_config, Rng(cfg.seed).stream("init_gr"))
    gt_hr = load_png(args.gt).to_rgb() if args.gt else None
    t0 = time.monotonic()
    if args.non_blind:
        kernel = Kernel2D.load_csv(args.kernel)
        result = nonblind_adapt(lr_img, pool, gr_init, kernel, cfg, gt_hr=gt_hr)
    else:
        result = online_adapt(lr_img, pool, gr_init, cfg, gt_hr=gt_hr)
    elapsed_ms = int((time.monotonic() - t0) * 1000)

    save_png(result.sr_final, out_dir / "sr_final.png")
    for step, img in result.checkpoints:
        save_png(img, out_dir / f"sr_step{step}.png")
    result.kernel_estimate.save_csv(out_dir / "kernel_estimate.csv")
    if not args.non_blind:
        save_params(gd_to_params(result.session.gd), out_dir / "gd_model.bin")
    with open(out_dir / "metrics.jsonl", "w") as fh:
        for rec in result.metrics:
            if args.timing:
                rec = {**rec, "ms_elapsed": elapsed_ms}
            fh.write(json.dumps(rec) + "\n")
    print(f"adaptation finished: {args.steps} steps in {elapsed_ms} ms -> {out_dir}")
    return 0


# -- eval -------------------------------------------------------------------


def cmd_eval(args) -> int:
    sr_files = {p.name: p for p in _list_pngs(Path(args.sr_dir))}
    gt_files = {p.name: p for p in _list_pngs(Path(args.gt_dir))}
    missing = sorted(set(sr_files) ^ set(gt_files))
    if missing:
        raise UsageError("unmatched files: " + ", ".join(missing))

    def eval_one(name):
        a = load_png(sr_files[name]).to_rgb()
        b = load_png(gt_files[name]).to_rgb()
        if args.luma:
            a, b = a.luma(), b.luma()
        return {"name": name, "psnr": psnr(a, b, border_crop=args.border_crop),
                "ssim": ssim(a, b)}

    names = sorted(sr_files)
    if _workers() > 1:
        with ThreadPoolExecutor(max_workers=_workers()) as ex:
            rows = list(ex.map(eval_one, names))
    else:
        rows = [eval_one(n) for n in names]
    report = {"metric_mode": "luma" if args.luma else "rgb",
              "border_crop": args.border_crop, "count": len(rows),
              "mean_psnr": float(np.mean([r["psnr"] for r in rows])),
              "mean_ssim": float(np.mean([r["ssim"] for r in rows])),
              "images": rows}
    text = json.dumps(report, indent=2)
    if args.report:
        Path(args.report).write_text(text)
    print(text)
    return 0


# -- kernel export ----------------------------------------------------------


def cmd_kernel(args) -> int:
    params = load_params(args.model)
    if params.role != "Gd":
        raise UsageError(f"model role is {params.role}, expected Gd")
    net = gd_from_params(params)
    kernel = effective_kernel(net, args.support)
    if args.out:
        kernel.save_csv(args.out)
    if args.pgm:
        taps = kernel.taps
        lo, hi = taps.min(), taps.max()
        scaled = np.zeros_like(taps) if hi == lo else (taps - lo) / (hi - lo)
        q = np.floor(scaled * 255 + 0.5).astype(np.uint8)
        with open(args.pgm, "wb") as fh:
            fh.write(f"P5\n{kernel.size} {kernel.size}\n255\n".encode())
            fh.write(q.tobytes())
    print(f"effective kernel {kernel.size}x{kernel.size} written")
    return 0


# -- argument parsing -------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="onsr",
                                description="Online blind super-resolution engine")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="synthesize a degraded LR dataset")
    sp.add_argument("--hr-dir", required=True)
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--scale", type=int, choices=(2, 4), default=2)
    sp.add_argument("--count", type=int, required=True)
    sp.add_argument("--noise-sigma", type=float, default=0.0)
    sp.add_argument("--kernel-size", type=int, default=None)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_synth)

    pp = sub.add_parser("pretrain", help="bicubic-pretrain the reconstructor")
    pp.add_argument("--hr-dir", required=True)
    pp.add_argument("--scale", type=int, choices=(2, 4), default=2)
    pp.add_argument("--steps", type=int, default=200)
    pp.add_argument("--preset", choices=("lite", "paper"), default="lite")
    pp.add_argument("--seed", type=int, default=0)
    pp.add_argument("--out", required=True)
    pp.set_defaults(func=cmd_pretrain)

    ap = sub.add_parser("adapt", help="online-adapt to one LR image")
    ap.add_argument("--lr", required=True)
    ap.add_argument("--hr-dir", required=True)
    ap.add_argument("--scale", type=int, choices=(2, 4), default=2)
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--test-interval", type=int, default=10)
    ap.add_argument("--init", default=None)
    ap.add_argument("--mode", choices=("separate", "joint"), default="separate")
    ap.add_argument("--variant", choices=("IBSR", "EBSR", "IB-EBSR", "ONSR", "IB-EB-GSR"),
                    default="ONSR")
    ap.add_argument("--lambda", dest="lambda_gan", type=float, default=1.0)
    ap.add_argument("--non-blind", action="store_true")
    ap.add_argument("--kernel", default=None)
    ap.add_argument("--external-limit", type=int, default=None)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out-dir", required=True)
    ap.add_argument("--preset", choices=("lite", "paper"), default="lite")
    ap.add_argument("--gt", default=None, help="optional ground-truth HR for metrics")
    ap.add_argument("--timing", action="store_true",
                    help="include wall-clock ms in metrics.jsonl (non-deterministic)")
    ap.set_defaults(func=cmd_adapt)

    ep = sub.add_parser("eval", help="PSNR/SSIM report over matched directories")
    ep.add_argument("--sr-dir", required=True)
    ep.add_argument("--gt-dir", required=True)
    ep.add_argument("--border-crop", type=int, default=0)
    ep.add_argument("--luma", action="store_true")
    ep.add_argument("--report", default=None)
    ep.set_defaults(func=cmd_eval)

    kp = sub.add_parser("kernel", help="export a degradation model's effective kernel")
    kp.add_argument("--model", required=True)
    kp.add_argument("--support", type=int, default=None)
    kp.add_argument("--out", default=None)
    kp.add_argument("--pgm", default=None)
    kp.set_defaults(func=cmd_kernel)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericalAbort as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (UsageError, ModelFormatError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
