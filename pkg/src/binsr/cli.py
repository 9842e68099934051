"""Command-line interface.

Subcommands: prepare, train, eval, infer, ablate-blocks, ablate-tails,
ablate-cutoff, bench-packed, analyze. Exit codes: 0 ok, 2 config error,
3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import statistics
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import _fallback, backend
from . import imaging as im
from . import quantize as Q
from . import training as tr
from .backend import BACKEND
from .errors import ConfigError, DataError, NumericError
from .graph import analyze_flow
from .models import NetworkConfig, build_network, param_count
from .tensor import Tensor, conv_out_hw

DESK_NET = dict(backbone="srresnet-like", num_blocks=4, channels=16, scale=2,
                block="bireal", tail="lightweight", quantizer="bireal-poly")
DESK_TRAIN = dict(epochs=10, iters_per_epoch=100, batch=16, lr0=2e-4,
                  halve_every=200, patch=24)


def _load_config_file(path) -> tuple[NetworkConfig, tr.TrainConfig]:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    extra = set(doc) - {"network", "train"}
    if extra:
        raise ConfigError(f"config {path}: unknown sections {sorted(extra)}")
    net = NetworkConfig.from_dict(doc.get("network", {}))
    train = tr.TrainConfig.from_dict(doc.get("train", {}))
    return net, train


def _echo_config(out_dir: Path, net: NetworkConfig, train: tr.TrainConfig):
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"network": net.to_dict(), "train": train.to_dict()}
    (out_dir / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# -- prepare -------------------------------------------------------------------


def cmd_prepare(args) -> int:
    hr_dir = Path(args.hr)
    if not hr_dir.is_dir():
        raise DataError(f"HR directory {hr_dir} does not exist")
    pairs, skipped = im.make_pairs(hr_dir, args.scale)
    if not pairs:
        raise DataError(f"no usable PNG files in {hr_dir}")
    out = Path(args.out)
    rows = []
    for p in pairs:
        hr_path = (out / "hr" / f"{p.name}.png").resolve()
        lr_path = (out / "lr" / f"{p.name}.png").resolve()
        im.save_png(p.hr, hr_path)
        im.save_png(p.lr, lr_path)
        rows.append((hr_path, lr_path))
    im.write_manifest(out / "manifest.txt", rows)
    print(f"prepared {len(pairs)} pairs at scale {args.scale} -> {out / 'manifest.txt'}")
    if skipped:
        print(f"warning: skipped {skipped} unreadable file(s)", file=sys.stderr)
    return 0


# -- train / eval / infer ----------------------------------------------------------


def cmd_train(args) -> int:
    net, cfg = _load_config_file(args.config)
    pairs = im.load_manifest(args.data, net.scale)
    out = Path(args.out)
    _echo_config(out, net, cfg)
    log_path = out / "log.txt"
    with open(log_path, "w") as f:
        def echo(line):
            print(line)
            f.write(line + "\n")
            f.flush()
        tr.train(net, cfg, pairs, out_dir=out, val_pairs=pairs,
                 resume=args.resume, echo=echo)
    print(f"done; checkpoints and log in {out}")
    return 0


def cmd_eval(args) -> int:
    ckpt = tr.load_checkpoint(args.ckpt)
    g = tr.restore_network(ckpt)
    pairs = im.load_manifest(args.data, ckpt.net.scale)
    mode = "eval-dense" if args.dense else "eval"
    model, baseline = tr.evaluate(g, ckpt.net, pairs, mode=mode)
    print(model.to_csv(), end="")
    print(f"bicubic,{baseline.mean_psnr:.4f},{baseline.mean_ssim:.6f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(model.to_csv())
        (out / "bicubic.csv").write_text(baseline.to_csv())
    return 0


def cmd_infer(args) -> int:
    ckpt = tr.load_checkpoint(args.ckpt)
    g = tr.restore_network(ckpt)
    lr = im.load_png(args.lr)
    sr = tr.tensor_to_img(g.forward(tr.img_to_tensor(lr), mode="eval"))
    im.save_png(sr, args.out)
    print(f"{args.lr} ({lr.width}x{lr.height}) -> {args.out} "
          f"({sr.width}x{sr.height}) at x{ckpt.net.scale}")
    return 0


# -- ablations -----------------------------------------------------------------------


def _desk_configs(args) -> tuple[NetworkConfig, tr.TrainConfig]:
    net = NetworkConfig(**DESK_NET, seed=0)
    cfg = tr.TrainConfig(**DESK_TRAIN, seed=0)
    net = replace(net, num_blocks=args.blocks, channels=args.channels)
    cfg = replace(cfg, epochs=args.epochs, iters_per_epoch=args.iters,
                  batch=args.batch, patch=args.patch)
    return net.validate(), cfg.validate()


def _run_variant(label: str, net: NetworkConfig, cfg: tr.TrainConfig,
                 pairs, val_pairs, out: Path, seed: int) -> dict:
    net = replace(net, seed=seed).validate()
    cfg = replace(cfg, seed=seed).validate()
    run_dir = out / label / f"seed{seed}"
    _echo_config(run_dir, net, cfg)
    rep = analyze_flow(build_network(net))
    t0 = time.perf_counter()
    res = tr.train(net, cfg, pairs, out_dir=run_dir)
    (run_dir / "log.txt").write_text("\n".join(res.log) + "\n")
    model, baseline = tr.evaluate(res.graph, net, val_pairs or pairs, mode="eval")
    row = {
        "variant": label, "seed": seed,
        "psnr": model.mean_psnr, "ssim": model.mean_ssim,
        "bicubic_psnr": baseline.mean_psnr,
        "params": param_count(res.graph),
        "severed": ";".join(rep.severed_at),
        "seconds": time.perf_counter() - t0,
    }
    print(f"  {label} seed {seed}: psnr {row['psnr']:.3f} "
          f"ssim {row['ssim']:.4f} ({row['seconds']:.1f}s)")
    return row


def _write_ablation(out: Path, name: str, rows: list, order: list):
    runs = ["variant,seed,psnr,ssim,bicubic_psnr,params,severed,seconds"]
    for r in rows:
        runs.append(f"{r['variant']},{r['seed']},{r['psnr']:.4f},{r['ssim']:.6f},"
                    f"{r['bicubic_psnr']:.4f},{r['params']},{r['severed']},"
                    f"{r['seconds']:.1f}")
    (out / "runs.csv").write_text("\n".join(runs) + "\n")
    lines = ["variant,params,psnr_median,ssim_median"]
    for label in order:
        got = [r for r in rows if r["variant"] == label]
        ps = statistics.median(r["psnr"] for r in got)
        ss = statistics.median(r["ssim"] for r in got)
        lines.append(f"{label},{got[0]['params']},{ps:.4f},{ss:.6f}")
    text = "\n".join(lines) + "\n"
    (out / f"{name}.csv").write_text(text)
    print(text, end="")


def _ablate(args, variants: list) -> int:
    if getattr(args, "variants", None):
        wanted = [v.strip() for v in args.variants.split(",") if v.strip()]
        known = {v[0] for v in variants}
        bad = [w for w in wanted if w not in known]
        if bad:
            raise ConfigError(f"unknown variants {bad}; choose from {sorted(known)}")
        variants = [v for v in variants if v[0] in wanted]
    net0, cfg0 = _desk_configs(args)
    pairs = im.load_manifest(args.data, net0.scale)
    val_pairs = im.load_manifest(args.val, net0.scale) if args.val else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for label, tweak in variants:
        for seed in range(args.seeds):
            rows.append(_run_variant(label, tweak(net0), cfg0, pairs, val_pairs,
                                     out, seed))
    _write_ablation(out, args.csv_name, rows, [v[0] for v in variants])
    return 0


def cmd_ablate_tails(args) -> int:
    variants = [
        ("original", lambda n: replace(n, tail="original")),
        ("repeat-shortcut", lambda n: replace(n, tail="repeat-shortcut")),
        ("lightweight", lambda n: replace(n, tail="lightweight")),
        ("full-precision", lambda n: replace(n, tail="lightweight",
                                             full_precision=True)),
    ]
    args.csv_name = "tails"
    return _ablate(args, variants)


def cmd_ablate_blocks(args) -> int:
    variants = [(b, lambda n, b=b: replace(n, block=b, tail="lightweight"))
                for b in ("original", "former", "later", "bireal")]
    args.csv_name = "blocks"
    return _ablate(args, variants)


def cmd_ablate_cutoff(args) -> int:
    nconv = 2 * args.blocks
    positions = list(dict.fromkeys([0, nconv // 2, nconv - 1, "tail"]))
    variants = [(str(p), lambda n, p=p: replace(n, block="bireal",
                                                tail="lightweight", cutoff=p))
                for p in positions]
    args.csv_name = "cutoff"
    return _ablate(args, variants)


# -- bench ------------------------------------------------------------------------------


def cmd_bench_packed(args) -> int:
    c, hw, k = args.c, args.hw, args.k
    rng = np.random.default_rng(0)
    x = Tensor(np.where(rng.standard_normal((args.batch, c, hw, hw)) >= 0,
                        1.0, -1.0).astype(np.float32))
    latent = Tensor(rng.standard_normal((c, c, k, k)).astype(np.float32))
    bw = Q.binarize_weights(latent)
    pad = k // 2

    dense = Q.binconv_forward(x, bw, stride=1, pad=pad).data
    pw = Q.pack_weights(bw)
    plane = Q.pack_bits(x.data, pad=pad)
    packed = Q.xnor_conv(plane, pw, stride=1, pad=pad).data
    if not np.array_equal(dense, packed):
        raise NumericError("packed kernel output diverged from the dense path; "
                           "benchmark would be meaningless")
    if not np.array_equal(backend.xnor_conv_dots(plane.words, plane.mask,
                                                 pw.words, 1),
                          _fallback.xnor_conv_dots(plane.words, plane.mask,
                                                   pw.words, 1)):
        raise NumericError("backend implementations disagree on the "
                           "benchmarked shape")

    def timed(fn) -> float:
        best = []
        for _ in range(args.iters):
            t0 = time.perf_counter()
            fn()
            best.append(time.perf_counter() - t0)
        return 1e3 * statistics.median(best)

    t_dense = timed(lambda: Q.binconv_forward(x, bw, stride=1, pad=pad))
    t_packed = timed(lambda: Q.xnor_conv(Q.pack_bits(x.data, pad=pad), pw,
                                         stride=1, pad=pad))
    t_kernel = timed(lambda: backend.xnor_conv_dots(plane.words, plane.mask,
                                                    pw.words, 1))
    t_fb = t_kernel if BACKEND == "fallback" else timed(
        lambda: _fallback.xnor_conv_dots(plane.words, plane.mask, pw.words, 1))
    ho, wo = conv_out_hw(hw, hw, k, k, 1, pad)
    interior = c * k * k
    corner = c * (k - pad) * (k - pad)  # corner windows lose the pad border
    print(f"backend: {BACKEND}")
    print(f"geometry: C={c} k={k} input {hw}x{hw} batch {args.batch} "
          f"-> output {ho}x{wo}")
    print("equality precheck: ok (bitwise)")
    print(f"n_valid per output: interior {interior}, corner {corner}")
    print(f"dense: {t_dense:.3f} ms   packed: {t_packed:.3f} ms   "
          f"speedup: {t_dense / t_packed:.2f}")
    if BACKEND == "fallback":
        print(f"kernel only: fallback {t_kernel:.3f} ms")
    else:
        print(f"kernel only: {BACKEND} {t_kernel:.3f} ms   "
              f"pure-numpy fallback {t_fb:.3f} ms")
    return 0


# -- analyze ---------------------------------------------------------------------------


def cmd_analyze(args) -> int:
    net, _ = _load_config_file(args.config)
    g = build_network(net)
    rep = analyze_flow(g)
    print(f"nodes: {len(g.nodes)}  parameters: {param_count(g)}")
    print(f"fp path input->output: {'yes' if rep.has_fp_path else 'no'}")
    sev = ", ".join(rep.severed_at) if rep.severed_at else "none"
    print(f"severed at: {sev}")
    n = len(rep.binconv_flags)
    print(f"binarized convs: {n}")
    for name, f in rep.binconv_flags.items():
        print(f"  {name}  fp-input {'yes' if f.receives_fp_input else 'no'}  "
              f"acc-grad {'yes' if f.receives_accurate_grad else 'no'}")
    if n:
        print(f"all {n} receive fp input: "
              f"{'yes' if rep.all_fp_input() else 'no'}")
        print(f"all {n} receive accurate gradient: "
              f"{'yes' if rep.all_accurate_grad() else 'no'}")
    if args.dump:
        print(g.dump(), end="")
    return 0


# -- parser -------------------------------------------------------------------------------


def _add_desk_flags(p: argparse.ArgumentParser):
    p.add_argument("--preset", choices=["desk"], default="desk")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--data", required=True, help="manifest from `prepare`")
    p.add_argument("--val", default=None,
                   help="held-out manifest to score instead of the training set")
    p.add_argument("--out", required=True)
    p.add_argument("--blocks", type=int, default=DESK_NET["num_blocks"])
    p.add_argument("--channels", type=int, default=DESK_NET["channels"])
    p.add_argument("--epochs", type=int, default=DESK_TRAIN["epochs"])
    p.add_argument("--iters", type=int, default=DESK_TRAIN["iters_per_epoch"])
    p.add_argument("--batch", type=int, default=DESK_TRAIN["batch"])
    p.add_argument("--patch", type=int, default=DESK_TRAIN["patch"])


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="binsr",
        description="Binarized super-resolution: train, evaluate, ablate.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="build (HR, bicubic LR) pairs + manifest")
    p.add_argument("--hr", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scale", type=int, choices=[2, 3, 4], required=True)
    p.set_defaults(fn=cmd_prepare)

    p = sub.add_parser("train", help="train a network from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="PSNR/SSIM of a checkpoint over a manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--dense", action="store_true",
                   help="use the dense float path instead of the packed kernel")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("infer", help="upscale one PNG with a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--lr", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("ablate-tails", help="compare upsampling tails")
    _add_desk_flags(p)
    p.add_argument("--variants", default=None,
                   help="comma-separated subset of variants to run")
    p.set_defaults(fn=cmd_ablate_tails)

    p = sub.add_parser("ablate-blocks", help="compare residual block wirings")
    _add_desk_flags(p)
    p.add_argument("--variants", default=None,
                   help="comma-separated subset of variants to run")
    p.set_defaults(fn=cmd_ablate_blocks)

    p = sub.add_parser("ablate-cutoff", help="sever the bypass at a position")
    _add_desk_flags(p)
    p.set_defaults(fn=cmd_ablate_cutoff)

    p = sub.add_parser("bench-packed", help="time packed XNOR vs dense conv")
    p.add_argument("--c", type=int, default=64)
    p.add_argument("--hw", type=int, default=64)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--iters", type=int, default=30)
    p.set_defaults(fn=cmd_bench_packed)

    p = sub.add_parser("analyze", help="information-flow report for a config")
    p.add_argument("--config", required=True)
    p.add_argument("--dump", action="store_true", help="print the edge list too")
    p.set_defaults(fn=cmd_analyze)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
