"""Command-line front end.

One executable, subcommand style; every run writes its outputs plus a JSON
run manifest (resolved configuration, tool version, seed, timestamps) beside
them, so any result can be reproduced from the manifest alone. Exit codes:
0 success, 1 usage/configuration, 2 data/format, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import glob
import json
import os
import sys
import time
from datetime import datetime, timezone

import numpy as np

from . import __version__
from .data import (
    degrade,
    load_dataset,
    load_pgm,
    parse_degradation,
    save_pgm,
    stable_seed,
)
from .erf import erf_compare, erf_inputs, erf_map, parse_variant
from .errors import ConfigError, DataError, FormatError, NumericError
from .metrics import MetricReport
from .model import (
    FLOP_TARGETS_128,
    PARAM_TARGETS,
    build,
    count_params,
    estimate_flops,
    load_checkpoint,
    model_config,
    param_breakdown,
)
from .shift import fuse, init_omni_shift, omni_shift_forward
from .tensor import Tensor, no_grad, op_counts, reset_op_counts
from .train import parse_run_config, train, train_config_from_run
from .wkv import bi_wkv_oracle, bi_wkv_scan


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="rwkvir", description=__doc__)
    p.add_argument("--version", action="version", version=f"rwkvir {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a run-config file")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True, help="dataset manifest (id\\thq_path\\tsplit)")
    t.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--spec", default="kspace:0.0625", help="degradation applied to HQ inputs")
    e.add_argument("--split", default="test", choices=["train", "val", "test"])
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--save-images", action="store_true")

    d = sub.add_parser("degrade", help="degrade every PGM in a directory")
    d.add_argument("--in", dest="indir", required=True)
    d.add_argument("--spec", required=True, help="e.g. kspace:0.0625, gauss:0.05, poisson:4")
    d.add_argument("--out", required=True)
    d.add_argument("--seed", type=int, default=0)

    r = sub.add_parser("erf", help="effective receptive field maps")
    r.add_argument("--variant", default="re-wkv+omni",
                   help="comma-separated '<attention>+<shift>' combos")
    r.add_argument("--ckpt", help="probe a trained model instead of a fresh single block")
    r.add_argument("--out", required=True)
    r.add_argument("--size", type=int, default=32)
    r.add_argument("--samples", type=int, default=8)
    r.add_argument("--seed", type=int, default=0)

    b = sub.add_parser("bench", help="kernel timing and op-count harness")
    b.add_argument("--op", default="bi-wkv", choices=["bi-wkv", "omni-shift"])
    b.add_argument("--sizes", default="256,1024,4096")
    b.add_argument("--channels", type=int, default=4)
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--oracle-repeats", type=int, default=2)
    b.add_argument("--out", required=True)
    b.add_argument("--seed", type=int, default=0)

    f = sub.add_parser("fuse-check", help="verify the shift re-parameterization identity")
    f.add_argument("--trials", type=int, default=100)
    f.add_argument("--tolerance", type=float, default=1e-12)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out")

    q = sub.add_parser("params", help="parameter count report per variant")
    q.add_argument("--variant", required=True, choices=["light", "full"])
    q.add_argument("--out")
    return p


def _write_manifest(out_dir: str, command: str, resolved: dict, seed, started: float) -> None:
    manifest = {
        "subcommand": command,
        "config": resolved,
        "version": __version__,
        "seed": seed,
        "started_at": datetime.fromtimestamp(started, timezone.utc).isoformat(),
        "finished_at": datetime.now(timezone.utc).isoformat(),
    }
    with open(os.path.join(out_dir, "run_manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, default=str)


def _cmd_train(args) -> int:
    values = parse_run_config(args.config)
    cfg = train_config_from_run(values)
    spec = parse_degradation(values["degrade"], seed=values["seed"])
    mcfg = model_config(
        values["variant"],
        attention=values["attention"],
        shift=values["shift"],
        recurrence=values["recurrence"],
        **({"hidden_ratio": values["hidden_ratio"]} if "hidden_ratio" in values else {}),
    )
    model = build(mcfg, seed=values["seed"])
    dataset = load_dataset(args.data, spec)
    os.makedirs(args.out, exist_ok=True)
    started = time.time()
    result = train(model, dataset["train"], dataset["val"], cfg, out_dir=args.out, log=print)
    with open(os.path.join(args.out, "log.csv"), "w") as fh:
        fh.write("\n".join(result.csv_rows()) + "\n")
    from .plots import save_loss_curve

    save_loss_curve(result.rows, os.path.join(args.out, "loss_curve.png"))
    _write_manifest(args.out, "train", {**values, "data": args.data}, values["seed"], started)
    if result.final_val_psnr is not None:
        print(f"final val PSNR: {result.final_val_psnr:.3f} dB")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def _cmd_eval(args) -> int:
    started = time.time()
    model, info = load_checkpoint(args.ckpt)
    spec = parse_degradation(args.spec, seed=args.seed)
    dataset = load_dataset(args.data, spec)
    pairs = dataset[args.split]
    if not pairs:
        raise DataError(f"no images in split {args.split!r}")
    os.makedirs(args.out, exist_ok=True)
    report = MetricReport()
    for pair in pairs:
        with no_grad():
            restored = model.forward(Tensor(pair.lq[:, :, None])).data[:, :, 0]
        restored = np.clip(restored, 0.0, 1.0)
        report.add(pair.id, restored, pair.hq)
        if args.save_images:
            save_pgm(os.path.join(args.out, f"{pair.id}_restored.pgm"), restored)
    with open(os.path.join(args.out, "metrics.csv"), "w") as fh:
        fh.write("\n".join(report.csv_rows()) + "\n")
    from .plots import save_metric_bars

    save_metric_bars(report, os.path.join(args.out, "metrics.png"))
    _write_manifest(args.out, "eval", vars(args), args.seed, started)
    agg = report.aggregate()
    print(f"{args.split}: psnr={agg['psnr'][0]:.3f}±{agg['psnr'][1]:.3f} "
          f"ssim={agg['ssim'][0]:.4f} rmse={agg['rmse'][0]:.5f} over {len(pairs)} images")
    return 0


def _cmd_degrade(args) -> int:
    started = time.time()
    spec = parse_degradation(args.spec, seed=args.seed)
    paths = sorted(glob.glob(os.path.join(args.indir, "*.pgm")))
    if not paths:
        raise DataError(f"no .pgm files in {args.indir}")
    os.makedirs(args.out, exist_ok=True)
    for path in paths:
        name = os.path.basename(path)
        hq = load_pgm(path)
        lq = degrade(hq, spec, item_seed=stable_seed(spec.seed, name))
        save_pgm(os.path.join(args.out, name), lq)
    _write_manifest(args.out, "degrade", vars(args), args.seed, started)
    print(f"degraded {len(paths)} images -> {args.out}")
    return 0


def _cmd_erf(args) -> int:
    from .plots import save_erf_heatmap

    started = time.time()
    os.makedirs(args.out, exist_ok=True)
    rows = ["variant,coverage,samples,size"]
    if args.ckpt:
        model, _ = load_checkpoint(args.ckpt)
        inputs = erf_inputs(args.size, args.samples, args.seed)
        maps = [erf_map(model.forward, inputs, variant=f"model[{model.config.variant}]")]
    else:
        variants = [v.strip() for v in args.variant.split(",") if v.strip()]
        for v in variants:
            parse_variant(v)  # fail fast on typos
        maps = erf_compare(variants, size=args.size, samples=args.samples, seed=args.seed)
    for m in maps:
        tag = m.variant.replace("+", "_").replace("[", "_").replace("]", "")
        save_pgm(os.path.join(args.out, f"erf_{tag}.pgm"), m.values)
        save_erf_heatmap(m.values, os.path.join(args.out, f"erf_{tag}.png"), title=m.variant)
        rows.append(f"{m.variant},{m.coverage():.6f},{m.samples},{args.size}")
        print(f"{m.variant}: coverage={m.coverage():.4f}")
    with open(os.path.join(args.out, "erf_stats.csv"), "w") as fh:
        fh.write("\n".join(rows) + "\n")
    _write_manifest(args.out, "erf", vars(args), args.seed, started)
    return 0


def _time_ns(fn, repeats: int) -> tuple[float, float]:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        fn()
        times.append(time.perf_counter_ns() - t0)
    return float(np.mean(times)), float(np.std(times))


def bench_bi_wkv(sizes, channels: int, repeats: int, oracle_repeats: int, seed: int = 0):
    """Times the linear scan against the quadratic oracle at each T."""
    rng = np.random.default_rng(seed)
    rows = []
    for T in sizes:
        k = rng.normal(0.0, 1.0, (T, channels))
        v = rng.normal(0.0, 1.0, (T, channels))
        w = rng.uniform(0.3, 1.3, channels)
        u = rng.uniform(-0.3, 0.3, channels)
        mean, std = _time_ns(lambda: bi_wkv_scan(k, v, w, u), repeats)
        rows.append({"T": T, "C": channels, "variant": "scan", "mean_ns": mean, "std_ns": std})
        mean, std = _time_ns(lambda: bi_wkv_oracle(k, v, w, u), oracle_repeats)
        rows.append({"T": T, "C": channels, "variant": "oracle", "mean_ns": mean, "std_ns": std})
    return rows


def bench_omni_shift(channels: int, size: int, repeats: int, seed: int = 0):
    """Times train vs fused shift and asserts the fused path is one conv."""
    rng = np.random.default_rng(seed)
    p = init_omni_shift(channels, rng)
    for t in (p.k5, p.k3, p.k1):
        t.data = rng.normal(0.0, 0.3, t.data.shape)
    fp = fuse(p)
    x = Tensor(rng.random((size, size, channels)))
    rows = []
    with no_grad():
        mean, std = _time_ns(lambda: omni_shift_forward(x, p), repeats)
        rows.append({"T": size * size, "C": channels, "variant": "train",
                     "mean_ns": mean, "std_ns": std})
        reset_op_counts()
        omni_shift_forward(x, fp)
        if op_counts["depthwise_conv2d"] != 1:
            raise NumericError(
                f"fused shift ran {op_counts['depthwise_conv2d']} depthwise convs, expected 1"
            )
        mean, std = _time_ns(lambda: omni_shift_forward(x, fp), repeats)
        rows.append({"T": size * size, "C": channels, "variant": "fused",
                     "mean_ns": mean, "std_ns": std})
    return rows


def _cmd_bench(args) -> int:
    from .plots import save_bench_plot

    started = time.time()
    sizes = [int(s) for s in args.sizes.split(",") if s]
    if args.op == "bi-wkv":
        rows = bench_bi_wkv(sizes, args.channels, args.repeats, args.oracle_repeats, args.seed)
    else:
        rows = bench_omni_shift(args.channels, size=64, repeats=args.repeats, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "bench.csv")
    with open(csv_path, "w") as fh:
        fh.write("T,C,variant,mean_ns,std_ns\n")
        for r in rows:
            fh.write(f"{r['T']},{r['C']},{r['variant']},{r['mean_ns']:.0f},{r['std_ns']:.0f}\n")
    save_bench_plot(rows, os.path.join(args.out, "bench.png"))
    for variant in ("scan", "oracle"):
        pts = sorted((r["T"], r["mean_ns"]) for r in rows if r["variant"] == variant)
        for (t0, n0), (t1, n1) in zip(pts, pts[1:]):
            print(f"{variant}: T={t0}->{t1} ratio {n1 / n0:.2f}")
    _write_manifest(args.out, "bench", vars(args), args.seed, started)
    print(f"wrote {csv_path}")
    return 0


def fuse_check(trials: int, tolerance: float, seed: int = 0) -> tuple[int, float]:
    """Re-parameterization identity over random draws, including tiny
    border-dominated inputs. Returns (passes, worst difference)."""
    rng = np.random.default_rng(seed)
    passes = 0
    worst = 0.0
    with no_grad():
        for i in range(trials):
            C = int(rng.integers(1, 9))
            size = 3 if i % 4 == 0 else int(rng.integers(5, 12))
            p = init_omni_shift(C, rng)
            p.k5.data = rng.normal(0.0, 1.0, p.k5.data.shape)
            p.k3.data = rng.normal(0.0, 1.0, p.k3.data.shape)
            p.k1.data = rng.normal(0.0, 1.0, p.k1.data.shape)
            p.alpha.data = rng.normal(0.0, 1.0, 4)
            x = Tensor(rng.normal(0.0, 1.0, (size, size, C)))
            diff = np.abs(
                omni_shift_forward(x, p).data - omni_shift_forward(x, fuse(p)).data
            ).max()
            worst = max(worst, diff)
            passes += diff <= tolerance
    return passes, worst


def _cmd_fuse_check(args) -> int:
    started = time.time()
    passes, worst = fuse_check(args.trials, args.tolerance, args.seed)
    print(f"{passes}/{args.trials} within {args.tolerance:g} (worst {worst:.3e})")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "fuse_check.csv"), "w") as fh:
            fh.write("trials,passes,tolerance,worst\n")
            fh.write(f"{args.trials},{passes},{args.tolerance:g},{worst:.6e}\n")
        _write_manifest(args.out, "fuse-check", vars(args), args.seed, started)
    if passes != args.trials:
        raise NumericError(f"fusion identity violated: worst difference {worst:.3e}")
    return 0


def _cmd_params(args) -> int:
    started = time.time()
    cfg = model_config(args.variant)
    model = build(cfg, seed=0)
    total = count_params(model)
    groups = param_breakdown(model)
    target = PARAM_TARGETS[args.variant]
    flops = estimate_flops(model, 128, 128)
    print(f"variant: {args.variant} (C={cfg.base_channels}, blocks={cfg.blocks}, "
          f"refinement={cfg.refinement}, M={cfg.recurrence}, hidden_ratio={cfg.hidden_ratio})")
    print(f"{'module':<12} {'params':>12}")
    for name, n in groups.items():
        print(f"{name:<12} {n:>12,}")
    dev = 100.0 * (total - target) / target
    print(f"{'total':<12} {total:>12,}")
    print(f"reference {target / 1e6:.2f}M -> deviation {dev:+.1f}%")
    print(f"flops at 128x128: {flops / 1e9:.2f}G multiply-adds "
          f"(reference {FLOP_TARGETS_128[args.variant] / 1e9:.2f}G)")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "params.csv"), "w") as fh:
            fh.write("module,params\n")
            for name, n in groups.items():
                fh.write(f"{name},{n}\n")
            fh.write(f"total,{total}\n")
        _write_manifest(args.out, "params", vars(args), 0, started)
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "degrade": _cmd_degrade,
    "erf": _cmd_erf,
    "bench": _cmd_bench,
    "fuse-check": _cmd_fuse_check,
    "params": _cmd_params,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except SystemExit as exc:  # argparse --help/--version
        return 0 if exc.code in (0, None) else 1
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, FormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
