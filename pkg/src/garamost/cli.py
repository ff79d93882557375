"""Command line interface: train / infer / eval / bench / synth.

Heavy imports happen inside the subcommand handlers so that the
GARAMOST_THREADS cap can be applied to the BLAS thread pools first.
"""

from __future__ import annotations

import argparse
import os
import sys

__all__ = ["main"]


def _apply_thread_cap():
    """Cap intra-op (BLAS) parallelism from the GARAMOST_THREADS env var."""
    raw = os.environ.get("GARAMOST_THREADS")
    if not raw:
        return
    try:
        n = max(int(raw), 1)
    except ValueError:
        raise SystemExit(f"GARAMOST_THREADS must be an integer, got {raw!r}")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, str(n))
    try:
        import threadpoolctl
        threadpoolctl.threadpool_limits(limits=n)
    except ImportError:
        pass  # the env vars above cover the usual BLAS builds


def _parse_times(raw):
    try:
        times = [float(x) for x in raw.split(",") if x.strip()]
    except ValueError:
        raise SystemExit(f"--times must be comma-separated floats, got {raw!r}")
    if not times:
        raise SystemExit("--times is empty")
    return times


def _granularity(raw):
    parts = raw.split(",")
    if len(parts) != 2:
        raise SystemExit(f"--granularity must be 'A,B', got {raw!r}")
    return int(parts[0]), int(parts[1])


def _size(raw):
    """Parse --size: '128' for square or 'HxW'."""
    try:
        if "x" in raw:
            h, _, w = raw.partition("x")
            return int(h), int(w)
        return int(raw), int(raw)
    except ValueError:
        raise SystemExit(f"--size must be an integer or 'HxW', got {raw!r}")


def _make_model(args, n_interp=1):
    from .attention import GranularityConfig
    from .config import default_granularity
    from .model import GaraMoSt, ModelConfig

    if args.granularity:
        ga, gb = _granularity(args.granularity)
    else:
        ga, gb = default_granularity(n_interp)
    model = GaraMoSt(ModelConfig(granularity=GranularityConfig(ga, gb),
                                 deep_structs=args.deep_structs))
    if args.ckpt:
        model.load(args.ckpt)
    return model


def _cmd_train(args):
    from .config import load_config
    from .train import train_model

    cfg = load_config(path=args.config, overrides=args.set)
    result = train_model(cfg)
    print(f"done in {result['seconds']:.0f}s; best eval ssim "
          f"{result['best_ssim']:.3f}")
    print(f"checkpoints: {result['best_path']} {result['final_path']}")
    return 0


def _cmd_infer(args):
    from . import pgm

    times = _parse_times(args.times)
    model = _make_model(args, n_interp=len(times))
    frame0, max0 = pgm.read_pgm(args.i0)
    frame1, max1 = pgm.read_pgm(args.i1)
    i0 = pgm.to_float(frame0, max0)
    i1 = pgm.to_float(frame1, max1)
    outs = model.interpolate(i0, i1, times)
    os.makedirs(args.out, exist_ok=True)
    for t, out in zip(times, outs):
        path = os.path.join(args.out, f"frame_t{t:.6f}.pgm")
        pgm.write_pgm(path, pgm.from_float(out.data[0, 0], maxval=max0), max0)
        print(path)
    return 0


def _cmd_eval(args):
    from .train import evaluate_model, load_dataset

    height, width = _size(args.size)
    model = _make_model(args, n_interp=args.n)
    data = load_dataset(args.data, args.n) if args.data else None
    res = evaluate_model(model, args.n, n_samples=args.samples,
                         seed=args.seed, height=height, width=width,
                         csv_path=args.csv, data=data, baseline=args.baseline,
                         time_repeats=args.repeats)
    line = (f"ssim {res['ssim_mean']:.4f} +- {res['ssim_std']:.4f}   "
            f"psnr {res['psnr_mean']:.4f} +- {res['psnr_std']:.4f}")
    if "time_median" in res:
        line += f"   time {res['time_median']:.3f} s"
    print(line)
    if args.csv:
        print(f"per-frame metrics: {args.csv}")
    return 0


def _cmd_bench(args):
    from .train import bench_model

    height, width = _size(args.size)
    model = _make_model(args, n_interp=args.n)
    res = bench_model(model, height=height, width=width,
                      n_interp=args.n, repeats=args.repeats)
    print(f"single-frame median: {res['single_median']*1e3:.1f} ms")
    print(f"{args.n}-frame median:  {res['multi_median']*1e3:.1f} ms")
    print(f"sharing ratio (multi / n*single): {res['ratio']:.3f}")
    print(f"encoder+attention per call: {res['encoder_mean']*1e3:.1f} ms "
          f"(attention {res['attention_mean']*1e3:.1f} ms)")
    print(f"decode per frame: {res['decode_mean']*1e3:.1f} ms")
    return 0


def _cmd_synth(args):
    from . import pgm
    from .phantom import synth_sequence

    height, width = _size(args.size)
    frames, ts = synth_sequence(args.count, height=height, width=width,
                                seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    for i, (frame, t) in enumerate(zip(frames, ts)):
        path = os.path.join(args.out, f"frame_{i:04d}.pgm")
        pgm.write_pgm(path, pgm.from_float(frame, maxval=255), 255)
    print(f"wrote {len(frames)} frames to {args.out}")
    return 0


def _add_model_flags(p):
    p.add_argument("--ckpt", help="model checkpoint to load")
    p.add_argument("--granularity", help="local scopes as 'A,B' (e.g. 7,29)")
    p.add_argument("--deep-structs", action="store_true",
                   help="feed structural features to the deep refiner stage")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="garamost",
        description="Direct multi-frame interpolation for angiographic sequences")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on synthetic phantoms")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("infer", help="interpolate between two PGM frames")
    p.add_argument("--i0", required=True, help="first endpoint frame (PGM)")
    p.add_argument("--i1", required=True, help="second endpoint frame (PGM)")
    p.add_argument("--times", default="0.5",
                   help="comma-separated times in (0,1)")
    p.add_argument("--out", default=".", help="output directory")
    _add_model_flags(p)
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("eval", help="score a model on a dataset or phantoms")
    p.add_argument("--n", type=int, default=1,
                   help="number of interpolated frames per sample")
    p.add_argument("--data", help="sequence dir (frame_0000.pgm ...) or a "
                                  "dir of such dirs; default: phantoms")
    p.add_argument("--samples", type=int, default=8,
                   help="phantom sample count when --data is absent")
    p.add_argument("--seed", type=int, default=999331)
    p.add_argument("--size", default="128", help="image size, int or HxW")
    p.add_argument("--csv", help="write per-frame metrics here")
    p.add_argument("--baseline", choices=["mid"],
                   help="score the analytic average instead of the model")
    p.add_argument("--repeats", type=int, default=20,
                   help="timing repeats (after 3 warmups); 0 disables")
    _add_model_flags(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("bench", help="timing breakdown and sharing ratio")
    p.add_argument("--n", type=int, default=3,
                   help="number of interpolated frames per call")
    p.add_argument("--repeats", type=int, default=20)
    p.add_argument("--size", default="128", help="image size, int or HxW")
    _add_model_flags(p)
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("synth", help="render a synthetic phantom sequence")
    p.add_argument("--count", type=int, default=16, help="number of frames")
    p.add_argument("--size", default="128", help="image size, int or HxW")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="synth", help="output directory")
    p.set_defaults(func=_cmd_synth)
    return parser


def main(argv=None):
    _apply_thread_cap()
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
