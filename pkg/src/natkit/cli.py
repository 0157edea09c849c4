"""natkit command line.

Machine-readable JSON goes to stdout, human summaries to stderr.

Exit codes: 0 success, 1 check failure, 2 usage error, 3 I/O or format error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
import tracemalloc

import numpy as np

from . import analysis, verify
from .attention import na_forward, na_reference, self_attention
from .errors import ConfigurationError, FormatError, WeightError
from .model import PRESETS, NATConfig, init_weights, load_config, load_weights, nat_forward, save_weights
from .neighborhood import NeighborhoodSpec
from .tensor import Rng, conv2d, load_tensor, num_threads, resolve_precision, save_tensor

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _emit(report: dict) -> None:
    sys.stdout.write(json.dumps(report, indent=2, sort_keys=True) + "\n")


def _say(msg: str) -> None:
    print(msg, file=sys.stderr)


def _finish(report: dict, checks: list[verify.Check]) -> int:
    report["checks"] = [c.to_dict() for c in checks]
    failed = [c.name for c in checks if c.status != "pass"]
    report["status"] = "fail" if failed else "pass"
    report["failed"] = failed
    _emit(report)
    for c in checks:
        _say(f"{c.status.upper():4s}  {c.name:26s} measured={c.measured:.3e} tol={c.tolerance:.1e}")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_verify(args) -> int:
    t0 = time.perf_counter()
    with num_threads(args.threads):
        checks = verify.run_suite(args.seed, args.precision, inject_fault=args.inject_fault)
    report = {"command": "verify", "seed": args.seed, "precision": args.precision,
              "wall_time_s": time.perf_counter() - t0}
    return _finish(report, checks)


def cmd_gradcheck(args) -> int:
    if args.precision != "f64":
        raise UsageError("gradcheck requires --precision f64; finite differences are meaningless in single precision")
    t0 = time.perf_counter()
    errs = verify.gradcheck(seed=args.seed, H=args.height, W=args.width, d=args.dim, L=args.kernel,
                            heads=args.heads, instances=args.instances, h=args.step, zero_dout=args.zero_dout)
    wall = time.perf_counter() - t0
    checks = [verify.Check(f"grad_{name}", "pass" if err <= args.tolerance else "fail", err, args.tolerance)
              for name, err in errs.items()]
    report = {"command": "gradcheck", "seed": args.seed, "precision": "f64", "step": args.step,
              "shape": [args.height, args.width, args.heads, args.dim], "kernel": args.kernel,
              "max_relative_error": errs, "wall_time_s": wall}
    return _finish(report, checks)


def _config_from_args(args) -> NATConfig:
    if args.config:
        return load_config(args.config)
    if args.preset not in PRESETS:
        raise UsageError(f"unknown preset {args.preset!r}; choose from {', '.join(sorted(PRESETS))}")
    return PRESETS[args.preset]


def cmd_flops(args) -> int:
    if not args.config and not args.preset:
        raise UsageError("flops needs --preset or --config")
    config = _config_from_args(args)
    stats = analysis.model_stats(config, args.res)
    report = {"command": "flops", "preset": args.preset, "resolution": args.res, **stats.to_dict()}
    _emit(report)
    _say(f"params {stats.params / 1e6:.2f} M, MACs {stats.macs / 1e9:.3f} G at {args.res}x{args.res}")
    return EXIT_OK


def cmd_init_weights(args) -> int:
    config = _config_from_args(args)
    weights = init_weights(config, seed=args.seed, precision=args.precision)
    save_weights(args.output, weights)
    _emit({"command": "init-weights", "seed": args.seed, "precision": args.precision,
           "tensors": len(weights), "output": args.output})
    return EXIT_OK


def cmd_forward(args) -> int:
    config = load_config(args.config)
    weights = load_weights(args.weights)
    image = load_tensor(args.input)
    t0 = time.perf_counter()
    logits = nat_forward(image, config, weights, threads=args.threads)
    wall = time.perf_counter() - t0
    save_tensor(args.output, logits)
    top5 = np.argsort(-logits, kind="stable")[:5]
    _emit({"command": "forward", "argmax": int(top5[0]), "top5": [int(i) for i in top5],
           "finite": bool(np.isfinite(logits).all()), "output": args.output, "wall_time_s": wall})
    return EXIT_OK


# -- bench --------------------------------------------------------------------


def _bench_inputs(op, H, W, C, L, heads, dt, seed):
    rng = Rng(seed)
    if op == "conv":
        return (rng.normal((H, W, C), precision=dt), rng.normal((L, L, C, C), std=0.05, precision=dt),
                np.zeros(C, dtype=dt))
    d = C // heads
    if op == "self_attention":
        return tuple(rng.normal((H * W, C), precision=dt) for _ in range(3))
    q, k, v = (rng.normal((H, W, heads, d), precision=dt) for _ in range(3))
    return q, k, v, rng.normal((heads, 2 * L - 1, 2 * L - 1), precision=dt), NeighborhoodSpec(L)


def _bench_fn(op):
    return {
        "na": na_forward,
        "na_reference": na_reference,
        "self_attention": self_attention,
        "conv": lambda x, w, b: conv2d(x, w, b, stride=1, pad=(w.shape[0] - 1) // 2),
    }[op]


def _bench_macs(op, H, W, C, L) -> int:
    if op == "conv":
        return analysis.cost_conv(H, W, C, L).macs
    if op == "self_attention":
        return analysis.cost_self_attention(H, W, C).breakdown["macs"]["attention"]
    return analysis.cost_na(H, W, C, L).breakdown["macs"]["attention"]


def _peak_alloc(fn, inputs) -> int:
    tracemalloc.start()
    try:
        tracemalloc.reset_peak()
        fn(*inputs)
        return tracemalloc.get_traced_memory()[1]
    finally:
        tracemalloc.stop()


def _time(fn, inputs, iters):
    times = []
    for _ in range(iters):
        t = time.perf_counter()
        fn(*inputs)
        times.append(time.perf_counter() - t)
    return times


def cmd_bench(args) -> int:
    H, W, C, L = args.height, args.width, args.channels, args.kernel
    if min(H, W, C) < 1 or args.iters < 1:
        raise UsageError("extents and --iters must be positive")
    if args.op != "self_attention" and args.op != "conv" and C % args.heads:
        raise UsageError(f"--channels {C} not divisible by --heads {args.heads}")
    try:
        NeighborhoodSpec(L)
    except ConfigurationError as exc:
        raise UsageError(str(exc)) from exc
    dt = resolve_precision(args.precision)
    report = {"command": "bench", "op": args.op, "seed": args.seed, "precision": args.precision,
              "shape": {"H": H, "W": W, "C": C, "L": L, "heads": args.heads}, "iters": args.iters}
    checks = []

    with num_threads(args.threads) as n:
        report["threads"] = n
        if args.op in ("na", "na_reference"):
            # correctness spot-check before any timing
            t0 = time.perf_counter()
            inputs = _bench_inputs("na", H, W, C, L, args.heads, dt, args.seed)
            diff = float(np.abs(na_forward(*inputs) - na_reference(*inputs)).max())
            checks.append(verify._check("fused_vs_reference", diff, 1e-6, t0))
            fused_bytes = _peak_alloc(na_forward, inputs)
            ref_bytes = _peak_alloc(na_reference, inputs)
            report["transient_alloc_bytes"] = {"na": fused_bytes, "na_reference": ref_bytes}
            report["alloc_ratio_reference_over_fused"] = ref_bytes / max(fused_bytes, 1)
            report["reference_materialized_scalars"] = 2 * H * W * C * min(L, H) * min(L, W)

        fn = _bench_fn(args.op)
        inputs = _bench_inputs(args.op, H, W, C, L, args.heads, dt, args.seed)
        times = _time(fn, inputs, args.iters)
        macs = _bench_macs(args.op, H, W, C, L)
        report["macs"] = macs
        report["mean_s"] = float(np.mean(times))
        report["min_s"] = float(np.min(times))
        report["macs_per_s"] = macs / report["min_s"] if report["min_s"] > 0 else None

        if args.scaling:
            inputs2 = _bench_inputs(args.op, 2 * H, W, C, L, args.heads, dt, args.seed)
            times2 = _time(fn, inputs2, args.iters)
            macs2 = _bench_macs(args.op, 2 * H, W, C, L)
            report["scaling"] = {"macs_ratio": macs2 / macs, "time_ratio": float(np.min(times2)) / report["min_s"]}

    report["wall_time_s"] = {"mean": report.pop("mean_s"), "min": report.pop("min_s")}
    _say(f"{args.op} {H}x{W}x{C} L={L}: min {report['wall_time_s']['min'] * 1e3:.2f} ms")
    return _finish(report, checks)


# -- parser -------------------------------------------------------------------


def _seed(s: str) -> int:
    v = int(s, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--seed", type=_seed, default=42)
    shared.add_argument("--precision", choices=["f32", "f64"], default=None)
    shared.add_argument("--threads", type=int, default=os.cpu_count() or 1)

    parser = argparse.ArgumentParser(prog="natkit", description="Neighborhood attention toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", parents=[shared], help="run the invariant suite")
    p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify, default_precision="f64")

    p = sub.add_parser("gradcheck", parents=[shared], help="finite-difference check of the NA backward pass")
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--height", type=int, default=4)
    p.add_argument("--width", type=int, default=5)
    p.add_argument("--dim", type=int, default=6)
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--kernel", type=int, default=3)
    p.add_argument("--instances", type=int, default=3)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--zero-dout", action="store_true")
    p.set_defaults(func=cmd_gradcheck, default_precision="f64")

    p = sub.add_parser("flops", parents=[shared], help="parameter and MAC count of a model")
    p.add_argument("--preset")
    p.add_argument("--config")
    p.add_argument("--res", type=int, default=224)
    p.set_defaults(func=cmd_flops, default_precision="f32")

    p = sub.add_parser("init-weights", parents=[shared], help="write random-init weights to a NATW file")
    p.add_argument("--preset")
    p.add_argument("--config")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_init_weights, default_precision="f32")

    p = sub.add_parser("forward", parents=[shared], help="classify an NTSR image")
    p.add_argument("--config", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_forward, default_precision="f32")

    p = sub.add_parser("bench", parents=[shared], help="time one kernel")
    p.add_argument("--op", choices=["na", "na_reference", "self_attention", "conv"], required=True)
    p.add_argument("--height", type=int, default=56)
    p.add_argument("--width", type=int, default=56)
    p.add_argument("--channels", type=int, default=64)
    p.add_argument("--kernel", type=int, default=7)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--iters", type=int, default=5)
    p.add_argument("--scaling", action="store_true", help="also time at twice the pixel count")
    p.set_defaults(func=cmd_bench, default_precision="f32")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.precision is None:
        args.precision = args.default_precision
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    if getattr(args, "preset", None) and getattr(args, "config", None):
        parser.error("give either --preset or --config, not both")
    try:
        return args.func(args)
    except UsageError as exc:
        _say(f"natkit {args.command}: error: {exc}")
        return EXIT_USAGE
    except (OSError, FormatError, WeightError) as exc:
        _say(f"natkit {args.command}: error: {exc}")
        return EXIT_IO
    except ConfigurationError as exc:
        _say(f"natkit {args.command}: error: {exc}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
