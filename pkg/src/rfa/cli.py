"""Command-line entry point: ``rfa <subcommand> [flags]``.

Exit codes: 0 when every check passes, 1 when a verification fails (a JSON
failure summary is printed), 2 for usage errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from typing import Optional, Sequence

from . import _accel, bench, verify
from .toytrain import ATTENTION_KINDS, ToyTask, TrainConfig, eval_toy, gen_recency_task, train_toy


class UsageError(Exception):
    pass


def _int_list(text: str) -> tuple:
    try:
        vals = tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _tol(text: str):
    name, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected NAME=VALUE, got {text!r}")
    try:
        return name.strip().replace("-", "_"), float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"tolerance {name!r} needs a number, got {value!r}")


def read_config_file(path: str) -> dict:
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            out[key.strip().replace("-", "_")] = value.strip()
    return out


def _common(p: argparse.ArgumentParser, *, d=8, D=64):
    p.add_argument("--seed", type=int, default=0, help="root seed for all randomness")
    p.add_argument("--config", help="key=value file; flags given on the command line win")
    p.add_argument("--d", type=int, default=d, help="model / input width")
    p.add_argument("--feature-dim", dest="feature_dim", type=int, default=D, help="random features D")
    p.add_argument("--tol", action="append", type=_tol, default=[], metavar="NAME=VALUE",
                   help="override a tolerance field of the verification config")


def _report_flag(p: argparse.ArgumentParser):
    p.add_argument("--report", help="also write every check result to this JSON file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rfa", description="Random feature attention verification and benchmarks.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")

    p = sub.add_parser("verify-kernel", help="feature-map unbiasedness, variance law, map properties")
    _common(p)
    _report_flag(p)
    p.add_argument("--maps", type=int, default=100_000, help="Monte-Carlo maps per pair / cell")

    p = sub.add_parser("verify-recurrence", help="causal, carried and norm-corrected equivalences")
    _common(p)
    _report_flag(p)
    p.add_argument("--lengths", type=_int_list, default=(16, 64, 256))
    p.add_argument("--seeds", type=int, default=20)

    p = sub.add_parser("grad-check", help="analytic vs central-difference gradients")
    _common(p)
    _report_flag(p)
    p.add_argument("--instances", type=int, default=20)

    p = sub.add_parser("sweep-d", help="approximation error vs feature dimension, to CSV")
    _common(p)
    p.add_argument("--dims", type=_int_list, default=(16, 32, 64, 128, 256), help="feature dims to sweep")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--out", default="sweep_d.csv")

    p = sub.add_parser("bench-decode", help="greedy decode timing and live memory, to CSV")
    _common(p, d=64, D=64)
    p.add_argument("--kind", choices=bench.DECODE_KINDS, default="rfa-gaussian")
    p.add_argument("--mode", choices=bench.DECODE_MODES, default="unconditional")
    p.add_argument("--lengths", type=_int_list, default=(256, 512, 1024, 2048))
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--backend", choices=("numba", "numpy"), default=None)
    p.add_argument("--out", default="bench_decode.csv")

    p = sub.add_parser("train-toy", help="train the toy recency model, loss curve to CSV")
    _common(p, d=16, D=32)
    p.add_argument("--kind", choices=ATTENTION_KINDS, default="rfa_gated")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=TrainConfig.learning_rate)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--pool-size", dest="pool_size", type=int, default=50)
    p.add_argument("--vocab", type=int, default=8)
    p.add_argument("--length", type=int, default=16)
    p.add_argument("--lag", type=int, default=1)
    p.add_argument("--out", default="train_toy.csv")

    p = sub.add_parser("verify-all", help="run every property suite; exit 0 iff all pass")
    _common(p)
    _report_flag(p)
    return parser


def _resolve(parser: argparse.ArgumentParser, argv: Sequence[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if args.config:
        try:
            file_values = read_config_file(args.config)
        except OSError as exc:
            raise UsageError(f"cannot read config file: {exc}")
        # re-parse with the file as defaults so explicit flags still win
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest: a for a in sub._actions}
        defaults = {}
        for key, raw in file_values.items():
            if key not in known or key in ("help", "config"):
                raise UsageError(f"unknown config key {key!r} for {args.command}")
            action = known[key]
            try:
                if action.type is not None:
                    val = action.type(raw)
                    if key == "tol":
                        val = [val]
                else:
                    val = raw
            except (argparse.ArgumentTypeError, ValueError) as exc:
                raise UsageError(f"bad value for config key {key!r}: {exc}")
            if action.choices is not None and val not in action.choices:
                raise UsageError(f"config key {key!r} must be one of {list(action.choices)}")
            defaults[key] = val
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


def _verify_config(args) -> verify.VerifyConfig:
    fields = {f.name: f for f in dataclasses.fields(verify.VerifyConfig)}
    cfg = verify.VerifyConfig(seed=args.seed, d=args.d, D=args.feature_dim)
    for name, value in args.tol:
        if name not in fields or fields[name].type not in ("float", float):
            raise UsageError(f"unknown tolerance {name!r}")
        setattr(cfg, name, value)
    return cfg


def _check_positive(**vals):
    for k, v in vals.items():
        if v < 1:
            raise UsageError(f"--{k.replace('_', '-')} must be >= 1")


def _check_ascending(name, vals):
    if any(b <= a for a, b in zip(vals, vals[1:])):
        raise UsageError(f"--{name} must be strictly ascending")


def _print_header(args, extra: Optional[dict] = None):
    resolved = {k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(vars(args).items())}
    if extra:
        resolved.update(extra)
    print(f"seed={args.seed}")
    print("config=" + json.dumps(resolved, sort_keys=True, default=str))


def _finish(results) -> int:
    failures = [r for r in results if not r.passed]
    for r in results:
        print(r.line())
    summary = {"status": "fail" if failures else "pass", "checks": len(results),
               "failures": [{"check": f"{r.suite}/{r.name}", "detail": r.detail} for r in failures]}
    print(json.dumps(summary, sort_keys=True, default=str))
    return 1 if failures else 0


def _run_suites(names, cfg, report_path=None) -> int:
    results = verify.run_suites(names, cfg, report=lambda r: print(r.line(), flush=True))
    if report_path:
        with open(report_path, "w", encoding="utf-8") as fh:
            json.dump([r.to_dict() for r in results], fh, indent=1, sort_keys=True, default=str)
    failures = [r for r in results if not r.passed]
    summary = {"status": "fail" if failures else "pass", "checks": len(results),
               "failures": [{"check": f"{r.suite}/{r.name}", "detail": r.detail} for r in failures]}
    print(json.dumps(summary, sort_keys=True, default=str))
    return 1 if failures else 0


def _cmd_verify(args) -> int:
    cfg = _verify_config(args)
    _check_positive(d=args.d, feature_dim=args.feature_dim)
    if args.command == "verify-kernel":
        _check_positive(maps=args.maps)
        cfg.mc_maps = args.maps
        names = ["kernel"]
    elif args.command == "verify-recurrence":
        _check_positive(seeds=args.seeds, lengths=min(args.lengths))
        cfg.lengths, cfg.recurrence_seeds = tuple(args.lengths), args.seeds
        names = ["recurrence"]
    elif args.command == "grad-check":
        _check_positive(instances=args.instances)
        cfg.grad_instances = args.instances
        names = ["grad"]
    else:
        names = list(verify.SUITES)
    _print_header(args, {"backend": _accel.backend_name()})
    return _run_suites(names, cfg, args.report)


def _cmd_sweep(args) -> int:
    _check_positive(d=args.d, seeds=args.seeds, dims=min(args.dims))
    _check_ascending("dims", args.dims)
    _print_header(args)
    cfg = _verify_config(args)
    instances = bench.make_sweep_instances(d=args.d, seed=args.seed)
    records = bench.approximation_error_sweep(args.dims, args.seeds, instances, root_seed=args.seed)
    bench.emit_csv(records, args.out, bench.SweepRecord)
    print(f"wrote {len(records)} rows to {args.out}")
    for D, m in bench.median_by_D(records).items():
        print(f"D={D} median_mse_output={m:.6g}")
    return _finish([verify._timed("sweep", "median_mse_decreasing", lambda: verify.check_error_decay(cfg, records))])


def _cmd_bench(args) -> int:
    _check_positive(d=args.d, feature_dim=args.feature_dim, batch=args.batch, repeats=args.repeats,
                    lengths=min(args.lengths))
    if args.warmup < 0:
        raise UsageError("--warmup must be >= 0")
    _check_ascending("lengths", args.lengths)
    backend = args.backend or _accel.backend_name()
    _print_header(args, {"backend": backend})
    dcfg = bench.DecodeConfig(d=args.d, D=args.feature_dim, warmup=args.warmup, repeats=args.repeats, seed=args.seed)
    records = bench.decode_bench(args.kind, args.mode, args.lengths, args.batch, dcfg, args.backend)
    bench.emit_csv(records, args.out, bench.DecodeBenchRecord)
    bench.write_metadata(args.out + ".meta.json", d=args.d, D=args.feature_dim,
                         feature_dim=bench.feature_dim(args.kind, args.feature_dim) if args.kind != "softmax" else None,
                         heads=1, layers=1, vocab=dcfg.vocab, backend=backend, warmup=args.warmup,
                         repeats=args.repeats, seed=args.seed)
    print(f"wrote {len(records)} rows to {args.out}")
    if len(records) >= 2:
        slope = bench.loglog_slope([r.N for r in records], [r.total_seconds for r in records])
        print(f"loglog_slope_total_seconds={slope:.3f}")
    if any(r.low_resolution for r in records):
        print("warning: some rows are flagged low_resolution")
    return 0


def _cmd_train(args) -> int:
    _check_positive(d=args.d, feature_dim=args.feature_dim, batch=args.batch, pool_size=args.pool_size)
    if args.steps < 0:
        raise UsageError("--steps must be >= 0")
    try:
        task = ToyTask(args.vocab, args.length, args.lag)
        config = TrainConfig(kind=args.kind, learning_rate=args.lr, steps=args.steps, batch_size=args.batch,
                             seed=args.seed, d=args.d, D=args.feature_dim, pool_size=args.pool_size)
    except ValueError as exc:
        raise UsageError(str(exc))
    _print_header(args, {"train_config": dataclasses.asdict(config)})
    model, curve = train_toy(task, config)
    curve.write_csv(args.out)
    ev = eval_toy(model, gen_recency_task(task, args.seed + 1_000_003, 256))
    tail = verify.final_training_loss(curve, 100) if len(curve) else float("nan")
    print(f"wrote {len(curve)} rows to {args.out}")
    print(f"params={model.n_params} final_train_loss={tail:.6g} eval_loss={ev[0]:.6g} eval_accuracy={ev[1]:.4f}")
    return 0


COMMANDS = {
    "verify-kernel": _cmd_verify,
    "verify-recurrence": _cmd_verify,
    "grad-check": _cmd_verify,
    "verify-all": _cmd_verify,
    "sweep-d": _cmd_sweep,
    "bench-decode": _cmd_bench,
    "train-toy": _cmd_train,
}


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _resolve(parser, argv)
        return COMMANDS[args.command](args)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else 2
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"rfa: error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_cli())
