"""Command line entry point: ``yasgd train | simulate | sweep-threshold``."""

from __future__ import annotations

import argparse
import contextlib
import csv
import logging
import math
import sys

from .config import config_from_dict, load_toml
from .engine import RunAborted, run_training
from .metrics import metrics_csv
from .scheduler import SCHEDULING_MODES, dump_trace
from .simulator import scalability_curve, sim_config_from_dict, simulate_iteration, threshold_sweep

EXIT_OK, EXIT_DIVERGED, EXIT_ABORTED = 0, 1, 2


def _size(text: str) -> float:
    """Byte count; accepts ``inf`` and K/M/G (binary) suffixes such as ``4M``."""
    t = text.strip().lower()
    if t in ("inf", "infinity"):
        return math.inf
    scale = {"k": 1 << 10, "m": 1 << 20, "g": 1 << 30}.get(t[-1:], 1)
    value = float(t[:-1] if scale > 1 else t) * scale
    if not value > 0:
        raise argparse.ArgumentTypeError(f"size must be positive: {text!r}")
    return value


def _size_list(text: str) -> list[float]:
    return [_size(t) for t in text.split(",") if t.strip()]


def _open_or_null(path):
    return open(path, "w") if path else contextlib.nullcontext(None)


def cmd_train(args) -> int:
    raw = load_toml(args.config)
    overrides = {
        "world_size": args.world_size,
        "transport": args.transport,
        "rendezvous": args.rendezvous,
        "bucket_bytes": args.bucket_bytes,
        "seed": args.seed,
        "scheduling": args.scheduling,
        "epochs": args.epochs,
    }
    raw.update({k: v for k, v in overrides.items() if v is not None})
    if args.fp16_comm:
        raw["fp16_comm"] = True
    cfg = config_from_dict(raw)

    with _open_or_null(args.log) as log_fp:
        try:
            result = run_training(cfg, log_stream=log_fp if log_fp is not None else sys.stdout)
        except RunAborted as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_ABORTED
    if args.csv:
        with open(args.csv, "w", newline="") as fp:
            metrics_csv(result, fp)
    if args.trace:
        with open(args.trace, "w") as fp:
            for trace in result.traces:
                dump_trace(trace, fp)

    summary = (f"status={result.status} world={cfg.world_size} global_batch={cfg.global_batch} "
               f"elapsed={result.elapsed:.3f}s imgs_per_sec={result.images_per_sec:.0f}")
    if result.evals:
        summary += f" final_acc={result.final_accuracy:.5f} best_acc={result.best_accuracy:.5f}"
    print(summary, file=sys.stderr)
    if result.status != "ok":
        print(f"error: run diverged: {result.diagnostic}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg, worlds, _ = sim_config_from_dict(load_toml(args.config))
    rows = scalability_curve(cfg, worlds)
    with _open_or_null(args.csv) as fp:
        out = fp or sys.stdout
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["P", "throughput", "efficiency"])
        for r in rows:
            writer.writerow([r.world_size, f"{r.throughput:.3f}", f"{r.efficiency:.6f}"])
    if args.trace:
        with open(args.trace, "w") as fp:
            dump_trace(simulate_iteration(cfg).events, fp)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg, _, thresholds = sim_config_from_dict(load_toml(args.config))
    thresholds = args.thresholds or thresholds
    if not thresholds:
        print("error: no thresholds given (use --thresholds or a 'thresholds' config key)", file=sys.stderr)
        return EXIT_ABORTED
    result = threshold_sweep(cfg, thresholds)
    with _open_or_null(args.csv) as fp:
        out = fp or sys.stdout
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["threshold_bytes", "groups", "iteration_time_us"])
        for r in result.rows:
            writer.writerow([r.threshold_bytes, r.num_groups, f"{r.iteration_time_us:.3f}"])
    best = result.best
    print(f"best threshold {best.threshold_bytes:.0f} bytes ({best.num_groups} groups, "
          f"{best.iteration_time_us:.1f} us/iteration)", file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="yasgd", description="Data-parallel SGD engine and scaling simulator.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run synchronous data-parallel training")
    p.add_argument("--config", required=True)
    p.add_argument("--world-size", type=int)
    p.add_argument("--transport", choices=("loopback", "tcp"))
    p.add_argument("--rendezvous", help="HOST:PORT for tcp, any name for loopback")
    p.add_argument("--bucket-bytes", type=_size)
    p.add_argument("--scheduling", choices=SCHEDULING_MODES)
    p.add_argument("--fp16-comm", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--log", help="MLPerf log file (default: stdout)")
    p.add_argument("--csv", help="metrics CSV file")
    p.add_argument("--trace", help="write scheduler trace events, one JSON object per line")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("simulate", help="scalability curve from the timing model")
    p.add_argument("--config", required=True)
    p.add_argument("--csv", help="output CSV (default: stdout)")
    p.add_argument("--trace", help="write the simulated trace of one iteration")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep-threshold", help="iteration time across bucket thresholds")
    p.add_argument("--config", required=True)
    p.add_argument("--thresholds", type=_size_list, help="comma-separated sizes, e.g. 64K,1M,4M,inf")
    p.add_argument("--csv", help="output CSV (default: stdout)")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ABORTED


if __name__ == "__main__":
    sys.exit(main())
