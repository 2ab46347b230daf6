"""Command-line experiment driver."""
from __future__ import annotations

import argparse
import logging
import sys

from .bench import ExperimentConfig, compare, parse_bandwidth, parse_load, render_timeline, run_experiment
from .engine import ConfigError
from .workflow import WorkflowError


def _number_or_range(text: str):
    if ":" in text:
        lo, hi = text.split(":", 1)
        cast = int if lo.isdigit() and hi.isdigit() else float
        return (cast(lo), cast(hi))
    return float(text) if "." in text or "e" in text.lower() else int(text)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="wfsim",
        description="Run serverless-workflow experiments on a simulated cluster.",
    )
    src = p.add_mutually_exclusive_group()
    src.add_argument("--workflow", metavar="PATH", help="workflow YAML file")
    src.add_argument("--shape", metavar="NAME", default=None,
                     help="generator shape, e.g. fan_in:8, chain:3, layered:4,4,4, random:40:0.1:7")
    p.add_argument("--nodes", type=int, default=2, metavar="N")
    p.add_argument("--policy", default="dataflow", choices=["dataflow", "controlflow", "cflow"])
    p.add_argument("--store", default=None, choices=["dstore", "central"],
                   help="default: central for cflow, dstore otherwise")
    p.add_argument("--compare", metavar="V1,V2,...",
                   help="run several policy[+store] variants with one seed and print a table")
    p.add_argument("--bandwidth", action="append", default=[], metavar="RATE[@scope]",
                   help="throttle, e.g. 25MB/s@ingress; prefix with master=, workers=, N= or S-D=")
    p.add_argument("--load", default="closed:1:2", metavar="SPEC",
                   help="open:RATE/min:DURATION or closed:CLIENTS:ITERS")
    p.add_argument("--seed", type=int, default=0, metavar="S")
    p.add_argument("--time", dest="time_mode", default="virtual", choices=["virtual", "real"])
    p.add_argument("--transport", default="sim", choices=["sim", "socket"],
                   help="socket routes control messages over loopback TCP (real time only)")
    p.add_argument("--out", metavar="DIR", help="write report.json, trace.ndjson and timeline.csv here")
    p.add_argument("--latency-ms", type=float, default=0.0)
    p.add_argument("--compute-ms", type=_number_or_range, default=100.0, metavar="MS|LO:HI")
    p.add_argument("--output-bytes", type=_number_or_range, default=1_000_000, metavar="B|LO:HI")
    p.add_argument("--coldstart-ms", type=_number_or_range, default=500.0, metavar="MS|LO:HI")
    p.add_argument("--pool-cap", type=int, default=8)
    p.add_argument("--depth", default="2", help="dataflow lookahead depth, or 'inf'")
    p.add_argument("--timeout", type=float, default=60.0, metavar="SECONDS")
    p.add_argument("--timeline", action="store_true", help="print the per-function timeline")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    depth = None if args.depth in ("inf", "none") else int(args.depth)
    return ExperimentConfig(
        workflow=args.workflow,
        shape=None if args.workflow else (args.shape or "diamond"),
        compute_ms=args.compute_ms,
        output_bytes=args.output_bytes,
        coldstart_ms=args.coldstart_ms,
        nodes=args.nodes,
        policy=args.policy,
        store=args.store,
        bandwidth=[parse_bandwidth(b) for b in args.bandwidth],
        load=parse_load(args.load),
        seed=args.seed,
        time_mode=args.time_mode,
        transport=args.transport,
        engine={
            "latency_ms": args.latency_ms,
            "pool_cap": args.pool_cap,
            "lookahead_depth": depth,
            "timeout_s": args.timeout,
        },
    )


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        if args.compare:
            table = compare(args.compare.split(","), cfg)
            sys.stdout.write(table.to_text())
            return 0
        report, engine = run_experiment(cfg, args.out)
    except (ConfigError, WorkflowError, OSError) as exc:
        print(f"wfsim: error: {exc}", file=sys.stderr)
        return 2
    print(f"{report.workflow} policy={report.policy} store={report.store} nodes={report.nodes} "
          f"load={report.load}")
    print(f"  invocations={report.invocations} completed={report.completed} "
          f"timeouts={report.timeouts} failures={report.failures}")
    if report.p50_ms is not None:
        print(f"  p50={report.p50_ms:.1f} ms  p95={report.p95_ms:.1f} ms  p99={report.p99_ms:.1f} ms  "
              f"throughput={report.throughput_per_min:.2f}/min")
    if report.cold_start_delta_ms is not None:
        print(f"  cold-start delta={report.cold_start_delta_ms:.1f} ms")
    if args.timeline:
        sys.stdout.write(render_timeline(engine.trace))
    if args.out:
        print(f"  wrote {args.out}/report.json, trace.ndjson, timeline.csv")
    return 0


if __name__ == "__main__":
    sys.exit(main())
