"""Command line entry point: ``provtrace <command>``.

    serve     run a middleware daemon
    scenario  run a scenario script against loopback middlewares
    stress    concurrent flows checked against the sequential oracle
    bench     traced vs. untraced I/O latency, CSV + table
    dump      provenance of one resource as seen by a running daemon
"""

from __future__ import annotations

import argparse
import logging
import signal
import sys
import threading
from pathlib import Path

from provtrace.engine import DEFAULT_RESERVATION_TIMEOUT, EngineConfig
from provtrace.errors import ProvtraceError
from provtrace.ids import parse_resource_id
from provtrace.m2m import DEFAULT_M2M_PORT
from provtrace.p2m import DEFAULT_P2M_PORT, P2MClient
from provtrace.wire import parse_address


def render_provenance(summaries) -> str:
    """Sorted, one resource per line; ``(empty)`` for no provenance."""
    lines = []
    for s in sorted(summaries, key=lambda s: s.id):
        flags = f" {s.flags}" if s.flags.any() else ""
        lines.append(f"{s.id.uri}{flags}")
    return "\n".join(lines) if lines else "(empty)"


def _peer(text: str) -> tuple[str, str]:
    key, eq, endpoint = text.partition("=")
    if not eq or not key or not endpoint:
        raise argparse.ArgumentTypeError(f"--peer expects <peer ip[:port]>=<m2m host:port>, got {text!r}")
    return key, endpoint


def cmd_serve(args) -> int:
    from provtrace.daemon import Middleware

    cfg = EngineConfig(args.node, args.timeout, dict(args.peer))
    mw = Middleware(cfg, parse_address(args.p2m), parse_address(args.m2m)).start()
    print(f"middleware {cfg.node}: p2m {mw.p2m_address} m2m {mw.m2m_address}", flush=True)
    done = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: done.set())
    done.wait()
    mw.stop()
    return 0


def cmd_scenario(args) -> int:
    from provtrace.harness.scenario import ScenarioError, capture_report, load_scenario, run_scenario

    try:
        report = run_scenario(load_scenario(args.file))
    except (ScenarioError, OSError) as exc:
        print(f"infrastructure error: {exc}", file=sys.stderr)
        return 2
    print(capture_report(report), end="")
    return 0 if report.passed else 1


def cmd_stress(args) -> int:
    from provtrace.harness.stress import run_stress

    result = run_stress(args.workers, args.ops, args.resources, args.seed, budget=args.budget)
    print(result.summary())
    for m in result.mismatches:
        print("  " + m)
    if result.diagnostics:
        print(result.diagnostics)
    return 0 if result.passed else 1


def cmd_bench(args) -> int:
    from provtrace.harness.bench import parse_size, run_bench, to_csv, to_table

    sizes = [parse_size(s) for s in args.sizes.split(",") if s]
    ops = [o for o in args.ops.split(",") if o]
    records = run_bench(args.iters, sizes, ops)
    if args.out:
        Path(args.out).write_text(to_csv(records))
    print(to_table(records))
    return 0


def cmd_dump(args) -> int:
    client = P2MClient(args.node, timeout=10)
    try:
        print(render_provenance(client.provenance(parse_resource_id(args.id))))
    except ProvtraceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"cannot reach middleware at {args.node}: {exc}", file=sys.stderr)
        return 2
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="provtrace", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("serve", help="run a middleware daemon")
    s.add_argument("--node", required=True)
    s.add_argument("--p2m", default=f"127.0.0.1:{DEFAULT_P2M_PORT}")
    s.add_argument("--m2m", default=f"127.0.0.1:{DEFAULT_M2M_PORT}")
    s.add_argument("--timeout", type=float, default=DEFAULT_RESERVATION_TIMEOUT,
                   help="reservation timeout in seconds")
    s.add_argument("--peer", type=_peer, action="append", default=[],
                   help="peer ip[:port]=m2m host:port (repeatable)")
    s.set_defaults(func=cmd_serve)

    s = sub.add_parser("scenario", help="run a scenario script")
    s.add_argument("file")
    s.set_defaults(func=cmd_scenario)

    s = sub.add_parser("stress", help="concurrency stress test against the oracle")
    s.add_argument("--workers", type=int, default=8)
    s.add_argument("--ops", type=int, default=100)
    s.add_argument("--resources", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--budget", type=float, default=60.0, help="global time budget in seconds")
    s.set_defaults(func=cmd_stress)

    s = sub.add_parser("bench", help="I/O overhead benchmark")
    s.add_argument("--iters", type=int, default=1000)
    s.add_argument("--sizes", default="1k,64k")
    s.add_argument("--ops", default="read,write")
    s.add_argument("--out", help="CSV output path")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("dump", help="print a resource's provenance from a running daemon")
    s.add_argument("--node", required=True, help="P2M address of the daemon")
    s.add_argument("--id", required=True, help="canonical resource id")
    s.set_defaults(func=cmd_dump)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
