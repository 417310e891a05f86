"""Traced vs. untraced I/O latency with a per-phase breakdown.

Each (op, size) pair runs ``iters`` untraced and ``iters`` traced calls
against a middleware started in-process on loopback. Traced calls are split
into authorization (IoRequest/Grant), execution (the real call) and reporting
(IoReport/Ack) using the shim's phase recorder.
"""

from __future__ import annotations

import csv
import io as _stdio
import os
import socket as _socket
import statistics
import tempfile
import threading
import time
from dataclasses import astuple, dataclass, fields
from pathlib import Path
from typing import Callable, Iterable

from provtrace import io as tio
from provtrace import socket as tsock
from provtrace.daemon import Middleware
from provtrace.engine import EngineConfig
from provtrace.ids import ResourceId
from provtrace.tracer import PhaseTiming, Tracer

OPS = ("read", "write", "stream_read", "stream_write")


@dataclass(frozen=True)
class BenchRecord:
    op: str
    size: int
    mode: str
    mean_us: float
    median_us: float
    p95_us: float
    auth_us: float
    exec_us: float
    report_us: float


HEADER = [f.name for f in fields(BenchRecord)]


def parse_size(text: str) -> int:
    text = text.strip().lower()
    mult = {"k": 1024, "m": 1024 * 1024}.get(text[-1:], 1)
    return int(text[:-1] if mult > 1 else text) * mult


def _p95(values: list[float]) -> float:
    if len(values) < 2:
        return values[0]
    return statistics.quantiles(values, n=20, method="inclusive")[18]


def _us(seconds: float) -> float:
    return round(seconds * 1e6, 2)


def _record(op: str, size: int, mode: str, totals: list[float], phases: list[PhaseTiming]) -> BenchRecord:
    if phases:
        auth = statistics.fmean(p.authorization for p in phases)
        exe = statistics.fmean(p.execution for p in phases)
        rep = statistics.fmean(p.reporting for p in phases)
    else:
        auth, exe, rep = 0.0, statistics.fmean(totals), 0.0
    return BenchRecord(
        op, size, mode,
        _us(statistics.fmean(totals)), _us(statistics.median(totals)), _us(_p95(totals)),
        _us(auth), _us(exe), _us(rep),
    )


BLOCK = 50


class _Case:
    """One (op, size, mode) configuration with its open handles."""

    def __init__(self, op: str, size: int, mode: str) -> None:
        self.op, self.size, self.mode = op, size, mode
        self.totals: list[float] = []
        self.phases: list[PhaseTiming] = []
        self._cleanup: list[Callable[[], object]] = []
        self.call: Callable[[], object] = lambda: None
        self.reset: Callable[[], object] | None = None

    def run(self, n: int, phases: list[PhaseTiming]) -> None:
        phases.clear()
        clock = time.perf_counter
        call, reset, totals = self.call, self.reset, self.totals
        for _ in range(n):
            if reset is not None:
                reset()
            t0 = clock()
            call()
            totals.append(clock() - t0)
        self.phases.extend(phases)

    def record(self) -> BenchRecord:
        return _record(self.op, self.size, self.mode, self.totals, self.phases)

    def close(self) -> None:
        for fn in reversed(self._cleanup):
            fn()


class _Sink(threading.Thread):
    """Drains (or feeds) the far end of a loopback connection."""

    def __init__(self, sock: _socket.socket, feed: bytes | None = None) -> None:
        super().__init__(daemon=True)
        self.sock = sock
        self.feed = feed
        self.stop = threading.Event()

    def run(self) -> None:
        try:
            while not self.stop.is_set():
                if self.feed is None:
                    if not self.sock.recv(1 << 20):
                        return
                else:
                    self.sock.sendall(self.feed)
        except OSError:
            return


def _file_case(op: str, size: int, mode: str, workdir: Path, tracer: Tracer) -> _Case:
    case = _Case(op, size, mode)
    path = workdir / f"{op}-{size}-{mode}.bin"
    payload = os.urandom(size)
    path.write_bytes(payload)
    fmode = "rb" if op == "read" else "r+b"
    f = tio.open(path, fmode, tracer=tracer) if mode == "traced" else open(path, fmode)
    case._cleanup.append(f.close)
    case.call = (lambda: f.read(size)) if op == "read" else (lambda: f.write(payload))
    case.reset = lambda: f.seek(0)
    return case


def _stream_case(op: str, size: int, mode: str, tracer: Tracer) -> _Case:
    case = _Case(op, size, mode)
    payload = os.urandom(size)
    lst = _socket.create_server(("127.0.0.1", 0))
    if mode == "traced":
        conn = tsock.create_connection(lst.getsockname(), tracer=tracer)
    else:
        conn = _socket.create_connection(lst.getsockname())
    far, _ = lst.accept()
    lst.close()
    sink = _Sink(far, feed=payload if op == "stream_read" else None)
    sink.start()

    def close() -> None:
        sink.stop.set()
        conn.close()
        far.close()
        sink.join(timeout=2)

    case._cleanup.append(close)
    case.call = (lambda: conn.sendall(payload)) if op == "stream_write" else (lambda: conn.recv(size))
    return case


def run_bench(
    iters: int = 1000,
    sizes: Iterable[int] = (1024, 65536),
    ops: Iterable[str] = ("read", "write"),
    *,
    workdir: str | Path | None = None,
    warmup: int = 50,
) -> list[BenchRecord]:
    """Measure every (op, size, mode) ``iters`` times.

    Configurations of one op are measured in interleaved blocks of
    :data:`BLOCK` calls, so a transient slowdown of the host is spread over
    all of them instead of biasing whichever one happened to be running.
    """
    ops = list(ops)
    unknown = set(ops) - set(OPS)
    if unknown:
        raise ValueError(f"unknown ops {sorted(unknown)}; choose from {OPS}")
    sizes = list(sizes)
    if iters <= 0 or not sizes or not ops:
        return []
    phases: list[PhaseTiming] = []
    records: list[BenchRecord] = []
    with tempfile.TemporaryDirectory(prefix="provtrace-bench-") as tmp, \
            Middleware(EngineConfig("bench"), ("127.0.0.1", 0), ("127.0.0.1", 0)) as mw:
        wd = Path(workdir) if workdir is not None else Path(tmp)
        wd.mkdir(parents=True, exist_ok=True)
        tracer = Tracer(mw.p2m_address, node="bench",
                        process=ResourceId.process("bench", os.getpid(), 0), recorder=phases.append)
        for op in ops:
            cases = []
            try:
                for size in sizes:
                    for mode in ("untraced", "traced"):
                        if op in ("read", "write"):
                            cases.append(_file_case(op, size, mode, wd, tracer))
                        else:
                            cases.append(_stream_case(op, size, mode, tracer))
                # Warm the connection, the caches and the interpreter before measuring.
                for case in cases:
                    case.run(warmup, phases)
                    case.totals.clear()
                    case.phases.clear()
                done = 0
                while done < iters:
                    n = min(BLOCK, iters - done)
                    for case in cases:
                        case.run(n, phases)
                    done += n
                records.extend(case.record() for case in cases)
            finally:
                for case in cases:
                    case.close()
        tracer.close()
    return records


def overhead_us(records: list[BenchRecord], op: str, size: int, stat: str = "median_us") -> float:
    by_mode = {r.mode: r for r in records if r.op == op and r.size == size}
    return getattr(by_mode["traced"], stat) - getattr(by_mode["untraced"], stat)


def protocol_share(records: list[BenchRecord], op: str, size: int) -> float:
    """Fraction of the traced-minus-untraced mean spent in authorization and reporting."""
    by_mode = {r.mode: r for r in records if r.op == op and r.size == size}
    t = by_mode["traced"]
    extra = t.mean_us - by_mode["untraced"].mean_us
    return (t.auth_us + t.report_us) / extra if extra > 0 else 0.0


def to_csv(records: list[BenchRecord]) -> str:
    buf = _stdio.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HEADER)
    for r in records:
        w.writerow(astuple(r))
    return buf.getvalue()


def to_table(records: list[BenchRecord]) -> str:
    if not records:
        return "(no measurements)"
    widths = [max(len(h), 10) for h in HEADER]
    lines = ["  ".join(h.rjust(w) for h, w in zip(HEADER, widths))]
    for r in records:
        lines.append("  ".join(str(v).rjust(w) for v, w in zip(astuple(r), widths)))
    return "\n".join(lines)
