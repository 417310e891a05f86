"""Concurrent stress runs checked against the sequential oracle.

Linearization point of a flow is its settlement, i.e. the moment the engine
applies the provenance update while still holding the destination
exclusively; the engine numbers settlements in that order.
"""

from __future__ import annotations

import logging
import random
import threading
import time
from collections import Counter
from dataclasses import dataclass, field

from provtrace.engine import EngineConfig, ProvenanceEngine
from provtrace.errors import FlowDenied, ReservationTimeout
from provtrace.harness.oracle import AccumulationOracle
from provtrace.ids import Flow, ResourceId

logger = logging.getLogger(__name__)


@dataclass
class StressResult:
    workers: int
    ops: int
    resources: int
    seed: int
    elapsed: float
    completed: bool
    outcomes: Counter = field(default_factory=Counter)
    mismatches: list[str] = field(default_factory=list)
    exclusivity_violations: int = 0
    exclusivity_checks: int = 0
    held_after: int = 0
    pending_after: int = 0
    diagnostics: str = ""

    @property
    def passed(self) -> bool:
        return (
            self.completed
            and not self.mismatches
            and self.exclusivity_violations == 0
            and self.held_after == 0
            and self.pending_after == 0
        )

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} stress workers={self.workers} ops={self.ops} resources={self.resources} "
            f"seed={self.seed} elapsed={self.elapsed:.2f}s outcomes={dict(self.outcomes)} "
            f"mismatches={len(self.mismatches)} rw_violations={self.exclusivity_violations}/"
            f"{self.exclusivity_checks} held_after={self.held_after}"
        )


def stress_resources(node: str, workers: int, resources: int) -> tuple[list[ResourceId], list[ResourceId]]:
    """One process per worker plus ``resources`` shared files."""
    procs = [ResourceId.process(node, 1000 + i, 0) for i in range(workers)]
    files = [ResourceId.file(node, f"/stress/r{j:03d}") for j in range(resources)]
    return procs, files


def check_against_oracle(engine: ProvenanceEngine, ids: list[ResourceId]) -> list[str]:
    settled = sorted(engine.settlements, key=lambda s: s.seq)
    oracle = AccumulationOracle().replay((s.flow.source, s.flow.destination) for s in settled)
    mismatches = []
    for rid in ids:
        got = frozenset(s.id for s in engine.get_provenance(rid))
        want = oracle.provenance(rid)
        if got != want:
            mismatches.append(f"{rid}: engine has {sorted(got)}, oracle has {sorted(want)}")
    return mismatches


def run_stress(
    workers: int,
    ops: int,
    resources: int,
    seed: int,
    *,
    budget: float = 60.0,
    reservation_timeout: float = 5.0,
    failure_rate: float = 0.1,
    hold_jitter: float = 0.0002,
) -> StressResult:
    if min(workers, ops, resources) < 1:
        raise ValueError("workers, ops and resources must all be >= 1")
    engine = ProvenanceEngine(EngineConfig("stress", reservation_timeout))
    procs, files = stress_resources(engine.node, workers, resources)
    for rid in procs + files:
        engine.enroll(rid)

    outcomes: Counter = Counter()
    outcomes_lock = threading.Lock()
    errors: list[BaseException] = []

    def worker(idx: int) -> None:
        rng = random.Random(seed * 7919 + idx)
        local: Counter = Counter()
        try:
            for _ in range(ops):
                proc, f = rng.choice(procs), rng.choice(files)
                flow = Flow(f, proc) if rng.random() < 0.5 else Flow(proc, f)
                try:
                    grant = engine.request_flow(flow)
                except ReservationTimeout:
                    local["timed_out"] += 1
                    continue
                except FlowDenied:
                    local["denied"] += 1
                    continue
                if hold_jitter:
                    time.sleep(rng.random() * hold_jitter)
                ok = rng.random() >= failure_rate
                engine.report_flow(grant.grant_id, ok)
                local["success" if ok else "failure"] += 1
        except BaseException as exc:  # surfaced in the result
            errors.append(exc)
        finally:
            with outcomes_lock:
                outcomes.update(local)

    threads = [threading.Thread(target=worker, args=(i,), daemon=True) for i in range(workers)]
    start = time.monotonic()
    for t in threads:
        t.start()
    for t in threads:
        t.join(max(0.0, budget - (time.monotonic() - start)))
    elapsed = time.monotonic() - start
    completed = not any(t.is_alive() for t in threads)

    result = StressResult(workers, ops, resources, seed, elapsed, completed, outcomes)
    if not completed:
        result.diagnostics = "deadlock suspected; label map:\n" + engine.dump()
        result.mismatches.append("workers did not finish within budget")
    else:
        result.mismatches.extend(f"worker error: {e!r}" for e in errors)
        result.mismatches.extend(check_against_oracle(engine, procs + files))
    result.exclusivity_violations = engine.monitor.violations
    result.exclusivity_checks = engine.monitor.checks
    result.held_after = engine.held_count()
    result.pending_after = engine.pending_count()
    engine.close()
    return result


def run_adversarial_pair(iterations: int = 500, *, budget: float = 30.0) -> bool:
    """One thread keeps flowing P->F while another flows F->P; both must finish."""
    engine = ProvenanceEngine(EngineConfig("pair"))
    p = ResourceId.process("pair", 1, 0)
    f = ResourceId.file("pair", "/pair/f")

    def loop(flow: Flow) -> None:
        for _ in range(iterations):
            g = engine.request_flow(flow)
            time.sleep(0)
            engine.report_flow(g.grant_id, True)

    threads = [
        threading.Thread(target=loop, args=(Flow(p, f),), daemon=True),
        threading.Thread(target=loop, args=(Flow(f, p),), daemon=True),
    ]
    for t in threads:
        t.start()
    deadline = time.monotonic() + budget
    for t in threads:
        t.join(max(0.0, deadline - time.monotonic()))
    done = not any(t.is_alive() for t in threads)
    done = done and engine.held_count() == 0 and len(engine.settlements) == 2 * iterations
    engine.close()
    return done
