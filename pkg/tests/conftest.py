from __future__ import annotations

import itertools

import pytest

from provtrace.daemon import Middleware
from provtrace.engine import EngineConfig, ProvenanceEngine
from provtrace.ids import ResourceId
from provtrace.tracer import Tracer
from provtrace.wire import WireLog

_pids = itertools.count(7000)


@pytest.fixture
def engine():
    eng = ProvenanceEngine(EngineConfig("nodeA", reservation_timeout=1.0))
    yield eng
    eng.close()


@pytest.fixture
def ids():
    """A small cast on nodeA: processes P1, P2 and files A, B, C."""
    n = "nodeA"
    return {
        "P1": ResourceId.process(n, 1, 100),
        "P2": ResourceId.process(n, 2, 100),
        "A": ResourceId.file(n, "/data/A"),
        "B": ResourceId.file(n, "/data/B"),
        "C": ResourceId.file(n, "/data/C"),
    }


@pytest.fixture
def middleware():
    with Middleware(EngineConfig("nodeA", 1.0), ("127.0.0.1", 0), ("127.0.0.1", 0)) as mw:
        yield mw


@pytest.fixture
def two_nodes():
    """Middlewares A (127.0.0.2) and B (127.0.0.3) that know each other."""
    log = WireLog()
    a = Middleware(EngineConfig("A", 1.0), ("127.0.0.2", 0), ("127.0.0.2", 0), wire_log=log).start()
    b = Middleware(EngineConfig("B", 1.0), ("127.0.0.3", 0), ("127.0.0.3", 0), wire_log=log).start()
    a.engine.config.peer_registry["127.0.0.3"] = b.m2m_address
    b.engine.config.peer_registry["127.0.0.2"] = a.m2m_address
    yield a, b, log
    a.stop()
    b.stop()


@pytest.fixture
def make_tracer():
    made = []

    def make(mw: Middleware, **kwargs) -> Tracer:
        kwargs.setdefault("process", ResourceId.process(mw.node, next(_pids), 0))
        t = Tracer(mw.p2m_address, node=mw.node, timeout=10, **kwargs)
        made.append(t)
        return t

    yield make
    for t in made:
        t.close()


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
