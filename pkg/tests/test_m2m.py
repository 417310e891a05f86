from __future__ import annotations

import pytest

from provtrace.daemon import Middleware
from provtrace.engine import EngineConfig
from provtrace.errors import StaleGrant
from provtrace.ids import ComplianceFlags, ResourceId
from provtrace.m2m import M2MClient, M2MService
from provtrace.p2m import GrantStatus, P2MClient
from provtrace.wire import BadRequest

A_SOCK = ("127.0.0.2", 41000)
B_SOCK = ("127.0.0.3", 8080)


def streams():
    on_a = ResourceId.stream("A", A_SOCK, B_SOCK)
    return on_a, on_a.mirrored("B")


def send(client, src, dst, success=True):
    g = client.io_request(src, dst)
    assert g.status is GrantStatus.GRANTED, g
    client.io_report(g.grant_id, success)


def test_cross_node_write_then_read(two_nodes):
    a, b, log = two_nodes
    ca, cb = P2MClient(a.p2m_address, timeout=5), P2MClient(b.p2m_address, timeout=5)
    p1, p2 = ResourceId.process("A", 1, 1), ResourceId.process("B", 2, 2)
    origin = ResourceId.file("A", "/origin")
    s_a, s_b = streams()
    send(ca, origin, p1)
    log.clear()
    send(ca, p1, s_a)
    send(cb, s_b, p2)
    prov = {s.id for s in cb.provenance(p2)}
    assert prov == {s_b, p1, origin}

    m2m = [(e.node, e.direction, e.kind) for e in log.events(channel="m2m")]
    assert m2m == [
        ("A", "send", "Hello"), ("B", "recv", "Hello"), ("B", "send", "Hello"), ("A", "recv", "Hello"),
        ("A", "send", "Reserve"), ("B", "recv", "Reserve"), ("B", "send", "Ack"), ("A", "recv", "Ack"),
        ("A", "send", "SyncProvenance"), ("B", "recv", "SyncProvenance"), ("B", "send", "Ack"),
        ("A", "recv", "Ack"),
    ]
    # Reserve lands before the Grant; the sync lands before the writer's Ack.
    seqs = {(e.node, e.channel, e.direction, e.kind): e.seq for e in log.events()}
    assert seqs[("B", "m2m", "send", "Ack")] > seqs[("A", "m2m", "send", "SyncProvenance")]
    assert seqs[("A", "p2m", "send", "Grant")] > seqs[("B", "m2m", "recv", "Reserve")]
    assert seqs[("A", "p2m", "send", "Ack")] > seqs[("A", "m2m", "recv", "Ack")]
    ca.close()
    cb.close()


def test_hello_is_cached(two_nodes):
    a, b, log = two_nodes
    ca = P2MClient(a.p2m_address, timeout=5)
    p1 = ResourceId.process("A", 1, 1)
    s_a, _ = streams()
    for _ in range(3):
        send(ca, p1, s_a)
    assert log.count("Hello", node="A", channel="m2m", direction="send") == 1
    assert log.count("Reserve", node="A", channel="m2m", direction="send") == 3
    ca.close()


def test_denied_remote_write_releases_peer(two_nodes):
    a, b, log = two_nodes
    ca = P2MClient(a.p2m_address, timeout=5)
    secret = ResourceId.file("A", "/secret")
    p1 = ResourceId.process("A", 1, 1)
    s_a, s_b = streams()
    ca.enroll(secret, ComplianceFlags(confidentiality=True))
    send(ca, secret, p1)
    g = ca.io_request(p1, s_a)
    assert g.status is GrantStatus.DENIED and g.policy == "local_confidentiality"
    assert b.engine.held_count() == 0 and b.engine.pending_count() == 0
    assert b.engine.get_provenance(s_b) == frozenset()
    ca.close()


def test_failure_report_releases_peer(two_nodes):
    a, b, _ = two_nodes
    ca = P2MClient(a.p2m_address, timeout=5)
    s_a, s_b = streams()
    send(ca, ResourceId.process("A", 1, 1), s_a, success=False)
    assert b.engine.held_count() == 0
    assert b.engine.get_provenance(s_b) == frozenset()
    ca.close()


def test_peer_down_times_out_without_change():
    with Middleware(EngineConfig("A", 1.0), ("127.0.0.2", 0), ("127.0.0.2", 0)) as a:
        # Registered peer whose middleware is not listening.
        a.engine.config.peer_registry["127.0.0.3"] = "127.0.0.3:1"
        ca = P2MClient(a.p2m_address, timeout=5)
        p1 = ResourceId.process("A", 1, 1)
        ca.enroll(p1)
        s_a, _ = streams()
        g = ca.io_request(p1, s_a)
        assert g.status is GrantStatus.TIMED_OUT
        assert a.engine.held_count() == 0 and a.engine.pending_count() == 0
        assert a.engine.get_provenance(s_a) == frozenset()
        ca.close()


def test_sync_without_reserve_is_stale(two_nodes):
    a, b, _ = two_nodes
    client = M2MClient("A")
    s_a, _ = streams()
    with pytest.raises(StaleGrant):
        client.sync(b.m2m_address, s_a, [])


def test_receiver_accepts_either_view(two_nodes):
    _, b, _ = two_nodes
    svc = M2MService(b.engine)
    s_a, s_b = streams()
    svc.handlers["Reserve"]({"stream": s_a.uri})
    svc.handlers["SyncProvenance"]({"stream": s_b.uri, "provenance": [{"id": "process://A/1@1"}]})
    assert {s.id.uri for s in b.engine.get_provenance(s_b)} == {"process://A/1@1"}


def test_reserve_rejects_non_stream(two_nodes):
    _, b, _ = two_nodes
    with pytest.raises(BadRequest):
        M2MService(b.engine).handlers["Reserve"]({"stream": "file://B/x"})
