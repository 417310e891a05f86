from __future__ import annotations

import json
import socket
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from provtrace.errors import MalformedId, ProtocolError, StaleGrant, UnknownResource
from provtrace.ids import ComplianceFlags, ResourceId
from provtrace.p2m import GrantMsg, GrantStatus, P2MClient, P2MService, summaries_from_wire
from provtrace.reservation import Mode
from provtrace.wire import BadRequest, RpcServer, WireLog, parse_address


def call(service, method, **params):
    return service.handlers[method](params)


class TestHandlers:
    def test_request_report_roundtrip(self, engine, ids):
        svc = P2MService(engine)
        kind, grant = call(svc, "IoRequest", source=ids["A"].uri, destination=ids["P1"].uri)
        assert kind == "Grant" and grant["status"] == "Granted"
        assert call(svc, "IoReport", grant_id=grant["grant_id"], outcome="Success") == ("Ack", {})
        kind, result = call(svc, "ProvenanceQuery", id=ids["P1"].uri)
        assert kind == "Provenance"
        assert result["provenance"] == [{"id": ids["A"].uri, "flags": {"confidentiality": False, "integrity": False}}]

    def test_denied_grant_carries_policy(self, engine, ids):
        svc = P2MService(engine)
        stream = ResourceId.stream("nodeA", ("10.0.0.1", 1), ("10.0.0.2", 2))
        engine.config.peer_registry["10.0.0.2"] = "x"

        class Peers:
            def node_id(self, ep):
                return "nodeB"

            def reserve(self, *a):
                pass

            def sync(self, *a):
                pass

        engine.remote = Peers()
        call(svc, "Enroll", id=ids["A"].uri, flags={"confidentiality": True})
        _, g = call(svc, "IoRequest", source=ids["A"].uri, destination=ids["P1"].uri)
        call(svc, "IoReport", grant_id=g["grant_id"], outcome="Success")
        _, g = call(svc, "IoRequest", source=ids["P1"].uri, destination=stream.uri)
        assert g == {"status": "Denied", "policy": "local_confidentiality"}

    def test_timed_out_status(self, engine, ids):
        svc = P2MService(engine)
        engine.config.reservation_timeout = 0.1
        # Hold the destination outside any grant so no reaper frees it.
        engine.enroll(ids["A"])
        entry = engine._entry(ids["A"])
        assert entry.reservation.acquire(Mode.EXCLUSIVE, time.monotonic() + 1)
        try:
            _, g = call(svc, "IoRequest", source=ids["P2"].uri, destination=ids["A"].uri)
        finally:
            entry.reservation.release(Mode.EXCLUSIVE)
        assert g == {"status": "TimedOut"}
        assert engine.held_count() == 0

    @pytest.mark.parametrize(
        "method, params, exc",
        [
            ("IoRequest", {"source": "file://n/x"}, BadRequest),
            ("IoRequest", {"source": 3, "destination": "file://n/x"}, BadRequest),
            ("IoRequest", {"source": "bogus", "destination": "file://n/x"}, MalformedId),
            ("IoReport", {"grant_id": "nodeA#99", "outcome": "Success"}, StaleGrant),
            ("IoReport", {"grant_id": "nodeA#1", "outcome": "Maybe"}, BadRequest),
            ("ProvenanceQuery", {"id": "file://nodeA/nowhere"}, UnknownResource),
            ("SetPolicy", {"id": "file://nodeA/x"}, BadRequest),
            ("Enroll", {"id": "file://nodeA/x", "flags": {"secret": True}}, BadRequest),
        ],
    )
    def test_malformed_requests(self, engine, method, params, exc):
        with pytest.raises(exc):
            P2MService(engine).handlers[method](params)

    def test_grant_message_field_presence(self):
        assert GrantMsg(GrantStatus.GRANTED, grant_id="n#1").to_dict() == {"status": "Granted", "grant_id": "n#1"}
        with pytest.raises(ValueError):
            GrantMsg(GrantStatus.GRANTED)
        with pytest.raises(ValueError):
            GrantMsg(GrantStatus.DENIED, grant_id="n#1", policy="p")
        with pytest.raises(ValueError):
            GrantMsg(GrantStatus.TIMED_OUT, policy="p")

    def test_summaries_from_wire_rejects_duplicates(self):
        item = {"id": "file://n/a"}
        with pytest.raises(BadRequest, match="twice"):
            summaries_from_wire([item, item])
        with pytest.raises(BadRequest):
            summaries_from_wire({"id": "file://n/a"})


class TestOverTcp:
    def test_client_roundtrip(self, middleware, ids):
        c = P2MClient(middleware.p2m_address, timeout=5)
        assert c.hello() == "nodeA"
        c.enroll(ids["A"], ComplianceFlags(integrity=True))
        g = c.io_request(ids["A"], ids["P1"])
        assert g.status is GrantStatus.GRANTED
        c.io_report(g.grant_id, True)
        # Read-your-writes: the Ack is only sent once the update is applied.
        (s,) = c.provenance(ids["P1"])
        assert s.id == ids["A"] and s.flags.integrity
        assert ids["A"].uri in c.dump()
        c.close()

    def test_error_codes_cross_the_wire(self, middleware, ids):
        c = P2MClient(middleware.p2m_address, timeout=5)
        with pytest.raises(StaleGrant):
            c.io_report("nodeA#12345", True)
        with pytest.raises(UnknownResource):
            c.provenance(ids["C"])
        with pytest.raises(ProtocolError) as info:
            c.call("NoSuchMethod")
        assert info.value.code == "BAD_REQUEST"
        c.close()

    def test_wire_log_records_both_directions(self, engine, ids):
        log = WireLog()
        svc = P2MService(engine)
        server = RpcServer(("127.0.0.1", 0), svc.handlers, node="nodeA", channel="p2m", wire_log=log).start()
        try:
            c = P2MClient(server.address, timeout=5, node="client", wire_log=log)
            g = c.io_request(ids["A"], ids["P1"])
            c.io_report(g.grant_id, False)
            c.close()
        finally:
            server.stop()
        kinds = [(e.node, e.direction, e.kind) for e in log.events()]
        assert kinds == [
            ("client", "send", "IoRequest"),
            ("nodeA", "recv", "IoRequest"),
            ("nodeA", "send", "Grant"),
            ("client", "recv", "Grant"),
            ("client", "send", "IoReport"),
            ("nodeA", "recv", "IoReport"),
            ("nodeA", "send", "Ack"),
            ("client", "recv", "Ack"),
        ]
        assert log.count("IoRequest", direction="recv") == 1


def _raw_exchange(address: str, payload: bytes) -> dict:
    with socket.create_connection(parse_address(address), timeout=5) as s:
        s.sendall(payload + b"\n")
        buf = b""
        while not buf.endswith(b"\n"):
            chunk = s.recv(65536)
            if not chunk:
                break
            buf += chunk
    return json.loads(buf)


frames = st.one_of(
    st.binary(max_size=64).filter(lambda b: b"\n" not in b and b.strip()),
    st.builds(json.dumps, st.one_of(st.integers(), st.lists(st.integers()), st.text())).map(str.encode),
    st.builds(
        lambda m, p: json.dumps({"id": 1, "method": m, "params": p}).encode(),
        st.sampled_from(["IoRequest", "IoReport", "Enroll", "SetPolicy", "ProvenanceQuery", "Nope", 5]),
        st.one_of(
            st.dictionaries(st.sampled_from(["id", "source", "destination", "grant_id", "outcome", "flags"]),
                            st.one_of(st.text(max_size=20), st.integers(), st.none(), st.booleans()),
                            max_size=3),
            st.lists(st.integers(), max_size=2),
        ),
    ),
)


@settings(max_examples=80, deadline=None)
@given(frames)
def test_fuzzed_frames_get_error_replies(middleware_session, frame):
    reply = _raw_exchange(middleware_session.p2m_address, frame)
    assert reply["type"] in ("Error", "Grant", "Ack", "Provenance")
    if reply["type"] == "Error":
        assert reply["error"]["code"] != "INTERNAL", reply


@pytest.fixture(scope="module")
def middleware_session():
    from provtrace.daemon import Middleware
    from provtrace.engine import EngineConfig

    with Middleware(EngineConfig("fuzz", 0.2), ("127.0.0.1", 0), ("127.0.0.1", 0)) as mw:
        yield mw
