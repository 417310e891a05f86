"""Middleware-to-middleware protocol for cross-node streams.

A writer's middleware sends ``Reserve`` before granting the write and
``SyncProvenance`` (carrying the stream's updated provenance) before
acknowledging the report. Stream ids travel as seen by the receiving node;
a receiver also accepts the sender's view and mirrors it.
"""

from __future__ import annotations

import threading
from typing import Iterable

from provtrace.engine import ProvenanceEngine
from provtrace.errors import PeerUnreachable, ReservationTimeout
from provtrace.ids import Kind, LabelSummary, NodeId, ResourceId, parse_resource_id
from provtrace.p2m import summaries_from_wire, summaries_to_wire
from provtrace.wire import BadRequest, Handler, RpcClient, WireLog, require

DEFAULT_M2M_PORT = 50052

# Slack on top of the peer's own reservation timeout before giving up on a Reserve.
RESERVE_SLACK = 0.5


class M2MService:
    def __init__(self, engine: ProvenanceEngine) -> None:
        self.engine = engine

    @property
    def handlers(self) -> dict[str, Handler]:
        return {
            "Hello": lambda params: ("Hello", {"node": self.engine.node}),
            "Reserve": self.handle_reserve,
            "SyncProvenance": self.handle_sync_provenance,
        }

    def _local_stream(self, params) -> ResourceId:
        rid = parse_resource_id(require(params, "stream"))
        if rid.kind is not Kind.STREAM:
            raise BadRequest(f"{rid} is not a stream id")
        if rid.node != self.engine.node:
            rid = rid.mirrored(self.engine.node)
        return rid

    def handle_reserve(self, params):
        self.engine.reserve_remote(self._local_stream(params))
        return "Ack", {}

    def handle_sync_provenance(self, params):
        stream = self._local_stream(params)
        summaries = summaries_from_wire(require(params, "provenance", list))
        self.engine.sync_remote_provenance(stream, summaries)
        return "Ack", {}


class M2MClient:
    """Outbound side; one RPC client per peer endpoint."""

    def __init__(self, node: NodeId = "", wire_log: WireLog | None = None, timeout: float = 10.0):
        self.node = node
        self.wire_log = wire_log
        self.timeout = timeout
        self._clients: dict[str, RpcClient] = {}
        self._node_ids: dict[str, NodeId] = {}
        self._lock = threading.Lock()

    def _client(self, endpoint: str) -> RpcClient:
        with self._lock:
            client = self._clients.get(endpoint)
            if client is None:
                client = self._clients[endpoint] = RpcClient(
                    endpoint, timeout=self.timeout, node=self.node, channel="m2m", wire_log=self.wire_log
                )
            return client

    def _call(self, endpoint: str, method: str, params: dict, timeout: float | None = None):
        try:
            return self._client(endpoint).call(method, params, timeout=timeout)
        except TimeoutError as exc:
            raise ReservationTimeout(str(exc)) from exc
        except OSError as exc:
            raise PeerUnreachable(f"{endpoint}: {exc}") from exc

    def node_id(self, endpoint: str) -> NodeId:
        node = self._node_ids.get(endpoint)
        if node is None:
            node = self._call(endpoint, "Hello", {})[1]["node"]
            self._node_ids[endpoint] = node
        return node

    def reserve(self, endpoint: str, stream: ResourceId, timeout: float) -> None:
        self._call(endpoint, "Reserve", {"stream": stream.uri}, timeout=timeout + RESERVE_SLACK)

    def sync(self, endpoint: str, stream: ResourceId, provenance: Iterable[LabelSummary]) -> None:
        self._call(
            endpoint,
            "SyncProvenance",
            {"stream": stream.uri, "provenance": summaries_to_wire(provenance)},
        )
