"""The traceability core of one middleware instance.

The engine owns the id -> label map, takes per-label readers-writers
reservations for every flow (source shared, destination exclusive, always in
:class:`~provtrace.ids.ResourceId` order), runs the compliance chain while
both are held, and applies the provenance update when the flow is reported.

Flows whose destination is a stream with a peer on another middleware also
reserve the remote side of the stream through ``remote`` (see
:class:`RemotePeers`) and push the updated provenance there on report.
"""

from __future__ import annotations

import collections
import heapq
import itertools
import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Iterable, Protocol

from provtrace.compliance import ComplianceEngine, Enforcer
from provtrace.errors import (
    BadFlow,
    FlowDenied,
    PeerUnreachable,
    ReservationTimeout,
    StaleGrant,
    UnknownResource,
)
from provtrace.ids import (
    ComplianceFlags,
    Flow,
    Grant,
    GrantId,
    Kind,
    Label,
    LabelSummary,
    NodeId,
    ResourceId,
    check_node_id,
    format_socket,
    merge_flags,
    merge_provenance,
    provenance_set,
)
from provtrace.reservation import ExclusivityMonitor, Mode, Reservation

logger = logging.getLogger(__name__)

DEFAULT_RESERVATION_TIMEOUT = 5.0


class RemotePeers(Protocol):
    """Outbound middleware-to-middleware calls used for cross-node streams."""

    def node_id(self, endpoint: str) -> NodeId: ...

    def reserve(self, endpoint: str, stream: ResourceId, timeout: float) -> None: ...

    def sync(self, endpoint: str, stream: ResourceId, provenance: Iterable[LabelSummary]) -> None: ...


@dataclass
class EngineConfig:
    node: NodeId
    reservation_timeout: float = DEFAULT_RESERVATION_TIMEOUT
    # peer socket ("ip:port", or bare "ip" for any port) -> M2M endpoint "host:port"
    peer_registry: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        check_node_id(self.node)
        if not self.reservation_timeout > 0:
            raise ValueError("reservation_timeout must be > 0")


class _Entry:
    __slots__ = ("id", "flags", "provenance", "reservation")

    def __init__(self, rid: ResourceId, flags: ComplianceFlags, monitor: ExclusivityMonitor):
        self.id = rid
        self.flags = flags
        # Replaced wholesale on update so lock-free readers (dump) see a consistent dict.
        self.provenance: dict[ResourceId, ComplianceFlags] = {}
        self.reservation = Reservation(monitor)

    def label(self) -> Label:
        return Label(self.id, self.flags, provenance_set(self.provenance))


@dataclass(frozen=True)
class Hold:
    id: ResourceId
    mode: Mode
    endpoint: str | None = None  # set for the remote side of a cross-node stream


@dataclass
class PendingGrant:
    grant: Grant
    held: list[Hold]
    deadline: float
    remote_peer: NodeId | None = None

    @property
    def remote(self) -> Hold | None:
        return next((h for h in self.held if h.endpoint is not None), None)


@dataclass
class _RemoteHold:
    stream: ResourceId
    deadline: float


@dataclass(frozen=True)
class Settlement:
    """One successful flow, in the order its provenance update was applied."""

    seq: int
    grant_id: GrantId
    flow: Flow


class ProvenanceEngine:
    def __init__(
        self,
        config: EngineConfig,
        remote: RemotePeers | None = None,
        enforcers: Iterable[Enforcer] | None = None,
        settlement_log_size: int = 100_000,
    ) -> None:
        self.config = config
        self.node = config.node
        self.remote = remote
        self.compliance = ComplianceEngine(
            config.node,
            is_remote_stream=lambda rid: self.resolve_peer(rid) is not None,
            chain=enforcers,
        )
        self.monitor = ExclusivityMonitor()

        self._map_lock = threading.Lock()
        self._entries: dict[ResourceId, _Entry] = {}
        self._pending: dict[GrantId, PendingGrant] = {}
        self._remote_holds: dict[ResourceId, _RemoteHold] = {}
        self._grant_seq = itertools.count(1)

        self._settle_lock = threading.Lock()
        self._settle_seq = itertools.count(1)
        self.settlements: collections.deque[Settlement] = collections.deque(
            maxlen=settlement_log_size
        )

        self._reaper_cond = threading.Condition(threading.Lock())
        self._deadlines: list[tuple[float, int, object]] = []
        self._heap_seq = itertools.count()
        self._closed = False
        self._reaper = threading.Thread(
            target=self._reap, name=f"reaper-{self.node}", daemon=True
        )
        self._reaper.start()

    @property
    def timeout(self) -> float:
        return self.config.reservation_timeout

    def close(self) -> None:
        with self._reaper_cond:
            self._closed = True
            self._reaper_cond.notify()
        self._reaper.join(timeout=2)

    # -- map ownership -----------------------------------------------------

    def _entry(self, rid: ResourceId, create: bool = False) -> _Entry:
        with self._map_lock:
            entry = self._entries.get(rid)
            if entry is None:
                if not create:
                    raise UnknownResource(f"{rid} is not enrolled")
                entry = self._entries[rid] = _Entry(rid, ComplianceFlags(), self.monitor)
            return entry

    def enroll(self, rid: ResourceId, flags: ComplianceFlags = ComplianceFlags()) -> None:
        entry = self._entry(rid, create=True)
        if flags.any() and merge_flags(entry.flags, flags) != entry.flags:
            self.set_policy(rid, flags)

    def set_policy(self, rid: ResourceId, flags: ComplianceFlags) -> None:
        entry = self._entry(rid)
        self._acquire_local(entry, Mode.EXCLUSIVE, time.monotonic() + self.timeout)
        try:
            entry.flags = merge_flags(entry.flags, flags)
        finally:
            entry.reservation.release(Mode.EXCLUSIVE)

    def get_provenance(self, rid: ResourceId) -> frozenset[LabelSummary]:
        entry = self._entry(rid)
        self._acquire_local(entry, Mode.SHARED, time.monotonic() + self.timeout)
        try:
            return provenance_set(entry.provenance)
        finally:
            entry.reservation.release(Mode.SHARED)

    def get_label(self, rid: ResourceId) -> Label:
        entry = self._entry(rid)
        self._acquire_local(entry, Mode.SHARED, time.monotonic() + self.timeout)
        try:
            return entry.label()
        finally:
            entry.reservation.release(Mode.SHARED)

    def resources(self) -> list[ResourceId]:
        with self._map_lock:
            return sorted(self._entries)

    def resolve_peer(self, rid: ResourceId) -> str | None:
        """M2M endpoint of the middleware on the far end of stream ``rid``, if any."""
        if rid.kind is not Kind.STREAM:
            return None
        reg = self.config.peer_registry
        return reg.get(format_socket(rid.peer)) or reg.get(rid.peer[0])

    # -- reservations --------------------------------------------------------

    def _acquire_local(self, entry: _Entry, mode: Mode, deadline: float) -> None:
        if not entry.reservation.acquire(mode, deadline):
            raise ReservationTimeout(f"could not reserve {entry.id} ({mode.value}) before deadline")

    def _acquire_all(self, plan: list[Hold], deadline: float) -> None:
        taken: list[Hold] = []
        try:
            for hold in plan:
                if hold.endpoint is None:
                    self._acquire_local(self._entry(hold.id), hold.mode, deadline)
                else:
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        raise ReservationTimeout(f"no time left to reserve remote {hold.id}")
                    self._remote().reserve(hold.endpoint, hold.id, remaining)
                taken.append(hold)
        except BaseException:
            self._release(taken)
            raise

    def _release(self, held: list[Hold]) -> None:
        for hold in reversed(held):
            if hold.endpoint is None:
                self._entry(hold.id).reservation.release(hold.mode)
            else:
                # An empty sync releases the remote reservation without changing provenance.
                try:
                    self._remote().sync(hold.endpoint, hold.id, ())
                except Exception as exc:  # the peer's own deadline will release it
                    logger.warning("release of remote %s failed: %s", hold.id, exc)

    def _remote(self) -> RemotePeers:
        if self.remote is None:
            raise PeerUnreachable("no middleware-to-middleware client configured")
        return self.remote

    def held_count(self) -> int:
        with self._map_lock:
            entries = list(self._entries.values())
        return sum(e.reservation.holders for e in entries)

    def pending_count(self) -> int:
        with self._map_lock:
            return len(self._pending) + len(self._remote_holds)

    # -- flows ---------------------------------------------------------------

    def _plan(self, flow: Flow) -> tuple[list[Hold], NodeId | None]:
        plan = [Hold(flow.source, Mode.SHARED), Hold(flow.destination, Mode.EXCLUSIVE)]
        remote_node = None
        endpoint = self.resolve_peer(flow.destination)
        if endpoint is not None:
            try:
                remote_node = self._remote().node_id(endpoint)
            except PeerUnreachable as exc:
                raise ReservationTimeout(f"peer middleware at {endpoint} unreachable: {exc}") from exc
            plan.append(Hold(flow.destination.mirrored(remote_node), Mode.EXCLUSIVE, endpoint))
        plan.sort(key=lambda h: h.id)
        return plan, remote_node

    def request_flow(self, flow: Flow) -> Grant:
        """Authorize ``flow``.

        Returns a :class:`Grant` whose reservations stay held until
        :meth:`report_flow` or the deadline. Raises :class:`FlowDenied` or
        :class:`ReservationTimeout`; in both cases nothing stays reserved.
        """
        for rid in (flow.source, flow.destination):
            if rid.node != self.node:
                raise BadFlow(f"{rid} does not belong to node {self.node}")
            self._entry(rid, create=True)

        plan, remote_node = self._plan(flow)
        self._acquire_all(plan, time.monotonic() + self.timeout)
        try:
            src = self._entry(flow.source).label()
            dst = self._entry(flow.destination).label()
            verdict = self.compliance.evaluate(src, dst)
        except BaseException:
            self._release(plan)
            raise
        if not verdict.allowed:
            self._release(plan)
            raise FlowDenied(verdict.policy)

        with self._map_lock:
            gid = GrantId(self.node, next(self._grant_seq))
            grant = Grant(gid, flow, time.time())
            pending = PendingGrant(grant, plan, time.monotonic() + self.timeout, remote_node)
            self._pending[gid] = pending
        self._schedule(pending.deadline, gid)
        return grant

    def report_flow(self, grant_id: GrantId, success: bool) -> None:
        with self._map_lock:
            pending = self._pending.pop(grant_id, None)
        if pending is None:
            raise StaleGrant(f"grant {grant_id} is unknown, settled or expired")

        flow = pending.grant.flow
        remote = pending.remote
        try:
            if success:
                src = self._entry(flow.source)
                dst = self._entry(flow.destination)
                updated = dict(dst.provenance)
                merge_provenance(updated, provenance_set(src.provenance))
                merge_provenance(updated, [LabelSummary(src.id, src.flags)])
                updated.pop(dst.id, None)
                dst.provenance = updated
                with self._settle_lock:
                    self.settlements.append(Settlement(next(self._settle_seq), grant_id, flow))
                if remote is not None:
                    self._remote().sync(remote.endpoint, remote.id, provenance_set(updated))
        finally:
            if success and remote is not None:
                # Remote side already released by the sync (or left to its deadline on error).
                self._release([h for h in pending.held if h.endpoint is None])
            else:
                self._release(pending.held)

    # -- inbound middleware-to-middleware ------------------------------------

    def reserve_remote(self, stream: ResourceId) -> None:
        if stream.kind is not Kind.STREAM:
            raise BadFlow(f"{stream} is not a stream")
        if stream.node != self.node:
            raise BadFlow(f"{stream} does not belong to node {self.node}")
        entry = self._entry(stream, create=True)
        self._acquire_local(entry, Mode.EXCLUSIVE, time.monotonic() + self.timeout)
        hold = _RemoteHold(stream, time.monotonic() + self.timeout)
        with self._map_lock:
            self._remote_holds[stream] = hold
        self._schedule(hold.deadline, hold)

    def sync_remote_provenance(self, stream: ResourceId, provenance: Iterable[LabelSummary]) -> None:
        with self._map_lock:
            hold = self._remote_holds.pop(stream, None)
        if hold is None:
            raise StaleGrant(f"no live remote reservation on {stream}")
        entry = self._entry(stream)
        try:
            updated = dict(entry.provenance)
            merge_provenance(updated, provenance)
            updated.pop(stream, None)
            entry.provenance = updated
        finally:
            entry.reservation.release(Mode.EXCLUSIVE)

    # -- deadlines -----------------------------------------------------------

    def _schedule(self, deadline: float, key: object) -> None:
        with self._reaper_cond:
            heapq.heappush(self._deadlines, (deadline, next(self._heap_seq), key))
            self._reaper_cond.notify()

    def _reap(self) -> None:
        while True:
            with self._reaper_cond:
                while not self._closed:
                    now = time.monotonic()
                    if self._deadlines and self._deadlines[0][0] <= now:
                        break
                    wait = self._deadlines[0][0] - now if self._deadlines else None
                    self._reaper_cond.wait(wait)
                if self._closed:
                    return
                _, _, key = heapq.heappop(self._deadlines)
            try:
                self._expire(key)
            except Exception:
                logger.exception("force-release of %r failed", key)

    def _expire(self, key: object) -> None:
        if isinstance(key, GrantId):
            with self._map_lock:
                pending = self._pending.pop(key, None)
            if pending is not None:
                logger.warning("grant %s expired; force-releasing %d reservations", key, len(pending.held))
                if pending.remote is None:
                    self._release(pending.held)
                else:
                    threading.Thread(target=self._release, args=(pending.held,), daemon=True).start()
        else:
            assert isinstance(key, _RemoteHold)
            with self._map_lock:
                if self._remote_holds.get(key.stream) is not key:
                    return
                del self._remote_holds[key.stream]
            logger.warning("remote reservation on %s expired without sync", key.stream)
            self._entry(key.stream).reservation.release(Mode.EXCLUSIVE)

    # -- diagnostics -----------------------------------------------------------

    def dump(self) -> str:
        """Full map, one line per resource: ``<id> <flags> <- <provenance ids>``."""
        with self._map_lock:
            entries = sorted(self._entries.values(), key=lambda e: e.id)
        lines = []
        for e in entries:
            prov = " ".join(r.uri for r in sorted(e.provenance))
            lines.append(f"{e.id.uri} {e.flags} <- [{prov}]")
        return "\n".join(lines)
