"""Shim-side mediation: request, execute, report.

Configured from the environment unless a :class:`Tracer` is passed
explicitly:

``PROVTRACE_P2M``
    middleware address, default ``127.0.0.1:50051``
``PROVTRACE_FAIL_MODE``
    ``closed`` (default) refuses I/O when the middleware is unreachable,
    ``open`` performs it untraced
``PROVTRACE_TIMEOUT``
    per-message timeout in seconds, default 30
``PROVTRACE_NODE``
    node id; asked from the middleware when unset
"""

from __future__ import annotations

import contextlib
import logging
import os
import threading
import time
from dataclasses import dataclass
from typing import Callable, Iterator, TypeVar

from provtrace.errors import (
    FlowDenied,
    MiddlewareUnavailable,
    ProvtraceError,
    ReservationTimeout,
)
from provtrace.ids import ComplianceFlags, ResourceId
from provtrace.p2m import DEFAULT_P2M_PORT, GrantStatus, P2MClient

logger = logging.getLogger(__name__)

T = TypeVar("T")

FAIL_CLOSED = "closed"
FAIL_OPEN = "open"


@dataclass(frozen=True)
class PhaseTiming:
    """Wall-clock split of one mediated call, in seconds."""

    op: str
    authorization: float
    execution: float
    reporting: float
    total: float


def process_start_time(pid: int) -> int:
    """Start time in clock ticks since boot (``/proc/<pid>/stat`` field 22)."""
    try:
        with open(f"/proc/{pid}/stat", "rb") as f:
            stat = f.read().decode()
        return int(stat.rsplit(")", 1)[1].split()[19])
    except (OSError, IndexError, ValueError):
        return _FALLBACK_START


_FALLBACK_START = int(time.time())


class Tracer:
    def __init__(
        self,
        address: str | None = None,
        *,
        fail_mode: str | None = None,
        timeout: float | None = None,
        node: str | None = None,
        process: ResourceId | None = None,
        recorder: Callable[[PhaseTiming], None] | None = None,
        client: P2MClient | None = None,
    ) -> None:
        env = os.environ
        self.address = address or env.get("PROVTRACE_P2M", f"127.0.0.1:{DEFAULT_P2M_PORT}")
        self.fail_mode = (fail_mode or env.get("PROVTRACE_FAIL_MODE", FAIL_CLOSED)).lower()
        if self.fail_mode not in (FAIL_CLOSED, FAIL_OPEN):
            raise ValueError(f"fail mode must be {FAIL_CLOSED!r} or {FAIL_OPEN!r}")
        timeout = timeout if timeout is not None else float(env.get("PROVTRACE_TIMEOUT", "30"))
        self.client = client or P2MClient(self.address, timeout=timeout)
        self._node = node or env.get("PROVTRACE_NODE") or None
        self._process = process
        self._explicit = process is not None
        self._pid = os.getpid()
        self._enrolled_process = False
        self._lock = threading.Lock()
        self.recorder = recorder

    @property
    def fail_open(self) -> bool:
        return self.fail_mode == FAIL_OPEN

    def _unavailable(self, exc: BaseException) -> MiddlewareUnavailable:
        return MiddlewareUnavailable(f"middleware at {self.address} unreachable: {exc}")

    @property
    def node(self) -> str:
        if self._node is None:
            try:
                self._node = self.client.hello()
            except ProvtraceError:
                raise
            except OSError as exc:
                raise self._unavailable(exc) from exc
        return self._node

    @property
    def process_id(self) -> ResourceId:
        with self._lock:
            if self._process is None or (not self._explicit and self._pid != os.getpid()):
                # First use, or first use after a fork.
                self._pid = os.getpid()
                self._process = ResourceId.process(self.node, self._pid, process_start_time(self._pid))
                self._enrolled_process = False
            return self._process

    def enroll(self, rid: ResourceId, flags: ComplianceFlags = ComplianceFlags()) -> bool:
        """Enroll ``rid`` and this process. False when bypassed in fail-open mode."""
        try:
            proc = self.process_id
            if not self._enrolled_process:
                self.client.enroll(proc)
                self._enrolled_process = True
            self.client.enroll(rid, flags)
            return True
        except ProvtraceError as exc:
            if isinstance(exc, MiddlewareUnavailable) and self.fail_open:
                return False
            raise
        except OSError as exc:
            if self.fail_open:
                logger.warning("middleware unreachable, bypassing enrollment of %s", rid)
                return False
            raise self._unavailable(exc) from exc

    def register(self, make_id: Callable[[str], ResourceId]) -> ResourceId | None:
        """Build a resource id for this node and enroll it.

        Returns None when the middleware is down and the tracer fails open;
        the caller then bypasses mediation for that handle.
        """
        try:
            rid = make_id(self.node)
        except MiddlewareUnavailable:
            if self.fail_open:
                logger.warning("middleware unreachable, handle will be untraced")
                return None
            raise
        return rid if self.enroll(rid) else None

    def mediate(self, op_name: str, source: ResourceId, destination: ResourceId, op: Callable[[], T]) -> T:
        """Run ``op`` inside the request/grant/report sequence for ``source -> destination``."""
        t0 = time.perf_counter()
        try:
            reply = self.client.io_request(source, destination)
        except ProvtraceError:
            raise
        except OSError as exc:
            if self.fail_open:
                logger.warning("middleware unreachable, performing %s untraced", op_name)
                return op()
            raise self._unavailable(exc) from exc
        t1 = time.perf_counter()
        if reply.status is GrantStatus.DENIED:
            raise FlowDenied(reply.policy, f"{op_name} {source} -> {destination} denied by {reply.policy}")
        if reply.status is GrantStatus.TIMED_OUT:
            raise ReservationTimeout(f"{op_name} {source} -> {destination}: reservation timed out")

        try:
            result = op()
        except BaseException:
            t2 = time.perf_counter()
            self._report(reply.grant_id, False)
            self._record(op_name, t0, t1, t2)
            raise
        t2 = time.perf_counter()
        self._report(reply.grant_id, True)
        self._record(op_name, t0, t1, t2)
        return result

    def _report(self, grant_id: str, success: bool) -> None:
        try:
            self.client.io_report(grant_id, success)
        except ProvtraceError:
            raise
        except OSError as exc:
            if self.fail_open:
                logger.warning("middleware unreachable, report of %s lost", grant_id)
                return
            raise self._unavailable(exc) from exc

    def _record(self, op_name: str, t0: float, t1: float, t2: float) -> None:
        if self.recorder is not None:
            t3 = time.perf_counter()
            self.recorder(PhaseTiming(op_name, t1 - t0, t2 - t1, t3 - t2, t3 - t0))

    def close(self) -> None:
        self.client.close()


_default: Tracer | None = None
_default_lock = threading.Lock()


def default_tracer() -> Tracer:
    global _default
    with _default_lock:
        if _default is None:
            _default = Tracer()
        return _default


def set_default_tracer(tracer: Tracer | None) -> None:
    global _default
    with _default_lock:
        _default = tracer


@contextlib.contextmanager
def using(tracer: Tracer) -> Iterator[Tracer]:
    """Temporarily make ``tracer`` the default for shim calls."""
    global _default
    with _default_lock:
        prev, _default = _default, tracer
    try:
        yield tracer
    finally:
        with _default_lock:
            _default = prev
