"""Request/response RPC framing shared by the P2M and M2M services.

Each frame is one JSON object per line::

    -> {"id": 7, "method": "IoRequest", "params": {...}}
    <- {"id": 7, "type": "Grant", "result": {...}}
    <- {"id": 7, "type": "Error", "error": {"code": "STALE_GRANT", "message": "..."}}

Connections are persistent; a client may send any number of requests, one at
a time, on the same connection.
"""

from __future__ import annotations

import itertools
import json
import logging
import socket
import socketserver
import threading
import time
from dataclasses import dataclass
from typing import Any, Callable

from provtrace.errors import ProtocolError, ProvtraceError, from_code

logger = logging.getLogger(__name__)

MAX_FRAME = 16 * 1024 * 1024

Handler = Callable[[dict[str, Any]], tuple[str, dict[str, Any]]]


class BadRequest(ProvtraceError, ValueError):
    code = "BAD_REQUEST"


def parse_address(text: str, default_host: str = "127.0.0.1") -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep:
        host, port = default_host, text
    if host.startswith("[") and host.endswith("]"):
        host = host[1:-1]
    try:
        return host or default_host, int(port)
    except ValueError:
        raise ValueError(f"bad address {text!r}, expected host:port") from None


def format_address(addr: tuple[str, int]) -> str:
    host, port = addr[0], addr[1]
    return f"[{host}]:{port}" if ":" in host else f"{host}:{port}"


def require(params: dict[str, Any], name: str, kind: type = str) -> Any:
    if not isinstance(params, dict) or name not in params:
        raise BadRequest(f"missing field {name!r}")
    value = params[name]
    if not isinstance(value, kind):
        raise BadRequest(f"field {name!r} must be {kind.__name__}")
    return value


@dataclass(frozen=True)
class WireEvent:
    seq: int
    ts: float
    node: str
    channel: str
    direction: str  # "send" or "recv"
    kind: str
    detail: str = ""


class WireLog:
    """Ordered record of protocol messages seen by one or more middlewares."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._seq = itertools.count()
        self._events: list[WireEvent] = []

    def record(self, node: str, channel: str, direction: str, kind: str, detail: str = "") -> None:
        with self._lock:
            self._events.append(
                WireEvent(next(self._seq), time.monotonic(), node, channel, direction, kind, detail)
            )
        logger.debug("%s %s %s %s %s", node, channel, direction, kind, detail)

    def events(self, **match: str) -> list[WireEvent]:
        with self._lock:
            events = list(self._events)
        return [e for e in events if all(getattr(e, k) == v for k, v in match.items())]

    def count(self, kind: str, **match: str) -> int:
        return len(self.events(kind=kind, **match))

    def clear(self) -> None:
        with self._lock:
            self._events.clear()


class _Server(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, addr, rpc: RpcServer) -> None:
        self.rpc = rpc
        super().__init__(addr, _ConnectionHandler)


class _ConnectionHandler(socketserver.StreamRequestHandler):
    server: _Server

    def setup(self) -> None:
        super().setup()
        self.connection.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.server.rpc._track(self.connection, add=True)

    def finish(self) -> None:
        self.server.rpc._track(self.connection, add=False)
        try:
            super().finish()
        except OSError:
            pass

    def handle(self) -> None:
        rpc = self.server.rpc
        while True:
            try:
                line = self.rfile.readline(MAX_FRAME)
            except OSError:
                return
            if not line:
                return
            reply = rpc.dispatch(line)
            try:
                self.wfile.write(reply)
                self.wfile.flush()
            except OSError:
                return


class RpcServer:
    """Threaded TCP server dispatching JSON frames to ``handlers[method]``."""

    def __init__(
        self,
        address: tuple[str, int],
        handlers: dict[str, Handler],
        *,
        node: str = "",
        channel: str = "",
        wire_log: WireLog | None = None,
    ) -> None:
        self.handlers = handlers
        self.node = node
        self.channel = channel
        self.wire_log = wire_log
        self._conns: set[socket.socket] = set()
        self._conns_lock = threading.Lock()
        self._server = _Server(address, self)
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[:2]

    def start(self) -> RpcServer:
        self._thread = threading.Thread(
            target=self._server.serve_forever,
            kwargs={"poll_interval": 0.05},
            name=f"{self.channel}-{self.node}",
            daemon=True,
        )
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        with self._conns_lock:
            conns = list(self._conns)
        for c in conns:
            try:
                c.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
        if self._thread is not None:
            self._thread.join(timeout=2)

    def _track(self, conn: socket.socket, add: bool) -> None:
        with self._conns_lock:
            (self._conns.add if add else self._conns.discard)(conn)

    def _log(self, direction: str, kind: str, detail: str = "") -> None:
        if self.wire_log is not None:
            self.wire_log.record(self.node, self.channel, direction, kind, detail)

    def dispatch(self, line: bytes) -> bytes:
        req_id = None
        try:
            try:
                msg = json.loads(line)
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise BadRequest(f"frame is not valid JSON: {exc}") from None
            if not isinstance(msg, dict):
                raise BadRequest("frame must be a JSON object")
            req_id = msg.get("id")
            method = msg.get("method")
            handler = self.handlers.get(method) if isinstance(method, str) else None
            if handler is None:
                raise BadRequest(f"unknown method {method!r}")
            params = msg.get("params", {})
            if not isinstance(params, dict):
                raise BadRequest("params must be an object")
            self._log("recv", method)
            kind, result = handler(params)
            self._log("send", kind)
            reply = {"id": req_id, "type": kind, "result": result}
        except ProvtraceError as exc:
            self._log("send", "Error", exc.code)
            reply = {"id": req_id, "type": "Error", "error": {"code": exc.code, "message": str(exc)}}
        except Exception as exc:
            logger.exception("handler failure")
            self._log("send", "Error", "INTERNAL")
            reply = {"id": req_id, "type": "Error", "error": {"code": "INTERNAL", "message": repr(exc)}}
        try:
            return (json.dumps(reply, separators=(",", ":")) + "\n").encode()
        except (TypeError, ValueError):
            bad = {"id": None, "type": "Error", "error": {"code": "INTERNAL", "message": "unserializable reply"}}
            return (json.dumps(bad) + "\n").encode()


class RpcClient:
    """Blocking client; one persistent connection per calling thread."""

    def __init__(
        self,
        address: str | tuple[str, int],
        *,
        timeout: float | None = 30.0,
        node: str = "",
        channel: str = "",
        wire_log: WireLog | None = None,
    ) -> None:
        self.address = parse_address(address) if isinstance(address, str) else tuple(address)
        self.timeout = timeout
        self.node = node
        self.channel = channel
        self.wire_log = wire_log
        self._local = threading.local()
        self._ids = itertools.count(1)

    def _connect(self, timeout: float | None):
        sock = socket.create_connection(self.address, timeout=timeout)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return sock, sock.makefile("rb")

    def close(self) -> None:
        conn = getattr(self._local, "conn", None)
        self._local.conn = None
        if conn is not None:
            sock, rfile = conn
            try:
                rfile.close()
                sock.close()
            except OSError:
                pass

    def _log(self, direction: str, kind: str, detail: str = "") -> None:
        if self.wire_log is not None:
            self.wire_log.record(self.node, self.channel, direction, kind, detail)

    def _exchange(self, frame: bytes, timeout: float | None) -> bytes:
        conn = getattr(self._local, "conn", None)
        if conn is None:
            conn = self._local.conn = self._connect(timeout)
        sock, rfile = conn
        sock.settimeout(timeout)
        sock.sendall(frame)
        line = rfile.readline(MAX_FRAME)
        if not line:
            raise ConnectionResetError("connection closed by server")
        return line

    def call(self, method: str, params: dict[str, Any] | None = None, timeout: float | None = None) -> tuple[str, dict]:
        """Send one request; returns ``(reply_type, result)`` or raises the mapped error.

        Transport failures raise :class:`OSError` (``ConnectionError`` or
        ``TimeoutError``); callers decide what that means for them.
        """
        timeout = self.timeout if timeout is None else timeout
        req_id = next(self._ids)
        frame = (json.dumps({"id": req_id, "method": method, "params": params or {}}) + "\n").encode()
        self._log("send", method)
        fresh = getattr(self._local, "conn", None) is None
        try:
            line = self._exchange(frame, timeout)
        except socket.timeout:
            self.close()
            raise TimeoutError(f"{method} to {format_address(self.address)} timed out") from None
        except OSError:
            self.close()
            if fresh:
                raise
            # Stale pooled connection: retry once on a new one.
            try:
                line = self._exchange(frame, timeout)
            except socket.timeout:
                self.close()
                raise TimeoutError(f"{method} to {format_address(self.address)} timed out") from None
            except OSError:
                self.close()
                raise
        try:
            reply = json.loads(line)
            kind = reply["type"]
        except (ValueError, KeyError, TypeError):
            self.close()
            raise ProtocolError("BAD_REPLY", line[:200].decode(errors="replace")) from None
        self._log("recv", kind)
        if kind == "Error":
            err = reply.get("error") or {}
            raise from_code(str(err.get("code", "INTERNAL")), str(err.get("message", "")))
        return kind, reply.get("result") or {}
