"""Drop-in replacement for TCP use of :mod:`socket`.

Connected sockets are identified by their (local, peer) address pair; every
``recv*``/``send*`` is mediated by the local middleware. Listening sockets
are not resources themselves, but ``accept`` hands out traced connections.
"""

from __future__ import annotations

import socket as _socket
from socket import *  # noqa: F401,F403
from typing import Any

from provtrace.ids import ResourceId
from provtrace.tracer import Tracer, default_tracer


class TracedSocket:
    def __init__(self, sock: _socket.socket, tracer: Tracer) -> None:
        self._sock = sock
        self.tracer = tracer
        self.id: ResourceId | None = None
        self._bypass = False

    @classmethod
    def _connected(cls, sock: _socket.socket, tracer: Tracer) -> TracedSocket:
        ts = cls(sock, tracer)
        ts._identify()
        return ts

    def _identify(self) -> None:
        local = self._sock.getsockname()[:2]
        peer = self._sock.getpeername()[:2]
        self.id = self.tracer.register(lambda node: ResourceId.stream(node, local, peer))
        self._bypass = self.id is None

    def _mediated(self, name: str, inbound: bool, fn, *args):
        if self.id is None:
            if self._bypass:
                return fn(*args)
            raise OSError(f"{name} on a socket that is not connected")
        proc = self.tracer.process_id
        src, dst = (self.id, proc) if inbound else (proc, self.id)
        return self.tracer.mediate(name, src, dst, lambda: fn(*args))

    # connection management

    def connect(self, address) -> None:
        self._sock.connect(address)
        self._identify()

    def accept(self) -> tuple[TracedSocket, Any]:
        conn, addr = self._sock.accept()
        return TracedSocket._connected(conn, self.tracer), addr

    # data movement

    def recv(self, bufsize: int, flags: int = 0) -> bytes:
        return self._mediated("stream_read", True, self._sock.recv, bufsize, flags)

    def recv_into(self, buffer, nbytes: int = 0, flags: int = 0) -> int:
        return self._mediated("stream_read", True, self._sock.recv_into, buffer, nbytes, flags)

    def send(self, data, flags: int = 0) -> int:
        return self._mediated("stream_write", False, self._sock.send, data, flags)

    def sendall(self, data, flags: int = 0) -> None:
        return self._mediated("stream_write", False, self._sock.sendall, data, flags)

    def makefile(self, *args, **kwargs):
        raise NotImplementedError("buffered socket files are not mediated; use recv/send")

    def __enter__(self) -> TracedSocket:
        return self

    def __exit__(self, *exc) -> None:
        self._sock.close()

    def __getattr__(self, name: str):
        return getattr(self._sock, name)

    def __repr__(self) -> str:
        return f"<TracedSocket {self.id or '(unconnected)'}>"


def socket(family=AF_INET, type=SOCK_STREAM, proto=0, fileno=None, *,  # noqa: F405
           tracer: Tracer | None = None) -> TracedSocket:
    return TracedSocket(_socket.socket(family, type, proto, fileno), tracer or default_tracer())


def create_connection(address, timeout=_socket._GLOBAL_DEFAULT_TIMEOUT, source_address=None, *,
                      tracer: Tracer | None = None) -> TracedSocket:
    sock = _socket.create_connection(address, timeout, source_address)
    try:
        return TracedSocket._connected(sock, tracer or default_tracer())
    except BaseException:
        sock.close()
        raise


def create_server(address, *, family=AF_INET, backlog=None, reuse_port=False,  # noqa: F405
                  dualstack_ipv6=False, tracer: Tracer | None = None) -> TracedSocket:
    sock = _socket.create_server(
        address, family=family, backlog=backlog, reuse_port=reuse_port, dualstack_ipv6=dualstack_ipv6
    )
    return TracedSocket(sock, tracer or default_tracer())
