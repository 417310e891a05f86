"""Exception hierarchy shared by the engine, the RPC services and the I/O shim.

Every error that can cross the wire carries a ``code`` from one flat code
space so that a client can rebuild the same exception class on its side
(see :func:`from_code`).
"""

from __future__ import annotations


class ProvtraceError(Exception):
    code = "INTERNAL"


class MalformedId(ProvtraceError, ValueError):
    code = "MALFORMED_ID"


class BadFlow(ProvtraceError, ValueError):
    code = "BAD_FLOW"


class UnknownResource(ProvtraceError, LookupError):
    code = "UNKNOWN_RESOURCE"


class StaleGrant(ProvtraceError, LookupError):
    """The grant was already settled, force-released at its deadline, or never issued."""

    code = "STALE_GRANT"


class PeerUnreachable(ProvtraceError, ConnectionError):
    code = "PEER_UNREACHABLE"


class ReservationTimeout(ProvtraceError, TimeoutError):
    code = "TIMED_OUT"


class FlowDenied(ProvtraceError, PermissionError):
    """A compliance enforcer rejected the flow.

    Subclasses :class:`PermissionError` so that code written against plain
    file and socket APIs handles a denial like any other EACCES.
    """

    code = "DENIED"

    def __init__(self, policy: str, message: str | None = None) -> None:
        self.policy = policy
        super().__init__(message or f"flow denied by policy {policy!r}")


class MiddlewareUnavailable(ProvtraceError, ConnectionError):
    """The local middleware could not be contacted (shim-side only)."""

    code = "MIDDLEWARE_UNAVAILABLE"


class ProtocolError(ProvtraceError):
    """Generic error reply whose code has no dedicated class."""

    def __init__(self, code: str, message: str = "") -> None:
        self.code = code
        super().__init__(f"{code}: {message}" if message else code)


_BY_CODE: dict[str, type[ProvtraceError]] = {
    cls.code: cls
    for cls in (
        MalformedId,
        BadFlow,
        UnknownResource,
        StaleGrant,
        PeerUnreachable,
        ReservationTimeout,
        MiddlewareUnavailable,
    )
}


def from_code(code: str, message: str = "") -> ProvtraceError:
    cls = _BY_CODE.get(code)
    if cls is None:
        return ProtocolError(code, message)
    return cls(message)
