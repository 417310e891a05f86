"""Resource identity, compliance flags, labels and flows.

Identifiers are rendered in a URI-like form::

    process://<node>/<pid>@<start_time>
    file://<node><absolute path>
    stream://<node>/<local ip:port>-<peer ip:port>

The canonical string is also what every protocol message, log line and dump
uses, so :func:`format_resource_id` and :func:`parse_resource_id` must stay
exact inverses.
"""

from __future__ import annotations

import dataclasses
import enum
import ipaddress
import posixpath
import re
from dataclasses import dataclass, field
from functools import cached_property, total_ordering
from typing import Iterable, Mapping, NamedTuple

from provtrace.errors import BadFlow, MalformedId

NodeId = str
Socket = tuple[str, int]

_WS = re.compile(r"\s")


def check_node_id(node: str) -> str:
    if not isinstance(node, str) or not node:
        raise MalformedId("node id must be a non-empty string")
    if "/" in node or _WS.search(node):
        raise MalformedId(f"node id {node!r} contains '/' or whitespace")
    return node


class Kind(enum.IntEnum):
    # Value order is the reservation order.
    PROCESS = 0
    FILE = 1
    STREAM = 2

    @property
    def scheme(self) -> str:
        return self.name.lower()


_SCHEMES = {k.scheme: k for k in Kind}


def _check_socket(sock: Socket, what: str) -> Socket:
    try:
        host, port = sock
        ip = ipaddress.ip_address(host)
    except (TypeError, ValueError) as exc:
        raise MalformedId(f"{what} socket {sock!r} is not an (ip, port) pair") from exc
    if not isinstance(port, int) or isinstance(port, bool) or not 0 <= port <= 65535:
        raise MalformedId(f"{what} socket port {port!r} out of range")
    return (str(ip), port)


def format_socket(sock: Socket) -> str:
    host, port = sock
    if ":" in host:
        return f"[{host}]:{port}"
    return f"{host}:{port}"


def parse_socket(text: str, what: str = "socket") -> Socket:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise MalformedId(f"{what} {text!r} is not ip:port")
    if host.startswith("[") and host.endswith("]"):
        host = host[1:-1]
    elif ":" in host:
        raise MalformedId(f"{what} {text!r}: IPv6 hosts must be bracketed")
    return _check_socket((host, int(port)), what)


def _normalize_path(path: str) -> str:
    if not isinstance(path, str) or not path.startswith("/"):
        raise MalformedId(f"file path {path!r} is not absolute")
    if "\x00" in path:
        raise MalformedId("file path contains NUL")
    norm = posixpath.normpath(path)
    if norm.startswith("//"):
        norm = "/" + norm.lstrip("/")
    return norm


@total_ordering
@dataclass(frozen=True, eq=True)
class ResourceId:
    """Globally unique name of a process, file or TCP stream.

    Build instances through :meth:`process`, :meth:`file` or :meth:`stream`.
    Ids sort by kind first (processes, then files, then streams) and then by
    canonical string; that order is the order in which reservations are taken.
    """

    node: NodeId
    kind: Kind
    pid: int | None = None
    start_time: int | None = None
    path: str | None = None
    local: Socket | None = None
    peer: Socket | None = None

    def __post_init__(self) -> None:
        check_node_id(self.node)
        if self.kind is Kind.PROCESS:
            for name in ("pid", "start_time"):
                v = getattr(self, name)
                if not isinstance(v, int) or isinstance(v, bool) or v < 0:
                    raise MalformedId(f"process {name} must be a non-negative integer, got {v!r}")
        elif self.kind is Kind.FILE:
            object.__setattr__(self, "path", _normalize_path(self.path))
        elif self.kind is Kind.STREAM:
            object.__setattr__(self, "local", _check_socket(self.local, "local"))
            object.__setattr__(self, "peer", _check_socket(self.peer, "peer"))
        else:
            raise MalformedId(f"unknown resource kind {self.kind!r}")

    @classmethod
    def process(cls, node: NodeId, pid: int, start_time: int) -> ResourceId:
        return cls(node, Kind.PROCESS, pid=pid, start_time=start_time)

    @classmethod
    def file(cls, node: NodeId, path: str) -> ResourceId:
        return cls(node, Kind.FILE, path=path)

    @classmethod
    def stream(cls, node: NodeId, local: Socket, peer: Socket) -> ResourceId:
        return cls(node, Kind.STREAM, local=tuple(local), peer=tuple(peer))

    @cached_property
    def uri(self) -> str:
        return format_resource_id(self)

    @property
    def sort_key(self) -> tuple[int, str]:
        return (int(self.kind), self.uri)

    def __lt__(self, other: object) -> bool:
        if not isinstance(other, ResourceId):
            return NotImplemented
        return self.sort_key < other.sort_key

    def __str__(self) -> str:
        return self.uri

    def __repr__(self) -> str:
        return f"ResourceId({self.uri!r})"

    def mirrored(self, node: NodeId) -> ResourceId:
        """The same TCP connection as named by the middleware on the other end."""
        if self.kind is not Kind.STREAM:
            raise MalformedId(f"{self.uri} is not a stream")
        return ResourceId.stream(node, self.peer, self.local)


def format_resource_id(rid: ResourceId) -> str:
    scheme = rid.kind.scheme
    if rid.kind is Kind.PROCESS:
        return f"{scheme}://{rid.node}/{rid.pid}@{rid.start_time}"
    if rid.kind is Kind.FILE:
        return f"{scheme}://{rid.node}{rid.path}"
    return f"{scheme}://{rid.node}/{format_socket(rid.local)}-{format_socket(rid.peer)}"


def parse_resource_id(text: str) -> ResourceId:
    if not isinstance(text, str):
        raise MalformedId(f"resource id must be a string, got {type(text).__name__}")
    scheme, sep, rest = text.partition("://")
    if not sep:
        raise MalformedId(f"{text!r}: missing scheme separator '://'")
    kind = _SCHEMES.get(scheme)
    if kind is None:
        raise MalformedId(f"{text!r}: unknown scheme {scheme!r}")
    node, slash, detail = rest.partition("/")
    if not slash:
        raise MalformedId(f"{text!r}: missing '/' after node")
    check_node_id(node)

    if kind is Kind.PROCESS:
        pid, at, start = detail.partition("@")
        if not at or not pid.isdigit() or not start.isdigit():
            raise MalformedId(f"{text!r}: process detail must be <pid>@<start_time>")
        if str(int(pid)) != pid or str(int(start)) != start:
            raise MalformedId(f"{text!r}: process numbers must not carry leading zeros")
        return ResourceId.process(node, int(pid), int(start))

    if kind is Kind.FILE:
        path = "/" + detail
        if not detail or _normalize_path(path) != path:
            raise MalformedId(f"{text!r}: file path must be absolute and normalized")
        return ResourceId.file(node, path)

    local, dash, peer = detail.partition("-")
    if not dash:
        raise MalformedId(f"{text!r}: stream detail must be <local>-<peer>")
    rid = ResourceId.stream(node, parse_socket(local, "local"), parse_socket(peer, "peer"))
    if rid.uri != text:
        raise MalformedId(f"{text!r}: stream sockets not in canonical form")
    return rid


@dataclass(frozen=True)
class ComplianceFlags:
    """One boolean per supported policy; a set flag arms that policy for the resource."""

    confidentiality: bool = False
    integrity: bool = False

    def __or__(self, other: ComplianceFlags) -> ComplianceFlags:
        return merge_flags(self, other)

    def any(self) -> bool:
        return any(dataclasses.astuple(self))

    def to_dict(self) -> dict[str, bool]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, object] | None) -> ComplianceFlags:
        if not data:
            return cls()
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown compliance flags: {sorted(unknown)}")
        for k, v in data.items():
            if not isinstance(v, bool):
                raise ValueError(f"flag {k!r} must be a boolean")
        return cls(**data)

    def __str__(self) -> str:
        on = [f.name for f in dataclasses.fields(self) if getattr(self, f.name)]
        return "{" + ",".join(on) + "}"


def merge_flags(a: ComplianceFlags, b: ComplianceFlags) -> ComplianceFlags:
    return ComplianceFlags(
        **{f.name: getattr(a, f.name) or getattr(b, f.name) for f in dataclasses.fields(a)}
    )


@dataclass(frozen=True)
class LabelSummary:
    id: ResourceId
    flags: ComplianceFlags = ComplianceFlags()


def merge_provenance(
    into: dict[ResourceId, ComplianceFlags], summaries: Iterable[LabelSummary]
) -> None:
    """Add ``summaries`` to an id-keyed provenance map, OR-ing flags on duplicates."""
    for s in summaries:
        prev = into.get(s.id)
        into[s.id] = s.flags if prev is None else merge_flags(prev, s.flags)


def provenance_set(mapping: Mapping[ResourceId, ComplianceFlags]) -> frozenset[LabelSummary]:
    return frozenset(LabelSummary(i, f) for i, f in mapping.items())


@dataclass(frozen=True)
class Label:
    id: ResourceId
    flags: ComplianceFlags = ComplianceFlags()
    provenance: frozenset[LabelSummary] = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        ids = [s.id for s in self.provenance]
        if len(ids) != len(set(ids)):
            raise ValueError("provenance holds two summaries with the same id")
        if self.id in ids:
            raise ValueError(f"{self.id} appears in its own provenance")

    @property
    def summary(self) -> LabelSummary:
        return LabelSummary(self.id, self.flags)

    @property
    def provenance_ids(self) -> frozenset[ResourceId]:
        return frozenset(s.id for s in self.provenance)


@dataclass(frozen=True)
class Flow:
    """A process-mediated transfer: file or stream to process, or the reverse."""

    source: ResourceId
    destination: ResourceId

    def __post_init__(self) -> None:
        if self.source == self.destination:
            raise BadFlow(f"flow source and destination are both {self.source}")
        procs = (self.source.kind is Kind.PROCESS) + (self.destination.kind is Kind.PROCESS)
        if procs != 1:
            raise BadFlow(
                f"exactly one endpoint must be a process: {self.source} -> {self.destination}"
            )

    @property
    def process(self) -> ResourceId:
        return self.source if self.source.kind is Kind.PROCESS else self.destination

    @property
    def resource(self) -> ResourceId:
        return self.destination if self.source.kind is Kind.PROCESS else self.source

    def __str__(self) -> str:
        return f"{self.source} -> {self.destination}"


class GrantId(NamedTuple):
    node: NodeId
    seq: int

    def __str__(self) -> str:
        return f"{self.node}#{self.seq}"

    @classmethod
    def parse(cls, text: str) -> GrantId:
        node, sep, seq = str(text).rpartition("#")
        if not sep or not seq.isdigit():
            raise MalformedId(f"grant id {text!r} is not <node>#<seq>")
        return cls(check_node_id(node), int(seq))


@dataclass(frozen=True)
class Grant:
    grant_id: GrantId
    flow: Flow
    issued_at: float
