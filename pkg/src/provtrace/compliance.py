"""Pluggable policy enforcers consulted between reservation and execution."""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Protocol

from provtrace.ids import Kind, Label, NodeId, ResourceId

logger = logging.getLogger(__name__)

LOCAL_CONFIDENTIALITY = "local_confidentiality"
LOCAL_INTEGRITY = "local_integrity"


@dataclass(frozen=True)
class FlowContext:
    source_label: Label
    destination_label: Label
    destination_is_external: bool
    source_is_external_origin: bool


@dataclass(frozen=True)
class Verdict:
    """``policy`` is None for Allow, else the name of the first violated policy."""

    policy: str | None = None

    @property
    def allowed(self) -> bool:
        return self.policy is None

    @classmethod
    def deny(cls, policy: str) -> Verdict:
        return cls(policy)

    def __str__(self) -> str:
        return "Allow" if self.allowed else f"Deny({self.policy})"


ALLOW = Verdict()


class Enforcer(Protocol):
    name: str

    def evaluate(self, ctx: FlowContext) -> Verdict: ...


@dataclass(frozen=True)
class FunctionEnforcer:
    """Adapts a plain predicate ``ctx -> bool`` (True meaning *violation*)."""

    name: str
    violates: Callable[[FlowContext], bool]

    def evaluate(self, ctx: FlowContext) -> Verdict:
        return Verdict.deny(self.name) if self.violates(ctx) else ALLOW


def _confidential(label: Label) -> bool:
    return label.flags.confidentiality or any(s.flags.confidentiality for s in label.provenance)


def local_confidentiality(ctx: FlowContext) -> Verdict:
    """Keep confidentiality-tainted data on the local node."""
    if ctx.destination_is_external and _confidential(ctx.source_label):
        return Verdict.deny(LOCAL_CONFIDENTIALITY)
    return ALLOW


def local_integrity(ctx: FlowContext) -> Verdict:
    """Refuse writes into integrity-flagged resources from data of remote origin."""
    if ctx.destination_label.flags.integrity and ctx.source_is_external_origin:
        return Verdict.deny(LOCAL_INTEGRITY)
    return ALLOW


class _Builtin:
    def __init__(self, name: str, fn: Callable[[FlowContext], Verdict]) -> None:
        self.name = name
        self._fn = fn

    def evaluate(self, ctx: FlowContext) -> Verdict:
        return self._fn(ctx)

    def __repr__(self) -> str:
        return f"<enforcer {self.name}>"


LOCAL_CONFIDENTIALITY_ENFORCER: Enforcer = _Builtin(LOCAL_CONFIDENTIALITY, local_confidentiality)
LOCAL_INTEGRITY_ENFORCER: Enforcer = _Builtin(LOCAL_INTEGRITY, local_integrity)


def default_chain() -> list[Enforcer]:
    return [LOCAL_CONFIDENTIALITY_ENFORCER, LOCAL_INTEGRITY_ENFORCER]


def check(ctx: FlowContext, chain: Iterable[Enforcer]) -> Verdict:
    """Evaluate ``chain`` in order and stop at the first denial.

    An enforcer that raises counts as a denial under its own name.
    """
    for enforcer in chain:
        try:
            verdict = enforcer.evaluate(ctx)
        except Exception:
            logger.exception("enforcer %s failed; denying", enforcer.name)
            return Verdict.deny(enforcer.name)
        if not isinstance(verdict, Verdict):
            logger.error("enforcer %s returned %r; denying", enforcer.name, verdict)
            return Verdict.deny(enforcer.name)
        if not verdict.allowed:
            return verdict
    return ALLOW


class ComplianceEngine:
    """Holds the enforcer chain of one middleware and the notion of "external".

    ``is_remote_stream`` answers whether a stream id's peer belongs to another
    middleware; the engine passes its peer-registry lookup here.
    """

    def __init__(
        self,
        node: NodeId,
        is_remote_stream: Callable[[ResourceId], bool] = lambda rid: False,
        chain: Iterable[Enforcer] | None = None,
    ) -> None:
        self.node = node
        self.is_remote_stream = is_remote_stream
        self._chain = list(default_chain() if chain is None else chain)
        if not self._chain:
            raise ValueError("enforcer chain must not be empty")
        self._lock = threading.Lock()

    @property
    def chain(self) -> list[Enforcer]:
        with self._lock:
            return list(self._chain)

    def register_enforcer(self, enforcer: Enforcer) -> None:
        with self._lock:
            if any(e.name == enforcer.name for e in self._chain):
                raise ValueError(f"enforcer {enforcer.name!r} already registered")
            self._chain = [*self._chain, enforcer]

    def is_external(self, rid: ResourceId) -> bool:
        if rid.node != self.node:
            return True
        return rid.kind is Kind.STREAM and self.is_remote_stream(rid)

    def context(self, source: Label, destination: Label) -> FlowContext:
        return FlowContext(
            source_label=source,
            destination_label=destination,
            destination_is_external=destination.id.kind is Kind.STREAM
            and self.is_external(destination.id),
            source_is_external_origin=self.is_external(source.id)
            or any(self.is_external(s.id) for s in source.provenance),
        )

    def evaluate(self, source: Label, destination: Label) -> Verdict:
        return check(self.context(source, destination), self.chain)
