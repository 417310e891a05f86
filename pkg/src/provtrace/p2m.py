"""Process-to-middleware protocol: server-side handlers and the shim's client.

Messages (``params`` -> ``result``)::

    Hello            {}                              -> {node}
    Enroll           {id, flags?}                    -> Ack {}
    IoRequest        {source, destination}           -> Grant {status, grant_id? | policy?}
    IoReport         {grant_id, outcome}             -> Ack {}
    SetPolicy        {id, flags}                     -> Ack {}
    ProvenanceQuery  {id}                            -> Provenance {provenance: [{id, flags}]}
    Dump             {}                              -> Dump {text}
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Any, Iterable

from provtrace.engine import ProvenanceEngine
from provtrace.errors import FlowDenied, ReservationTimeout
from provtrace.ids import (
    ComplianceFlags,
    Flow,
    GrantId,
    LabelSummary,
    ResourceId,
    parse_resource_id,
)
from provtrace.wire import BadRequest, Handler, RpcClient, require

DEFAULT_P2M_PORT = 50051


class GrantStatus(str, enum.Enum):
    GRANTED = "Granted"
    DENIED = "Denied"
    TIMED_OUT = "TimedOut"


class Outcome(str, enum.Enum):
    SUCCESS = "Success"
    FAILURE = "Failure"


@dataclass(frozen=True)
class GrantMsg:
    status: GrantStatus
    grant_id: str | None = None
    policy: str | None = None

    def __post_init__(self) -> None:
        if (self.grant_id is not None) != (self.status is GrantStatus.GRANTED):
            raise ValueError("grant_id must be present iff status is Granted")
        if (self.policy is not None) != (self.status is GrantStatus.DENIED):
            raise ValueError("policy must be present iff status is Denied")

    def to_dict(self) -> dict[str, str]:
        out = {"status": self.status.value}
        if self.grant_id is not None:
            out["grant_id"] = self.grant_id
        if self.policy is not None:
            out["policy"] = self.policy
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> GrantMsg:
        return cls(GrantStatus(data["status"]), data.get("grant_id"), data.get("policy"))


def _flags(params: dict[str, Any], required: bool = False) -> ComplianceFlags:
    if required:
        raw = require(params, "flags", dict)
    else:
        raw = params.get("flags")
        if raw is not None and not isinstance(raw, dict):
            raise BadRequest("field 'flags' must be dict")
    try:
        return ComplianceFlags.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise BadRequest(str(exc)) from None


def _id(params: dict[str, Any], name: str = "id") -> ResourceId:
    return parse_resource_id(require(params, name))


def summaries_to_wire(summaries: Iterable[LabelSummary]) -> list[dict[str, Any]]:
    return [
        {"id": s.id.uri, "flags": s.flags.to_dict()}
        for s in sorted(summaries, key=lambda s: s.id)
    ]


def summaries_from_wire(items: Any) -> list[LabelSummary]:
    if not isinstance(items, list):
        raise BadRequest("provenance must be a list")
    out: dict[ResourceId, LabelSummary] = {}
    for item in items:
        if not isinstance(item, dict):
            raise BadRequest("provenance entries must be objects")
        rid = _id(item)
        if rid in out:
            raise BadRequest(f"provenance lists {rid} twice")
        out[rid] = LabelSummary(rid, _flags(item))
    return list(out.values())


class P2MService:
    def __init__(self, engine: ProvenanceEngine) -> None:
        self.engine = engine

    @property
    def handlers(self) -> dict[str, Handler]:
        return {
            "Hello": self.handle_hello,
            "Enroll": self.handle_enroll,
            "IoRequest": self.handle_io_request,
            "IoReport": self.handle_io_report,
            "SetPolicy": self.handle_set_policy,
            "ProvenanceQuery": self.handle_provenance_query,
            "Dump": self.handle_dump,
        }

    def handle_hello(self, params):
        return "Hello", {"node": self.engine.node}

    def handle_enroll(self, params):
        self.engine.enroll(_id(params), _flags(params))
        return "Ack", {}

    def handle_io_request(self, params):
        flow = Flow(_id(params, "source"), _id(params, "destination"))
        try:
            grant = self.engine.request_flow(flow)
        except FlowDenied as exc:
            msg = GrantMsg(GrantStatus.DENIED, policy=exc.policy)
        except ReservationTimeout:
            msg = GrantMsg(GrantStatus.TIMED_OUT)
        else:
            msg = GrantMsg(GrantStatus.GRANTED, grant_id=str(grant.grant_id))
        return "Grant", msg.to_dict()

    def handle_io_report(self, params):
        gid = GrantId.parse(require(params, "grant_id"))
        try:
            outcome = Outcome(require(params, "outcome"))
        except ValueError:
            raise BadRequest("outcome must be Success or Failure") from None
        self.engine.report_flow(gid, outcome is Outcome.SUCCESS)
        return "Ack", {}

    def handle_set_policy(self, params):
        self.engine.set_policy(_id(params), _flags(params, required=True))
        return "Ack", {}

    def handle_provenance_query(self, params):
        return "Provenance", {"provenance": summaries_to_wire(self.engine.get_provenance(_id(params)))}

    def handle_dump(self, params):
        return "Dump", {"text": self.engine.dump()}


class P2MClient(RpcClient):
    """Typed wrapper over the P2M messages."""

    def __init__(self, address, **kwargs) -> None:
        kwargs.setdefault("channel", "p2m")
        super().__init__(address, **kwargs)

    def hello(self) -> str:
        return self.call("Hello")[1]["node"]

    def enroll(self, rid: ResourceId, flags: ComplianceFlags = ComplianceFlags()) -> None:
        self.call("Enroll", {"id": rid.uri, "flags": flags.to_dict()})

    def io_request(self, source: ResourceId, destination: ResourceId) -> GrantMsg:
        _, result = self.call("IoRequest", {"source": source.uri, "destination": destination.uri})
        return GrantMsg.from_dict(result)

    def io_report(self, grant_id: str, success: bool) -> None:
        outcome = Outcome.SUCCESS if success else Outcome.FAILURE
        self.call("IoReport", {"grant_id": grant_id, "outcome": outcome.value})

    def set_policy(self, rid: ResourceId, flags: ComplianceFlags) -> None:
        self.call("SetPolicy", {"id": rid.uri, "flags": flags.to_dict()})

    def provenance(self, rid: ResourceId) -> list[LabelSummary]:
        _, result = self.call("ProvenanceQuery", {"id": rid.uri})
        return summaries_from_wire(result["provenance"])

    def dump(self) -> str:
        return self.call("Dump")[1]["text"]
