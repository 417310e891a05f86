"""Decentralized data traceability: per-node middleware, provenance-based policies, I/O shim."""

from provtrace.compliance import (
    LOCAL_CONFIDENTIALITY,
    LOCAL_INTEGRITY,
    ComplianceEngine,
    FlowContext,
    FunctionEnforcer,
    Verdict,
    check,
    local_confidentiality,
    local_integrity,
)
from provtrace.daemon import Middleware
from provtrace.engine import EngineConfig, ProvenanceEngine
from provtrace.errors import (
    BadFlow,
    FlowDenied,
    MalformedId,
    MiddlewareUnavailable,
    PeerUnreachable,
    ProvtraceError,
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
    ResourceId,
    format_resource_id,
    merge_flags,
    parse_resource_id,
)
from provtrace.tracer import Tracer

__version__ = "0.1.0"
