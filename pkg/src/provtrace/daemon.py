"""One middleware instance: engine plus its P2M and M2M listeners."""

from __future__ import annotations

import logging
from typing import Iterable

from provtrace.compliance import Enforcer
from provtrace.engine import EngineConfig, ProvenanceEngine
from provtrace.m2m import DEFAULT_M2M_PORT, M2MClient, M2MService
from provtrace.p2m import DEFAULT_P2M_PORT, P2MService
from provtrace.wire import RpcServer, WireLog, format_address

logger = logging.getLogger(__name__)


class Middleware:
    def __init__(
        self,
        config: EngineConfig,
        p2m_address: tuple[str, int] = ("127.0.0.1", DEFAULT_P2M_PORT),
        m2m_address: tuple[str, int] = ("127.0.0.1", DEFAULT_M2M_PORT),
        *,
        wire_log: WireLog | None = None,
        enforcers: Iterable[Enforcer] | None = None,
    ) -> None:
        self.wire_log = wire_log if wire_log is not None else WireLog()
        self.m2m_client = M2MClient(config.node, self.wire_log)
        self.engine = ProvenanceEngine(config, self.m2m_client, enforcers)
        self.p2m = RpcServer(
            p2m_address, P2MService(self.engine).handlers,
            node=config.node, channel="p2m", wire_log=self.wire_log,
        )
        self.m2m = RpcServer(
            m2m_address, M2MService(self.engine).handlers,
            node=config.node, channel="m2m", wire_log=self.wire_log,
        )

    @property
    def node(self) -> str:
        return self.engine.node

    @property
    def p2m_address(self) -> str:
        return format_address(self.p2m.address)

    @property
    def m2m_address(self) -> str:
        return format_address(self.m2m.address)

    def start(self) -> Middleware:
        self.p2m.start()
        self.m2m.start()
        logger.info("middleware %s: p2m %s, m2m %s", self.node, self.p2m_address, self.m2m_address)
        return self

    def stop(self) -> None:
        self.p2m.stop()
        self.m2m.stop()
        self.engine.close()

    def __enter__(self) -> Middleware:
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
