"""Reference models of provenance, independent of the engine.

Two formulations that must agree with each other and with the middleware:

* :class:`AccumulationOracle` replays flows one by one with plain sets.
* :func:`closure_provenance` walks the flow log backwards: ``y`` is in the
  provenance of ``x`` iff a time-ordered chain of flows leads from ``y`` to ``x``.
"""

from __future__ import annotations

from collections import defaultdict
from typing import Hashable, Iterable, Sequence

FlowPair = tuple[Hashable, Hashable]


class AccumulationOracle:
    def __init__(self) -> None:
        self.state: dict[Hashable, frozenset] = defaultdict(frozenset)

    def apply(self, source: Hashable, destination: Hashable) -> None:
        new = self.state[destination] | self.state[source] | {source}
        self.state[destination] = new - {destination}

    def replay(self, flows: Iterable[FlowPair]) -> AccumulationOracle:
        for src, dst in flows:
            self.apply(src, dst)
        return self

    def provenance(self, rid: Hashable) -> frozenset:
        return self.state.get(rid, frozenset())


def closure_provenance(flows: Sequence[FlowPair], target: Hashable) -> frozenset:
    reach = {target}
    for src, dst in reversed(flows):
        if dst in reach:
            reach.add(src)
    reach.discard(target)
    return frozenset(reach)
