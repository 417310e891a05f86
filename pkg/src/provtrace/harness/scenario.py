"""Scripted multi-node scenarios over loopback.

Every node gets its own middleware bound to a distinct loopback address
(127.0.0.x), so cross-node streams are real TCP connections between
different source IPs and peer resolution works by IP. A script is one
action per line; ``#`` starts a comment::

    node server ip=127.0.0.2
    node client ip=127.0.0.3
    process web node=server
    process browser node=client
    file secret node=server path=secret.html content="top secret" flags=confidentiality
    listen web lst
    connect browser lst conn
    send browser conn data="GET /secret.html"
    recv web conn
    read web secret
    send web conn data="..." expect=deny:local_confidentiality
    close web conn
    recv browser conn expect=empty
    provenance web contains browser secret

Outcomes accepted by ``expect=``: ``allow`` (default), ``deny:<policy>``,
``empty`` (allowed, zero bytes), ``error``. ``recv`` also takes ``data=`` to
check the bytes received. A stream end is referred to as ``<conn>@<process>``
in ``provenance`` lines.
"""

from __future__ import annotations

import contextlib
import io as _stdio
import logging
import shlex
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

from provtrace import io as tio
from provtrace import socket as tsock
from provtrace.daemon import Middleware
from provtrace.engine import EngineConfig
from provtrace.errors import FlowDenied, ProvtraceError
from provtrace.ids import ComplianceFlags, ResourceId
from provtrace.p2m import P2MClient
from provtrace.tracer import Tracer
from provtrace.wire import WireLog

logger = logging.getLogger(__name__)

RECV_TIMEOUT = 2.0


class ScenarioError(Exception):
    """Malformed script or infrastructure failure (as opposed to a failed expectation)."""


@dataclass
class Action:
    lineno: int
    verb: str
    args: list[str]
    opts: dict[str, str]

    def __str__(self) -> str:
        return f"line {self.lineno}: {self.verb} {' '.join(self.args)}"


@dataclass
class NodeSpec:
    name: str
    ip: str
    timeout: float = 5.0


@dataclass
class ScenarioSpec:
    nodes: dict[str, NodeSpec] = field(default_factory=dict)
    actions: list[Action] = field(default_factory=list)


def parse_scenario(text: str) -> ScenarioSpec:
    spec = ScenarioSpec()
    for lineno, raw in enumerate(text.splitlines(), 1):
        try:
            words = shlex.split(raw, comments=True)
        except ValueError as exc:
            raise ScenarioError(f"line {lineno}: {exc}") from None
        if not words:
            continue
        args, opts = [], {}
        for w in words[1:]:
            key, eq, value = w.partition("=")
            if eq and key.isidentifier():
                opts[key] = value
            else:
                args.append(w)
        action = Action(lineno, words[0], args, opts)
        if action.verb == "node":
            if len(args) != 1 or "ip" not in opts:
                raise ScenarioError(f"{action}: expected 'node <name> ip=<addr>'")
            spec.nodes[args[0]] = NodeSpec(args[0], opts["ip"], float(opts.get("timeout", 5.0)))
        else:
            spec.actions.append(action)
    return spec


@dataclass
class StepResult:
    action: Action
    ok: bool
    observed: str
    expected: str

    def __str__(self) -> str:
        mark = "ok  " if self.ok else "FAIL"
        return f"{mark} {self.action} -> {self.observed} (expected {self.expected})"


@dataclass
class ScenarioReport:
    steps: list[StepResult] = field(default_factory=list)
    dumps: dict[str, str] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(s.ok for s in self.steps)

    def render(self) -> str:
        lines = [str(s) for s in self.steps]
        lines.append("PASS" if self.passed else "FAIL")
        return "\n".join(lines)


class _Process:
    def __init__(self, name: str, node: str, rid: ResourceId, tracer: Tracer) -> None:
        self.name = name
        self.node = node
        self.id = rid
        self.tracer = tracer


class ScenarioRunner:
    def __init__(self, spec: ScenarioSpec, workdir: Path) -> None:
        self.spec = spec
        self.workdir = workdir
        self.wire_log = WireLog()
        self.middlewares: dict[str, Middleware] = {}
        self.clients: dict[str, P2MClient] = {}
        self.processes: dict[str, _Process] = {}
        self.files: dict[str, tuple[str, Path]] = {}
        self.listeners: dict[str, tuple[_Process, tsock.TracedSocket]] = {}
        self.ends: dict[tuple[str, str], tsock.TracedSocket] = {}
        self._next_pid = 4000

    # -- infrastructure ------------------------------------------------------

    def start(self) -> None:
        for n in self.spec.nodes.values():
            cfg = EngineConfig(n.name, n.timeout)
            try:
                mw = Middleware(cfg, (n.ip, 0), (n.ip, 0), wire_log=self.wire_log).start()
            except OSError as exc:
                raise ScenarioError(f"cannot start middleware {n.name} on {n.ip}: {exc}") from exc
            self.middlewares[n.name] = mw
            self.clients[n.name] = P2MClient(mw.p2m_address)
        for n in self.spec.nodes.values():
            for other in self.spec.nodes.values():
                if other.name != n.name:
                    reg = self.middlewares[n.name].engine.config.peer_registry
                    reg[other.ip] = self.middlewares[other.name].m2m_address

    def stop(self) -> None:
        for ts in list(self.ends.values()) + [s for _, s in self.listeners.values()]:
            with contextlib.suppress(OSError):
                ts.close()
        for p in self.processes.values():
            p.tracer.close()
        for c in self.clients.values():
            c.close()
        for mw in self.middlewares.values():
            mw.stop()

    def _node(self, name: str, action: Action) -> NodeSpec:
        try:
            return self.spec.nodes[name]
        except KeyError:
            raise ScenarioError(f"{action}: unknown node {name!r}") from None

    def _proc(self, name: str, action: Action) -> _Process:
        try:
            return self.processes[name]
        except KeyError:
            raise ScenarioError(f"{action}: unknown process {name!r}") from None

    def resolve(self, ref: str, action: Action) -> tuple[str, ResourceId]:
        """(node, id) of a process, file or ``conn@process`` reference."""
        if ref in self.processes:
            p = self.processes[ref]
            return p.node, p.id
        if ref in self.files:
            node, path = self.files[ref]
            return node, ResourceId.file(node, str(path))
        conn, at, owner = ref.partition("@")
        if at and (conn, owner) in self.ends:
            return self.processes[owner].node, self.ends[(conn, owner)].id
        raise ScenarioError(f"{action}: unknown resource {ref!r}")

    def name_of(self, rid: ResourceId) -> str:
        for name, p in self.processes.items():
            if p.id == rid:
                return name
        for name, (node, path) in self.files.items():
            if node == rid.node and rid.path == str(path):
                return name
        for (conn, owner), ts in self.ends.items():
            if ts.id == rid:
                return f"{conn}@{owner}"
        return rid.uri

    # -- actions -------------------------------------------------------------

    def run(self) -> ScenarioReport:
        report = ScenarioReport()
        for action in self.spec.actions:
            handler = getattr(self, "do_" + action.verb.replace("-", "_"), None)
            if handler is None:
                raise ScenarioError(f"{action}: unknown action {action.verb!r}")
            step = handler(action)
            if step is not None:
                report.steps.append(step)
                logger.info("%s", step)
        for node in self.spec.nodes:
            report.dumps[node] = self.named_dump(node)
        return report

    def named_dump(self, node: str) -> str:
        engine = self.middlewares[node].engine
        lines = []
        for rid in engine.resources():
            prov = sorted(s.id for s in engine.get_provenance(rid))
            lines.append(f"{self.name_of(rid)} <- [{' '.join(self.name_of(p) for p in prov)}]")
        return "\n".join(lines)

    def do_process(self, a: Action) -> None:
        node = self._node(a.opts.get("node", ""), a)
        mw = self.middlewares[node.name]
        self._next_pid += 1
        rid = ResourceId.process(node.name, self._next_pid, 0)
        tracer = Tracer(mw.p2m_address, node=node.name, process=rid, timeout=node.timeout + 5)
        self.processes[a.args[0]] = _Process(a.args[0], node.name, rid, tracer)

    def do_file(self, a: Action) -> None:
        node = self._node(a.opts.get("node", ""), a)
        rel = a.opts.get("path", a.args[0])
        path = (self.workdir / node.name / rel).resolve()
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(a.opts.get("content", "").encode())
        self.files[a.args[0]] = (node.name, path)
        flags = {f: True for f in a.opts.get("flags", "").split(",") if f}
        try:
            self.clients[node.name].enroll(ResourceId.file(node.name, str(path)), ComplianceFlags.from_dict(flags))
        except ValueError as exc:
            raise ScenarioError(f"{a}: {exc}") from exc

    def do_policy(self, a: Action) -> None:
        node, rid = self.resolve(a.args[0], a)
        flags = {f: True for f in a.args[1:]}
        self.clients[node].set_policy(rid, ComplianceFlags.from_dict(flags))

    def do_listen(self, a: Action) -> None:
        proc = self._proc(a.args[0], a)
        ip = self.spec.nodes[proc.node].ip
        self.listeners[a.args[1]] = (proc, tsock.create_server((ip, 0), tracer=proc.tracer))

    def do_connect(self, a: Action) -> None:
        client = self._proc(a.args[0], a)
        try:
            server, lst = self.listeners[a.args[1]]
        except KeyError:
            raise ScenarioError(f"{a}: unknown listener {a.args[1]!r}") from None
        ip = self.spec.nodes[client.node].ip
        conn = a.args[2]
        c = tsock.create_connection(lst.getsockname(), source_address=(ip, 0), tracer=client.tracer)
        s, _ = lst.accept()
        c.settimeout(RECV_TIMEOUT)
        s.settimeout(RECV_TIMEOUT)
        self.ends[(conn, client.name)] = c
        self.ends[(conn, server.name)] = s

    def _end(self, a: Action) -> tuple[_Process, tsock.TracedSocket]:
        proc = self._proc(a.args[0], a)
        try:
            return proc, self.ends[(a.args[1], proc.name)]
        except KeyError:
            raise ScenarioError(f"{a}: {proc.name} has no end of {a.args[1]!r}") from None

    def _outcome(self, a: Action, fn) -> StepResult:
        expected = a.opts.get("expect", "allow")
        want_data = a.opts.get("data") if a.verb == "recv" else None
        try:
            result = fn()
        except FlowDenied as exc:
            observed = f"deny:{exc.policy}"
        except ProvtraceError as exc:
            if exc.code in ("MIDDLEWARE_UNAVAILABLE", "BAD_REQUEST", "INTERNAL"):
                raise ScenarioError(f"{a}: infrastructure failure: {exc}") from exc
            observed = f"error:{exc.code}"
        except OSError as exc:
            observed = f"error:{type(exc).__name__}"
        else:
            observed = "empty" if result in (b"", 0) and a.verb == "recv" else "allow"
            if want_data is not None and observed == "allow" and result != want_data.encode():
                return StepResult(a, False, f"allow data={result!r}", f"data={want_data!r}")
        ok = observed == expected or (expected == "error" and observed.startswith("error"))
        return StepResult(a, ok, observed, expected)

    def do_read(self, a: Action) -> StepResult:
        proc = self._proc(a.args[0], a)
        node, rid = self.resolve(a.args[1], a)
        if rid.kind.name != "FILE":
            raise ScenarioError(f"{a}: read takes a file; use recv for streams")

        def op():
            with tio.open(rid.path, "rb", tracer=proc.tracer) as f:
                return f.read()

        return self._outcome(a, op)

    def do_write(self, a: Action) -> StepResult:
        proc = self._proc(a.args[0], a)
        node, rid = self.resolve(a.args[1], a)
        data = a.opts.get("data", "").encode()

        def op():
            with tio.open(rid.path, "ab", tracer=proc.tracer) as f:
                return f.write(data)

        return self._outcome(a, op)

    def do_send(self, a: Action) -> StepResult:
        _, end = self._end(a)
        data = a.opts.get("data", "").encode()
        return self._outcome(a, lambda: end.sendall(data))

    def do_recv(self, a: Action) -> StepResult:
        _, end = self._end(a)
        return self._outcome(a, lambda: end.recv(65536))

    def do_close(self, a: Action) -> None:
        _, end = self._end(a)
        end.shutdown(tsock.SHUT_WR)

    def do_provenance(self, a: Action) -> StepResult:
        if len(a.args) < 2 or a.args[1] not in ("contains", "equals", "excludes"):
            raise ScenarioError(f"{a}: expected 'provenance <res> contains|equals|excludes <res>...'")
        node, rid = self.resolve(a.args[0], a)
        got = {s.id for s in self.clients[node].provenance(rid)}
        refs = {self.resolve(r, a)[1] for r in a.args[2:]}
        mode = a.args[1]
        if mode == "contains":
            ok = refs <= got
        elif mode == "equals":
            ok = refs == got
        else:
            ok = not (refs & got)
        observed = "{" + ", ".join(sorted(self.name_of(r) for r in got)) + "}"
        expected = f"{mode} {{{', '.join(sorted(self.name_of(r) for r in refs))}}}"
        return StepResult(a, ok, observed, expected)


def run_scenario(spec: ScenarioSpec | str, workdir: str | Path | None = None) -> ScenarioReport:
    if isinstance(spec, str):
        spec = parse_scenario(spec)
    with contextlib.ExitStack() as stack:
        if workdir is None:
            workdir = stack.enter_context(tempfile.TemporaryDirectory(prefix="provtrace-"))
        runner = ScenarioRunner(spec, Path(workdir))
        stack.callback(runner.stop)
        runner.start()
        return runner.run()


def load_scenario(path: str | Path) -> ScenarioSpec:
    return parse_scenario(Path(path).read_text())


def bundled_scenario(name: str) -> str:
    from importlib import resources

    return resources.files("provtrace.scenarios").joinpath(f"{name}.scn").read_text()


def capture_report(report: ScenarioReport) -> str:
    out = _stdio.StringIO()
    out.write(report.render() + "\n")
    for node, dump in sorted(report.dumps.items()):
        out.write(f"[{node}]\n{dump}\n")
    return out.getvalue()
