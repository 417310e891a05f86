"""Drop-in replacement for the parts of :mod:`io` that move bytes.

``from provtrace import io`` followed by ``io.open(...)`` behaves like the
builtin ``open`` except that every read and write is authorized by, and
reported to, the local middleware. Everything else in :mod:`io` is
re-exported unchanged.
"""

from __future__ import annotations

import io as _io
import os
from io import *  # noqa: F401,F403
from typing import Any

from provtrace.ids import ResourceId
from provtrace.tracer import Tracer, default_tracer

__all__ = [*_io.__all__, "TracedFile"]


class TracedFile:
    """Wraps a file object; data-moving methods are mediated, the rest pass through."""

    def __init__(self, raw: Any, rid: ResourceId | None, tracer: Tracer) -> None:
        self._raw = raw
        self.id = rid
        self.tracer = tracer

    @property
    def traced(self) -> bool:
        return self.id is not None

    @property
    def process_id(self) -> ResourceId:
        return self.tracer.process_id

    def _read(self, name: str, fn, *args):
        if self.id is None:
            return fn(*args)
        return self.tracer.mediate(name, self.id, self.tracer.process_id, lambda: fn(*args))

    def _write(self, name: str, fn, *args):
        if self.id is None:
            return fn(*args)
        return self.tracer.mediate(name, self.tracer.process_id, self.id, lambda: fn(*args))

    def read(self, size: int = -1):
        return self._read("read", self._raw.read, size)

    def read1(self, size: int = -1):
        return self._read("read", self._raw.read1, size)

    def readinto(self, buffer) -> int:
        return self._read("read", self._raw.readinto, buffer)

    def readline(self, size: int = -1):
        return self._read("read", self._raw.readline, size)

    def readlines(self, hint: int = -1):
        return self._read("read", self._raw.readlines, hint)

    def write(self, data) -> int:
        return self._write("write", self._raw.write, data)

    def writelines(self, lines) -> None:
        return self._write("write", self._raw.writelines, list(lines))

    def __iter__(self):
        return self

    def __next__(self):
        line = self.readline()
        if not line:
            raise StopIteration
        return line

    def __enter__(self) -> TracedFile:
        return self

    def __exit__(self, *exc) -> None:
        self._raw.close()

    def __getattr__(self, name: str):
        return getattr(self._raw, name)

    def __repr__(self) -> str:
        return f"<TracedFile {self.id or '(untraced)'} {self._raw!r}>"


def open(file, mode="r", buffering=-1, encoding=None, errors=None, newline=None,
         closefd=True, opener=None, *, tracer: Tracer | None = None) -> TracedFile:
    """Same signature as :func:`builtins.open`; enrolls the file before opening it."""
    tracer = tracer or default_tracer()
    if isinstance(file, int):
        raise TypeError("provtrace.io.open needs a path; file descriptors cannot be identified")
    path = os.path.realpath(os.fsdecode(file))
    # Enrolled before the real open so a 'w' truncation never happens unmediated.
    rid = tracer.register(lambda node: ResourceId.file(node, path))
    raw = _io.open(file, mode, buffering, encoding, errors, newline, closefd, opener)
    return TracedFile(raw, rid, tracer)
