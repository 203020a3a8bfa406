"""String-pattern statement addressing.

Supported patterns (``_`` is a wildcard)::

    for <var|_> in _: _       loops
    <buf|_>[_] = _            assignments   (``<buf> = _`` for rank 0)
    <buf|_>[_] += _           reductions
    <buf|_> : _               allocations
    <instr|_>(_)              instruction calls

A trailing ``#n`` selects the n-th match (1-based, pre-order).
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .errors import AmbiguousMatch, NoMatch, ParseError
from .ir import Alloc, Assign, InstrCall, Loop, Path, Proc, Reduce, walk

_FOR = re.compile(r"^for\s+(\w+)\s+in\s+_\s*:\s*_$")
_ASSIGN = re.compile(r"^(\w+)\s*(\[\s*_\s*\])?\s*(\+=|=)\s*_$")
_ALLOC = re.compile(r"^(\w+)\s*:\s*_$")
_CALL = re.compile(r"^(\w+)\s*\(\s*_\s*\)$")
_OCC = re.compile(r"^(.*?)\s*#\s*(\d+)\s*$")


@dataclass(frozen=True)
class Cursor:
    pattern: str
    occurrence: int | None = None

    @staticmethod
    def of(c) -> "Cursor":
        if isinstance(c, Cursor):
            return c
        m = _OCC.match(c)
        if m:
            return Cursor(m.group(1), int(m.group(2)))
        return Cursor(c)

    def __str__(self):
        return self.pattern if self.occurrence is None else f"{self.pattern} #{self.occurrence}"


def _matcher(pattern: str):
    pat = pattern.strip()
    if m := _FOR.match(pat):
        name = m.group(1)
        return lambda s: isinstance(s, Loop) and name in ("_", s.var)
    if m := _ASSIGN.match(pat):
        name, sub, op = m.groups()
        kind = Reduce if op == "+=" else Assign

        def f(s):
            if not isinstance(s, kind) or name not in ("_", s.buf):
                return False
            return bool(s.idx) == bool(sub) or name == "_"

        return f
    if m := _ALLOC.match(pat):
        name = m.group(1)
        return lambda s: isinstance(s, Alloc) and name in ("_", s.decl.name)
    if m := _CALL.match(pat):
        name = m.group(1)
        return lambda s: isinstance(s, InstrCall) and name in ("_", s.instr)
    raise ParseError(f"invalid cursor pattern {pattern!r}")


def find_all(p: Proc, pattern: str) -> list[Path]:
    f = _matcher(pattern)
    return [path for path, s in walk(p.body) if f(s)]


def resolve_cursor(p: Proc, c) -> Path:
    """Path of the unique statement addressed by the cursor."""
    c = Cursor.of(c)
    hits = find_all(p, c.pattern)
    if not hits:
        raise NoMatch(f"no statement matches {c.pattern!r} in {p.name}")
    if c.occurrence is None:
        if len(hits) > 1:
            raise AmbiguousMatch(f"{len(hits)} statements match {c.pattern!r}; give an occurrence")
        return hits[0]
    if not 1 <= c.occurrence <= len(hits):
        raise NoMatch(f"{c.pattern!r} has {len(hits)} matches, occurrence {c.occurrence} requested")
    return hits[c.occurrence - 1]
