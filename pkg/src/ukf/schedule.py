"""Semantics-preserving scheduling rewrites and replayable schedule scripts.

Every rewrite is a pure function ``Proc -> Proc`` that either returns a
well-formed proc with the same observable behaviour or raises a
:class:`~ukf.errors.SchedulingError` subclass.
"""

from __future__ import annotations

import shlex
from dataclasses import dataclass, field
from fractions import Fraction

from . import deps
from .check import in_range, well_formed
from .cursor import Cursor, find_all, resolve_cursor
from .errors import (
    AmbiguousMatch,
    DimsDependOnLoop,
    IndexOutOfRange,
    InstrTypeMismatch,
    UkfError,
    LaneRuleViolation,
    MemSpaceMismatch,
    NoMatch,
    NonConstantBound,
    NonContiguousWindow,
    NonDivisible,
    NonPositiveValue,
    NotAnAlloc,
    NotPerfectlyNested,
    PatternMismatch,
    PrecisionMismatch,
    SchedulingError,
    TooManyLevels,
    UnknownParam,
    WindowEscapes,
)
from .ir import (
    BUILTIN_SPACES,
    Affine,
    Alloc,
    Assign,
    BinOp,
    BufferDecl,
    Const,
    InstrCall,
    Loop,
    LoopVar,
    MemSpace,
    Path,
    Proc,
    Read,
    Reduce,
    SizeParam,
    WinDim,
    Window,
    affine,
    as_precision,
    canon,
    const_value,
    enclosing_loops,
    expr_reads,
    get_stmt,
    map_exprs,
    splice,
    stmt_free_vars,
    subst,
    subst_stmt,
    walk,
)
from .printer import body_str, expr_str, parse_value, parse_window, pretty_print, window_str


def _finish(p: Proc, target=None) -> Proc:
    diags = well_formed(p, target)
    if diags:
        raise SchedulingError("rewrite produced a malformed proc: " + "; ".join(diags))
    return p


def _is_ident(name: str) -> bool:
    return isinstance(name, str) and name.isidentifier()


def _names_in_use(p: Proc) -> set[str]:
    names = set(p.size_params) | set(p.decls())
    for _, s in walk(p.body):
        if isinstance(s, Loop):
            names.add(s.var)
    return names


def _fresh(p: Proc, name: str) -> str:
    if not _is_ident(name):
        raise SchedulingError(f"{name!r} is not a valid identifier")
    if name in _names_in_use(p):
        raise SchedulingError(f"name {name!r} is already in use")
    return name


def _loop_at(p: Proc, cursor) -> tuple[Path, Loop]:
    path = resolve_cursor(p, cursor)
    s = get_stmt(p.body, path)
    if not isinstance(s, Loop):
        raise SchedulingError(f"cursor {cursor!r} does not address a loop")
    return path, s


def _alloc_cursor(c) -> Cursor:
    c = Cursor.of(c)
    if c.pattern.isidentifier():
        return Cursor(f"{c.pattern} : _", c.occurrence)
    return c


def _alloc_at(p: Proc, cursor) -> tuple[Path, Alloc]:
    try:
        path = resolve_cursor(p, _alloc_cursor(cursor))
    except NoMatch:
        raise NotAnAlloc(f"{cursor!r} does not name an allocation") from None
    return path, get_stmt(p.body, path)


def _ranges(loops) -> dict[str, Affine]:
    return {l.var: affine(l.hi) for l in loops}


# --------------------------------------------------------------------------- #
# Simple rewrites


def rename(p: Proc, new_name: str) -> Proc:
    if not _is_ident(new_name):
        raise SchedulingError(f"{new_name!r} is not a valid identifier")
    return Proc(new_name, p.size_params, p.args, p.body)


def partial_eval(p: Proc, assignments: dict[str, int]) -> Proc:
    for k, v in assignments.items():
        if k not in p.size_params:
            raise UnknownParam(f"{p.name} has no size parameter {k!r}")
        if int(v) < 1:
            raise NonPositiveValue(f"{k} must be at least 1, got {v}")
    if not assignments:
        return p
    mapping = {k: Const(Fraction(int(v))) for k, v in assignments.items()}

    def fe(e):
        return subst(e, mapping)

    def fi(e):
        return canon(subst(e, mapping))

    args = tuple(BufferDecl(a.name, tuple(fi(d) for d in a.dims), a.prec, a.mem, a.mutable) for a in p.args)
    body = tuple(map_exprs(s, fe, fi) for s in p.body)
    sizes = tuple(s for s in p.size_params if s not in assignments)
    return _finish(Proc(p.name, sizes, args, body))


def divide_loop(p: Proc, loop, factor: int, new_names) -> Proc:
    path, s = _loop_at(p, loop)
    factor = int(factor)
    if factor < 1:
        raise NonPositiveValue(f"split factor must be positive, got {factor}")
    hi = const_value(s.hi)
    if hi is None:
        raise NonConstantBound(f"loop {s.var} has non-constant bound {expr_str(s.hi)}")
    if hi % factor:
        raise NonDivisible(f"loop {s.var} bound {hi} is not divisible by {factor}")
    outer, inner = new_names
    for n in (outer, inner):
        if n != s.var:
            _fresh(p, n)
    if outer == inner:
        raise SchedulingError("outer and inner loop names must differ")
    repl = canon(BinOp("+", BinOp("*", Const(Fraction(factor)), LoopVar(outer)), LoopVar(inner)))
    body = tuple(subst_stmt(c, {s.var: repl}) for c in s.body)
    new = Loop(outer, hi // factor, (Loop(inner, factor, body),))
    return _finish(p.with_body(splice(p.body, path, [new])))


def reorder_loops(p: Proc, pair, target=None) -> Proc:
    """Swap a loop with the single loop directly inside it.

    ``pair`` is a cursor addressing the outer loop, or ``"outer inner"``.
    """
    inner_name = None
    if isinstance(pair, str) and " in " not in pair and len(pair.split()) == 2:
        outer_name, inner_name = pair.split()
        pattern = f"for {outer_name} in _: _"
        hits = find_all(p, pattern)
        nested = [
            n for n, h in enumerate(hits, 1)
            if any(isinstance(c, Loop) and c.var == inner_name for c in get_stmt(p.body, h).body)
        ]
        if not hits:
            raise NoMatch(f"no loop {outer_name}")
        if len(nested) > 1:
            raise AmbiguousMatch(f"{len(nested)} loops {outer_name} contain a loop {inner_name}")
        pair = f"{pattern} #{nested[0] if nested else 1}"
    path, outer = _loop_at(p, pair)
    if len(outer.body) != 1 or not isinstance(outer.body[0], Loop):
        raise NotPerfectlyNested(f"loop {outer.var} does not directly contain exactly one loop")
    inner = outer.body[0]
    if inner_name is not None and inner.var != inner_name:
        raise NotPerfectlyNested(f"loop {outer.var} directly contains {inner.var}, not {inner_name}")
    if outer.var in stmt_free_vars([Loop("_", inner.hi, ())]):
        raise NotPerfectlyNested(f"bound of {inner.var} depends on {outer.var}")
    deps.check_reorder(p, outer, target)
    new = Loop(inner.var, inner.hi, (Loop(outer.var, outer.hi, inner.body),))
    return _finish(p.with_body(splice(p.body, path, [new])))


def unroll_loop(p: Proc, loop) -> Proc:
    path, s = _loop_at(p, loop)
    hi = const_value(s.hi)
    if hi is None:
        raise NonConstantBound(f"loop {s.var} has non-constant bound {expr_str(s.hi)}")
    if any(isinstance(c, Alloc) for _, c in walk(s.body)):
        raise SchedulingError(f"loop {s.var} contains an allocation; lift it before unrolling")
    out = []
    for v in range(hi):
        out.extend(subst_stmt(c, {s.var: Const(Fraction(v))}) for c in s.body)
    return _finish(p.with_body(splice(p.body, path, out)))


# --------------------------------------------------------------------------- #
# Memory staging


def _window_of(p: Proc, window) -> Window:
    if isinstance(window, Window):
        return window
    try:
        return parse_window(window, p)
    except Exception as exc:
        raise NonContiguousWindow(f"invalid window {window!r}: {exc}") from None


def _access_kinds(stmts, buf) -> tuple[bool, bool]:
    read = written = False
    for _, s in walk(stmts):
        if isinstance(s, (Assign, Reduce)):
            if any(r.buf == buf for r in expr_reads(s.rhs)):
                read = True
            if s.buf == buf:
                written = True
                read = read or isinstance(s, Reduce)
        elif isinstance(s, InstrCall):
            if any(isinstance(a, Window) and a.buf == buf for a in s.args):
                read = written = True
    return read, written


def stage_mem(p: Proc, block, window, new_name: str, target=None) -> Proc:
    """Stage the window of a buffer into a fresh DRAM allocation around `block`."""
    path = resolve_cursor(p, block)
    stmt = get_stmt(p.body, path)
    w = _window_of(p, window)
    decls = p.decls()
    if w.buf not in decls:
        raise NonContiguousWindow(f"window refers to unknown buffer {w.buf!r}")
    d = decls[w.buf]
    if len(w.dims) != d.rank:
        raise NonContiguousWindow(f"window on {w.buf} has {len(w.dims)} dimensions, buffer has rank {d.rank}")
    name = _fresh(p, new_name)
    outer = enclosing_loops(p.body, path)
    outer_vars = {l.var for l in outer}
    for wd in w.dims:
        free = affine(wd.lo).loop_vars()
        if not free <= outer_vars:
            raise NonContiguousWindow(f"window offset {expr_str(wd.lo)} uses variables not bound outside the block")

    def shift(idx, ranges, what):
        if len(idx) != len(w.dims):
            raise WindowEscapes(f"{what}: rank mismatch")
        out = []
        for e, wd in zip(idx, w.dims):
            diff = affine(e) - affine(wd.lo)
            if wd.extent is None:
                if diff != Affine((), 0):
                    raise WindowEscapes(f"{what}: index {expr_str(e)} differs from window point {expr_str(wd.lo)}")
                continue
            if not in_range(diff, ranges, Affine((), wd.extent)):
                raise WindowEscapes(f"{what}: index {expr_str(e)} may leave [{expr_str(wd.lo)}, +{wd.extent})")
            out.append(diff.to_expr())
        return tuple(out)

    def rw_expr(e, ranges):
        if isinstance(e, Read):
            idx = shift(e.idx, ranges, f"read of {e.buf}") if e.buf == w.buf else e.idx
            return Read(name if e.buf == w.buf else e.buf, idx)
        if isinstance(e, BinOp):
            return BinOp(e.op, rw_expr(e.lhs, ranges), rw_expr(e.rhs, ranges))
        return e

    def rw(s, ranges):
        if isinstance(s, Loop):
            r = {**ranges, s.var: affine(s.hi)}
            return Loop(s.var, s.hi, tuple(rw(c, r) for c in s.body))
        if isinstance(s, (Assign, Reduce)):
            rhs = rw_expr(s.rhs, ranges)
            if s.buf == w.buf:
                return type(s)(name, shift(s.idx, ranges, f"write of {s.buf}"), rhs)
            return type(s)(s.buf, s.idx, rhs)
        if isinstance(s, InstrCall):
            args = []
            for a in s.args:
                if isinstance(a, Window) and a.buf == w.buf:
                    lo = shift(tuple(x.lo for x in a.dims), ranges, f"window of {a.buf}")
                    # the last element of the window must stay inside too
                    shift(
                        tuple(canon(BinOp("+", x.lo, Const(Fraction((x.extent or 1) - 1)))) for x in a.dims),
                        ranges,
                        f"window of {a.buf}",
                    )
                    kept = [x for x, wd in zip(a.dims, w.dims) if wd.extent is not None]
                    args.append(Window(name, tuple(WinDim(l, x.extent) for l, x in zip(lo, kept))))
                else:
                    args.append(a)
            return InstrCall(s.instr, tuple(args))
        return s

    # indices are checked against the full enclosing ranges; variables bound
    # outside cancel because window offsets use the same ones
    ranges = _ranges(outer)
    new_stmt = rw(stmt, ranges)
    read, written = _access_kinds([stmt], w.buf)
    if not (read or written):
        raise WindowEscapes(f"{w.buf} is not accessed in the block")
    if written and not d.mutable:
        raise SchedulingError(f"{w.buf} is read-only")
    ext = [wd.extent for wd in w.dims if wd.extent is not None]
    alloc = Alloc(BufferDecl(name, tuple(ext), d.prec, BUILTIN_SPACES["DRAM"], True))
    used = _names_in_use(p) | {name}
    ivars = []
    for k in range(len(ext)):
        base = f"i{k}"
        n = 0
        while base in used:
            n += 1
            base = f"i{k}_{n}"
        used.add(base)
        ivars.append(base)

    def copy(load: bool):
        src_idx, it = [], iter(ivars)
        for wd in w.dims:
            if wd.extent is None:
                src_idx.append(wd.lo)
            else:
                src_idx.append(canon(BinOp("+", wd.lo, LoopVar(next(it)))))
        reg_idx = tuple(LoopVar(v) for v in ivars)
        if load:
            s = Assign(name, reg_idx, Read(w.buf, tuple(src_idx)))
        else:
            s = Assign(w.buf, tuple(src_idx), Read(name, reg_idx))
        for v, e in reversed(list(zip(ivars, ext))):
            s = Loop(v, e, (s,))
        return s

    out = [alloc]
    if read:
        out.append(copy(True))
    out.append(new_stmt)
    if written:
        out.append(copy(False))
    return _finish(p.with_body(splice(p.body, path, out)))


def _map_buffer_accesses(stmts, buf, f_idx, f_win):
    """Rewrite every access to `buf` (reads, writes, windows)."""

    def fe(e):
        if isinstance(e, Read):
            return Read(e.buf, f_idx(e.idx) if e.buf == buf else e.idx)
        if isinstance(e, BinOp):
            return BinOp(e.op, fe(e.lhs), fe(e.rhs))
        return e

    def go(s):
        if isinstance(s, Loop):
            return Loop(s.var, s.hi, tuple(go(c) for c in s.body))
        if isinstance(s, (Assign, Reduce)):
            idx = f_idx(s.idx) if s.buf == buf else s.idx
            return type(s)(s.buf, idx, fe(s.rhs))
        if isinstance(s, InstrCall):
            return InstrCall(s.instr, tuple(f_win(a) if isinstance(a, Window) and a.buf == buf else a for a in s.args))
        return s

    return tuple(go(s) for s in stmts)


def expand_dim(p: Proc, alloc, new_dim, index) -> Proc:
    path, a = _alloc_at(p, alloc)
    n = canon(new_dim if not isinstance(new_dim, str) else parse_value(new_dim, p))
    nd = affine(n)
    if nd.loop_vars():
        raise DimsDependOnLoop("a new dimension may not depend on loop variables")
    idx = canon(index if not isinstance(index, str) else parse_value(index, p))
    loops = enclosing_loops(p.body, path)
    ranges = _ranges(loops)
    ia = affine(idx)
    unbound = ia.loop_vars() - set(ranges)
    if unbound:
        raise IndexOutOfRange(f"index {expr_str(idx)} uses {sorted(unbound)} not bound around {a.decl.name}")
    if not in_range(ia, ranges, nd):
        raise IndexOutOfRange(f"index {expr_str(idx)} may leave [0, {expr_str(n)})")
    d = a.decl
    new_decl = Alloc(BufferDecl(d.name, (n,) + d.dims, d.prec, d.mem, d.mutable))
    parent = list(_block_at(p.body, path[:-1]))
    i = path[-1]
    rest = _map_buffer_accesses(
        parent[i + 1:], d.name, lambda ix: (idx,) + tuple(ix), lambda w: Window(w.buf, (WinDim(idx, None),) + w.dims)
    )
    parent = parent[:i] + [new_decl] + list(rest)
    return _finish(p.with_body(_replace_block(p.body, path[:-1], parent)))


def _block_at(body, path: Path):
    cur = body
    for i in path:
        cur = cur[i].body
    return cur


def _replace_block(body, path: Path, new) -> tuple:
    if not path:
        return tuple(new)
    body = list(body)
    loop = body[path[0]]
    body[path[0]] = Loop(loop.var, loop.hi, _replace_block(loop.body, path[1:], new))
    return tuple(body)


def lift_alloc(p: Proc, alloc, levels: int = 1) -> Proc:
    path, a = _alloc_at(p, alloc)
    levels = int(levels)
    if levels < 0:
        raise NonPositiveValue("levels must be non-negative")
    body = p.body
    for _ in range(levels):
        if len(path) < 2:
            raise TooManyLevels(f"{a.decl.name} is not inside {levels} loops")
        loop_path = path[:-1]
        loop = get_stmt(body, loop_path)
        for x in a.decl.dims:
            if loop.var in affine(x).loop_vars():
                raise DimsDependOnLoop(f"{a.decl.name} dimension depends on loop {loop.var}")
        inner = list(loop.body)
        del inner[path[-1]]
        body = _replace_block(body, loop_path, inner)
        parent = list(_block_at(body, loop_path[:-1]))
        parent.insert(loop_path[-1], a)
        body = _replace_block(body, loop_path[:-1], parent)
        path = loop_path
    return _finish(p.with_body(body))


def fission(p: Proc, gap, side: str = "after", levels: int = 1, target=None) -> Proc:
    """Split the `levels` loops enclosing a gap between two statements.

    A half that no longer uses the loop variable and is idempotent is
    emitted without the loop (it would only repeat identical work).
    """
    if side not in ("after", "before"):
        raise SchedulingError(f"gap side must be 'after' or 'before', got {side!r}")
    path = resolve_cursor(p, gap)
    levels = int(levels)
    if levels < 0:
        raise NonPositiveValue("levels must be non-negative")
    body = p.body
    block_path, g = path[:-1], path[-1] + (1 if side == "after" else 0)
    for _ in range(levels):
        if not block_path:
            raise TooManyLevels(f"gap is not inside {levels} loops")
        loop = get_stmt(body, block_path)
        P, Q = loop.body[:g], loop.body[g:]
        if not P or not Q:
            new = [loop]
            g_new = block_path[-1] + (0 if not P else 1)
        else:
            deps.check_fission(p.with_body(body), loop, g, target)
            new = []
            for half in (P, Q):
                if deps.droppable(p, loop, half, target):
                    new.extend(half)
                else:
                    new.append(Loop(loop.var, loop.hi, half))
                if half is P:
                    g_new = block_path[-1] + len(new)
        body = splice(body, block_path, new)
        block_path, g = block_path[:-1], g_new
    return _finish(p.with_body(body), target)


def bind_expr(p: Proc, expr, new_name: str, occurrence: int | None = None) -> Proc:
    """Compute `expr` into a fresh rank-0 temporary right before its use."""
    pat = canon(expr) if not isinstance(expr, str) else parse_value(expr, p)
    pat = _canon_reads(pat)
    hits = []
    for path, s in walk(p.body):
        if isinstance(s, (Assign, Reduce)) and _contains(_canon_reads(s.rhs), pat):
            hits.append(path)
    if not hits:
        raise NoMatch(f"no statement computes {expr_str(pat)}")
    if occurrence is None and len(hits) > 1:
        raise AmbiguousMatch(f"{len(hits)} statements compute {expr_str(pat)}; give an occurrence")
    k = 1 if occurrence is None else int(occurrence)
    if not 1 <= k <= len(hits):
        raise NoMatch(f"occurrence {k} requested, {len(hits)} statements match")
    path = hits[k - 1]
    s = get_stmt(p.body, path)
    name = _fresh(p, new_name)
    prec = p.decls()[s.buf].prec
    tmp = Read(name, ())
    rhs = _replace_sub(_canon_reads(s.rhs), pat, tmp)
    out = [Alloc(BufferDecl(name, (), prec)), Assign(name, (), pat), type(s)(s.buf, s.idx, rhs)]
    return _finish(p.with_body(splice(p.body, path, out)))


def _canon_reads(e):
    if isinstance(e, Read):
        return Read(e.buf, e.idx)
    if isinstance(e, BinOp):
        return BinOp(e.op, _canon_reads(e.lhs), _canon_reads(e.rhs))
    return e


def _contains(e, pat) -> bool:
    if e == pat:
        return True
    if isinstance(e, BinOp):
        return _contains(e.lhs, pat) or _contains(e.rhs, pat)
    return False


def _replace_sub(e, pat, new):
    if e == pat:
        return new
    if isinstance(e, BinOp):
        return BinOp(e.op, _replace_sub(e.lhs, pat, new), _replace_sub(e.rhs, pat, new))
    return e


# --------------------------------------------------------------------------- #
# Memory spaces and precision


def _resolve_space(space, target=None) -> MemSpace:
    if isinstance(space, MemSpace):
        return space
    if target is not None and space in target.spaces:
        return target.spaces[space]
    if space in BUILTIN_SPACES:
        return BUILTIN_SPACES[space]
    raise SchedulingError(f"unknown memory space {space!r}")


def _check_calls(p: Proc, target) -> None:
    if target is None:
        return
    diags = [d for d in well_formed(p, target) if ": " in d and (" lives in " in d or " is f" in d)]
    if diags:
        raise InstrTypeMismatch("; ".join(diags))


def set_memory(p: Proc, alloc, space, target=None) -> Proc:
    path, a = _alloc_at(p, alloc)
    mem = _resolve_space(space, target)
    d = a.decl
    if mem.is_register:
        inner = const_value(d.dims[-1]) if d.dims else None
        if inner != mem.lanes:
            shown = expr_str(d.dims[-1]) if d.dims else "none"
            raise LaneRuleViolation(f"{d.name}: innermost dimension {shown} must equal {mem.name} lanes ({mem.lanes})")
    new = Alloc(BufferDecl(d.name, d.dims, d.prec, mem, d.mutable))
    q = p.with_body(splice(p.body, path, [new]))
    _check_calls(q, target)
    return _finish(q)


def set_precision(p: Proc, buf, prec, target=None) -> Proc:
    prec = as_precision(prec)
    name = Cursor.of(buf).pattern.split(":")[0].strip()
    if name in {a.name for a in p.args}:
        args = tuple(BufferDecl(a.name, a.dims, prec, a.mem, a.mutable) if a.name == name else a for a in p.args)
        q = Proc(p.name, p.size_params, args, p.body)
    else:
        path, a = _alloc_at(p, buf)
        d = a.decl
        q = p.with_body(splice(p.body, path, [Alloc(BufferDecl(d.name, d.dims, prec, d.mem, d.mutable))]))
    _check_calls(q, target)
    return _finish(q)


# --------------------------------------------------------------------------- #
# Instruction replacement


class _Matcher:
    def __init__(self, instr, decls):
        self.instr = instr
        self.decls = decls
        self.vars: dict[str, str] = {}
        self.bufs: dict[str, str] = {}
        self.accesses: list[tuple[str, tuple, tuple]] = []
        self.index_params = {q.name for q in instr.params if q.role == "index"}
        self.buffer_params = {q.name for q in instr.params if q.role != "index"}

    def fail(self, why):
        raise PatternMismatch(why)

    def stmts(self, a, b):
        if len(a) != len(b):
            self.fail(f"expected {len(a)} statement(s), found {len(b)}")
        for x, y in zip(a, b):
            self.stmt(x, y)

    def stmt(self, a, b):
        if type(a) is not type(b):
            self.fail(f"expected {type(a).__name__.lower()}, found {type(b).__name__.lower()}")
        if isinstance(a, Loop):
            if affine(a.hi) != affine(b.hi):
                self.fail(f"loop bound {expr_str(b.hi)} differs from {expr_str(a.hi)}")
            self.vars[a.var] = b.var
            self.stmts(a.body, b.body)
        elif isinstance(a, (Assign, Reduce)):
            self.access(a.buf, a.idx, b.buf, b.idx)
            self.expr(a.rhs, b.rhs)
        else:
            self.fail("unsupported statement in instruction body")

    def access(self, prm, pidx, buf, bidx):
        if prm not in self.buffer_params:
            self.fail(f"instruction accesses unknown operand {prm}")
        if self.bufs.setdefault(prm, buf) != buf:
            self.fail(f"operand {prm} bound to both {self.bufs[prm]} and {buf}")
        self.accesses.append((prm, pidx, bidx))

    def expr(self, a, b):
        if isinstance(a, Const):
            if not (isinstance(b, Const) and a.value == b.value):
                self.fail(f"expected constant {expr_str(a)}, found {expr_str(b)}")
        elif isinstance(a, Read):
            if not isinstance(b, Read):
                self.fail(f"expected a read of {a.buf}, found {expr_str(b)}")
            self.access(a.buf, a.idx, b.buf, b.idx)
        elif isinstance(a, BinOp):
            if not (isinstance(b, BinOp) and a.op == b.op):
                self.fail(f"expected {expr_str(a)}, found {expr_str(b)}")
            saved = (dict(self.bufs), list(self.accesses))
            try:
                self.expr(a.lhs, b.lhs)
                self.expr(a.rhs, b.rhs)
            except PatternMismatch:
                if a.op == "-":
                    raise
                self.bufs, self.accesses = saved
                self.expr(a.lhs, b.rhs)
                self.expr(a.rhs, b.lhs)
        else:
            self.fail(f"unsupported expression {expr_str(a)} in instruction body")

    def windows(self) -> tuple[dict, dict]:
        matched = set(self.vars.values())
        sigma = {k: LoopVar(v) for k, v in self.vars.items()}
        shapes = {q.name: tuple(q.shape) for q in self.instr.params}
        wins: dict[str, Window] = {}
        idx_vals: dict[str, object] = {}
        for prm, pidx, bidx in self.accesses:
            buf = self.bufs[prm]
            shape = shapes[prm]
            r, n = len(shape), len(bidx)
            if len(pidx) != r:
                self.fail(f"operand {prm} accessed with {len(pidx)} indices, declared rank {r}")
            if r > n:
                self.fail(f"{buf} has rank {n}, operand {prm} needs {r} dimensions")
            # trailing extent-1 dims do not break contiguity
            trail = 0
            while n - trail > r and const_value(self.decls[buf].dims[n - 1 - trail]) == 1 and not (
                affine(bidx[n - 1 - trail]).loop_vars() & matched
            ):
                trail += 1
            dims = []
            for d, e in enumerate(bidx):
                ae = affine(e)
                k = d - (n - trail - r)
                if k >= r:
                    dims.append(WinDim(e, None))
                    continue
                if k < 0:
                    if ae.loop_vars() & matched:
                        self.fail(f"{buf} dimension {d} varies inside the matched loops (operand {prm} is not contiguous)")
                    dims.append(WinDim(e, None))
                    continue
                pe = pidx[k]
                ip = [x for x in affine(pe).atoms() if isinstance(x, SizeParam) and x.name in self.index_params]
                if ip:
                    if affine(pe) != Affine(((ip[0], 1),), 0):
                        self.fail(f"index parameter {ip[0].name} must be used alone")
                    if ae.loop_vars() & matched:
                        self.fail(f"{buf} dimension {d} selects a lane that varies inside the matched loops")
                    dim = const_value(self.decls[buf].dims[d])
                    if dim != shape[k]:
                        self.fail(f"{buf} dimension {d} has extent {dim}, operand {prm} selects among {shape[k]}")
                    old = idx_vals.setdefault(ip[0].name, e)
                    if affine(old) != ae:
                        self.fail(f"index parameter {ip[0].name} bound inconsistently")
                    dims.append(WinDim(Const(Fraction(0)), shape[k]))
                    continue
                lo = ae - affine(subst(pe, sigma))
                if lo.loop_vars() & matched:
                    self.fail(f"{buf} dimension {d}: index {expr_str(e)} does not follow operand {prm}")
                dims.append(WinDim(lo.to_expr(), shape[k]))
            w = Window(buf, tuple(dims))
            if wins.setdefault(prm, w) != w:
                self.fail(f"operand {prm} accessed through different windows")
        return wins, idx_vals


def _alpha_equal(a, b, env: dict) -> bool:
    if type(a) is not type(b):
        return False
    if isinstance(a, (list, tuple)):
        return len(a) == len(b) and all(_alpha_equal(x, y, env) for x, y in zip(a, b))
    if isinstance(a, Loop):
        if affine(a.hi) != affine(b.hi):
            return False
        return _alpha_equal(a.body, b.body, {**env, a.var: b.var})
    mapping = {k: LoopVar(v) for k, v in env.items()}
    if isinstance(a, (Assign, Reduce)):
        ra = subst_stmt(a, mapping)
        return ra.buf == b.buf and ra.idx == b.idx and _expr_eq(ra.rhs, b.rhs)
    return a == b


def _expr_eq(a, b) -> bool:
    if isinstance(a, BinOp) and isinstance(b, BinOp) and a.op == b.op:
        if _expr_eq(a.lhs, b.lhs) and _expr_eq(a.rhs, b.rhs):
            return True
        return a.op != "-" and _expr_eq(a.lhs, b.rhs) and _expr_eq(a.rhs, b.lhs)
    if isinstance(a, Read) and isinstance(b, Read):
        return a.buf == b.buf and a.idx == b.idx
    return a == b


def _resolve_instr(instr, target):
    if isinstance(instr, str):
        if target is None:
            raise SchedulingError(f"instruction {instr!r} given by name but no target library")
        found = target.get(instr)
        if found is None:
            raise SchedulingError(f"target {target.name} has no instruction {instr!r}")
        return found
    return instr


def replace(p: Proc, block, instr, target=None) -> Proc:
    """Replace the addressed statement by a call to `instr` if it matches."""
    from .interp import inline_call

    instr = _resolve_instr(instr, target)
    path = resolve_cursor(p, block)
    stmt = get_stmt(p.body, path)
    decls = p.decls()
    m = _Matcher(instr, decls)
    expected = body_str(instr.body).rstrip()
    found = body_str([stmt]).rstrip()
    try:
        m.stmts(list(instr.body), [stmt])
        wins, idx_vals = m.windows()
    except PatternMismatch as exc:
        raise PatternMismatch(f"{instr.name} does not match: {exc}\n--- expected\n{expected}\n--- found\n{found}") from None
    args = []
    for q in instr.params:
        if q.role == "index":
            if q.name not in idx_vals:
                raise PatternMismatch(f"{instr.name}: index parameter {q.name} is not determined by the match")
            args.append(idx_vals[q.name])
            continue
        if q.name not in wins:
            raise PatternMismatch(f"{instr.name}: operand {q.name} is not used by the matched code")
        w = wins[q.name]
        d = decls[w.buf]
        if d.mem.name != q.mem.name:
            raise MemSpaceMismatch(f"{instr.name}: {w.buf} lives in {d.mem.name}, operand {q.name} needs {q.mem.name}")
        if d.prec != q.prec:
            raise PrecisionMismatch(f"{instr.name}: {w.buf} is {d.prec.value}, operand {q.name} needs {q.prec.value}")
        if q.role == "dst" and not d.mutable:
            raise PatternMismatch(f"{instr.name}: {w.buf} is read-only")
        args.append(w)
    call = InstrCall(instr.name, tuple(args))
    inlined = inline_call(call, instr, "_r")
    if not _alpha_equal(list(inlined), [stmt], {}):
        raise PatternMismatch(
            f"{instr.name}: inferred call {call.instr}({', '.join(window_str(a) if isinstance(a, Window) else expr_str(a) for a in args)})"
            f" does not reproduce the code\n--- expected\n{body_str(inlined).rstrip()}\n--- found\n{found}"
        )
    q = p.with_body(splice(p.body, path, [call]))
    diags = well_formed(q)
    if diags:
        raise PatternMismatch(f"{instr.name}: call would be malformed: {'; '.join(diags)}")
    return q


# --------------------------------------------------------------------------- #
# Scripts


def _kv(d: dict) -> list[str]:
    return [f"{k}={v}" for k, v in d.items()]


def _parse_kv(items) -> dict:
    out = {}
    for it in items:
        k, _, v = it.partition("=")
        out[k] = int(v)
    return out


# op -> (function, needs target, argument decoders)
_OPS = {
    "rename": (rename, False, (str,)),
    "partial_eval": (partial_eval, False, "kv"),
    "divide_loop": (divide_loop, False, (str, int, str, str)),
    "reorder_loops": (reorder_loops, True, (str,)),
    "stage_mem": (stage_mem, False, (str, str, str)),
    "expand_dim": (expand_dim, False, (str, str, str)),
    "lift_alloc": (lift_alloc, False, (str, int)),
    "fission": (fission, True, (str, str, int)),
    "bind_expr": (bind_expr, False, (str, str)),
    "replace": (replace, True, (str, str)),
    "set_memory": (set_memory, True, (str, str)),
    "set_precision": (set_precision, True, (str, str)),
    "unroll_loop": (unroll_loop, False, (str,)),
}


@dataclass(frozen=True)
class Step:
    op: str
    args: tuple

    def line(self) -> str:
        if self.op == "partial_eval":
            parts = _kv(self.args[0])
        elif self.op == "divide_loop":
            cur, f, (o, i) = self.args
            parts = [cur, str(f), o, i]
        else:
            parts = [a.name if hasattr(a, "name") and not isinstance(a, str) else str(a) for a in self.args]
        return " ".join([self.op] + [shlex.quote(x) for x in parts])

    @classmethod
    def parse(cls, line: str) -> "Step":
        toks = shlex.split(line)
        op, rest = toks[0], toks[1:]
        if op not in _OPS:
            raise SchedulingError(f"unknown directive {op!r}")
        dec = _OPS[op][2]
        if dec == "kv":
            return cls(op, (_parse_kv(rest),))
        if len(rest) != len(dec):
            raise SchedulingError(f"{op} takes {len(dec)} arguments, got {len(rest)}")
        args = tuple(f(x) for f, x in zip(dec, rest))
        if op == "divide_loop":
            args = (args[0], args[1], (args[2], args[3]))
        return cls(op, args)


def apply_step(p: Proc, step: Step, target=None) -> Proc:
    fn, wants_target, _ = _OPS[step.op]
    args = list(step.args)
    if wants_target:
        return fn(p, *args, target=target)
    return fn(p, *args)


@dataclass
class ScheduleScript:
    """An ordered list of directives plus a snapshot after every step."""

    base: Proc
    target: object = None
    steps: list[Step] = field(default_factory=list)
    log: list[tuple[Step, str]] = field(default_factory=list)
    phases: list[tuple[str, int]] = field(default_factory=list)
    meta: dict[str, str] = field(default_factory=dict)
    current: Proc | None = None

    def __post_init__(self):
        if self.current is None:
            self.current = self.base

    def apply(self, op: str, *args) -> Proc:
        if op not in _OPS:
            raise SchedulingError(f"unknown directive {op!r}")
        if op == "divide_loop" and len(args) == 4:
            args = (args[0], args[1], (args[2], args[3]))
        if op == "divide_loop":
            args = (args[0], args[1], tuple(args[2]))
        step = Step(op, tuple(args))
        self.current = apply_step(self.current, step, self.target)
        self.steps.append(step)
        self.log.append((step, pretty_print(self.current)))
        return self.current

    def phase(self, label: str) -> None:
        """Mark the start of a named phase (e.g. ``v3``)."""
        self.phases.append((label, len(self.steps)))

    def snapshots(self) -> dict[str, Proc]:
        """Proc at the end of each phase, replayed from the base."""
        out = {}
        bounds = [n for _, n in self.phases[1:]] + [len(self.steps)]
        p = self.base
        done = 0
        for (label, start), end in zip(self.phases, bounds):
            for s in self.steps[done:end]:
                p = apply_step(p, s, self.target)
            done = end
            out[label] = p
        return out

    def serialize(self) -> str:
        lines = ["# ukf schedule"]
        for k, v in self.meta.items():
            lines.append(f"meta {k} {shlex.quote(str(v))}")
        if self.target is not None:
            lines.append(f"target {self.target.name}")
        marks = {}
        for label, at in self.phases:
            marks.setdefault(at, []).append(label)
        for i, s in enumerate(self.steps):
            for label in marks.get(i, []):
                lines.append(f"phase {label}")
            lines.append(s.line())
        for label in marks.get(len(self.steps), []):
            lines.append(f"phase {label}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def parse_header(text: str) -> tuple[dict[str, str], str | None]:
        meta, target = {}, None
        for raw in text.splitlines():
            toks = shlex.split(raw, comments=True)
            if not toks:
                continue
            if toks[0] == "meta":
                meta[toks[1]] = toks[2] if len(toks) > 2 else ""
            elif toks[0] == "target":
                target = toks[1]
        return meta, target

    @classmethod
    def replay(cls, text: str, base: Proc, target=None) -> "ScheduleScript":
        meta, _ = cls.parse_header(text)
        sc = cls(base, target, meta=meta)
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            head = line.split()[0]
            if head in ("meta", "target"):
                continue
            if head == "phase":
                sc.phase(line.split()[1])
                continue
            try:
                step = Step.parse(line)
            except (ValueError, SchedulingError) as exc:
                raise SchedulingError(f"line {n}: {exc}") from None
            try:
                sc.current = apply_step(sc.current, step, target)
            except UkfError as exc:
                raise type(exc)(f"step {len(sc.steps) + 1} (line {n}: {step.op}) failed: {exc}") from exc
            sc.steps.append(step)
            sc.log.append((step, pretty_print(sc.current)))
        return sc
