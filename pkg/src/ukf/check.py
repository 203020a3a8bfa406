"""Well-formedness and affine bounds checking."""

from __future__ import annotations

from .ir import (
    Affine,
    Alloc,
    Assign,
    BinOp,
    BufferDecl,
    InstrCall,
    Loop,
    LoopVar,
    Proc,
    Read,
    Reduce,
    SizeParam,
    Window,
    affine,
)
from .printer import expr_str


def nonneg_for_all_sizes(a: Affine) -> bool:
    """True iff a >= 0 for every assignment of its size params >= 1."""
    if a.loop_vars():
        return False
    if any(k < 0 for _, k in a.terms):
        return False
    return a.const + sum(k for _, k in a.terms) >= 0


def index_range(a: Affine, ranges: dict[str, Affine]) -> tuple[Affine, Affine] | None:
    """Lower/upper bounds of `a` over loop ranges, affine in size params.

    ``ranges`` maps a loop variable to its (exclusive) upper bound. Returns
    None if a loop variable in `a` is unbound.
    """
    lo = Affine((), a.const)
    hi = Affine((), a.const)
    for atom, k in a.terms:
        if isinstance(atom, LoopVar):
            if atom.name not in ranges:
                return None
            top = (ranges[atom.name] - Affine((), 1)).scale(k)
            if k > 0:
                hi = hi + top
            else:
                lo = lo + top
        else:
            t = Affine(((atom, k),), 0)
            lo, hi = lo + t, hi + t
    return lo, hi


def in_range(a: Affine, ranges: dict[str, Affine], extent: Affine) -> bool:
    """Provably 0 <= a < extent for all loop values and sizes >= 1."""
    r = index_range(a, ranges)
    if r is None:
        return False
    lo, hi = r
    return nonneg_for_all_sizes(lo) and nonneg_for_all_sizes(extent - hi - Affine((), 1))


class _Checker:
    def __init__(self, p: Proc, target=None):
        self.p = p
        self.target = target
        self.diags: list[str] = []
        self.sizes = set(p.size_params)

    def err(self, msg):
        self.diags.append(msg)

    def check_decl(self, d: BufferDecl, where: str):
        for x in d.dims:
            a = affine(x)
            if a.loop_vars():
                self.err(f"{where} {d.name}: dimension {expr_str(x)} depends on a loop variable")
            elif not a.size_params() <= self.sizes:
                self.err(f"{where} {d.name}: dimension {expr_str(x)} uses an undeclared size")
            elif not nonneg_for_all_sizes(a - Affine((), 1)):
                self.err(f"{where} {d.name}: dimension {expr_str(x)} is not strictly positive")
        if d.mem.is_register:
            if not d.dims:
                self.err(f"lane rule: {d.name} in {d.mem.name} must have a lane dimension")
            else:
                inner = affine(d.dims[-1])
                if not inner.is_const() or inner.const != d.mem.lanes:
                    self.err(
                        f"lane rule: innermost dimension of {d.name} is {expr_str(d.dims[-1])}, "
                        f"{d.mem.name} requires {d.mem.lanes}"
                    )

    def run(self) -> list[str]:
        p = self.p
        names = list(p.size_params) + [a.name for a in p.args]
        allocs = [s.decl for s in _all_stmts(p.body) if isinstance(s, Alloc)]
        names += [d.name for d in allocs]
        seen = set()
        for n in names:
            if n in seen:
                self.err(f"duplicate name {n!r}")
            seen.add(n)
        self.global_names = seen
        for a in p.args:
            self.check_decl(a, "argument")
        bufs = {a.name: a for a in p.args}
        self.block(p.body, bufs, {})
        return self.diags

    def block(self, stmts, bufs: dict, ranges: dict):
        bufs = dict(bufs)
        for s in stmts:
            if isinstance(s, Alloc):
                self.check_decl(s.decl, "allocation")
                bufs[s.decl.name] = s.decl
            elif isinstance(s, Loop):
                if s.var in ranges:
                    self.err(f"loop variable {s.var!r} shadows an enclosing loop")
                if s.var in self.global_names:
                    self.err(f"loop variable {s.var!r} clashes with a buffer or size name")
                hi = affine(s.hi)
                if hi.loop_vars():
                    self.err(f"loop {s.var}: bound {expr_str(s.hi)} depends on a loop variable")
                    hi = Affine((), 0)
                if not hi.size_params() <= self.sizes:
                    self.err(f"loop {s.var}: bound uses an undeclared size")
                self.block(s.body, bufs, {**ranges, s.var: hi})
            elif isinstance(s, (Assign, Reduce)):
                self.access(s.buf, s.idx, bufs, ranges, write=True)
                self.value(s.rhs, bufs, ranges)
            elif isinstance(s, InstrCall):
                self.call(s, bufs, ranges)
            else:
                self.err(f"unknown statement {s!r}")

    def value(self, e, bufs, ranges):
        if isinstance(e, Read):
            self.access(e.buf, e.idx, bufs, ranges, write=False)
        elif isinstance(e, BinOp):
            self.value(e.lhs, bufs, ranges)
            self.value(e.rhs, bufs, ranges)
        elif isinstance(e, LoopVar):
            self.err(f"loop variable {e.name} used as a value")
        elif isinstance(e, SizeParam):
            if e.name not in self.sizes:
                self.err(f"undeclared size {e.name}")

    def _scope(self, a: Affine, ranges, what):
        for v in a.loop_vars():
            if v not in ranges:
                self.err(f"{what}: loop variable {v!r} is not bound by an enclosing loop")
        for s in a.size_params():
            if s not in self.sizes:
                self.err(f"{what}: undeclared size {s!r}")

    def access(self, buf, idx, bufs, ranges, write):
        text = f"{buf}[{', '.join(expr_str(i) for i in idx)}]" if idx else buf
        d = bufs.get(buf)
        if d is None:
            self.err(f"{text}: buffer {buf!r} is not in scope")
            return
        if write and not d.mutable:
            self.err(f"{text}: write to read-only buffer {buf!r}")
        if len(idx) != d.rank:
            self.err(f"{text}: {len(idx)} indices for rank-{d.rank} buffer")
            return
        for k, (i, dim) in enumerate(zip(idx, d.dims)):
            a = affine(i)
            self._scope(a, ranges, text)
            if a.loop_vars() - set(ranges):
                continue
            if not in_range(a, ranges, affine(dim)):
                self.err(f"{text}: index {k} may be out of bounds (dimension {expr_str(dim)})")

    def window(self, w: Window, bufs, ranges, write):
        d = bufs.get(w.buf)
        if d is None:
            self.err(f"window on {w.buf!r}: buffer not in scope")
            return None
        if write and not d.mutable:
            self.err(f"window on {w.buf!r}: instruction writes a read-only buffer")
        if len(w.dims) != d.rank:
            self.err(f"window on {w.buf!r}: {len(w.dims)} dimensions for rank-{d.rank} buffer")
            return None
        for k, (wd, dim) in enumerate(zip(w.dims, d.dims)):
            a = affine(wd.lo)
            self._scope(a, ranges, f"window on {w.buf}")
            if a.loop_vars() - set(ranges):
                continue
            top = a + Affine((), (wd.extent or 1) - 1)
            if not (in_range(a, ranges, affine(dim)) and in_range(top, ranges, affine(dim))):
                self.err(f"window on {w.buf}: dimension {k} may be out of bounds")
        return d

    def call(self, s: InstrCall, bufs, ranges):
        instr = self.target.get(s.instr) if self.target is not None else None
        if self.target is not None and instr is None:
            self.err(f"unknown instruction {s.instr!r}")
        params = instr.params if instr is not None else None
        if params is not None and len(params) != len(s.args):
            self.err(f"{s.instr}: expected {len(params)} arguments, got {len(s.args)}")
            params = None
        for k, a in enumerate(s.args):
            prm = params[k] if params is not None else None
            if isinstance(a, Window):
                write = prm is not None and prm.role == "dst"
                d = self.window(a, bufs, ranges, write)
                if prm is None or d is None:
                    continue
                if prm.role == "index":
                    self.err(f"{s.instr}: argument {prm.name} must be an index")
                    continue
                if a.shape != prm.shape:
                    self.err(f"{s.instr}: window {a.buf} has shape {a.shape}, {prm.name} needs {prm.shape}")
                if d.mem.name != prm.mem.name:
                    self.err(f"{s.instr}: {a.buf} lives in {d.mem.name}, {prm.name} needs {prm.mem.name}")
                if d.prec != prm.prec:
                    self.err(f"{s.instr}: {a.buf} is {d.prec.value}, {prm.name} needs {prm.prec.value}")
            else:
                self._scope(affine(a), ranges, f"{s.instr} index argument")
                if prm is not None and prm.role != "index":
                    self.err(f"{s.instr}: argument {prm.name} must be a buffer window")


def _all_stmts(stmts):
    for s in stmts:
        yield s
        if isinstance(s, Loop):
            yield from _all_stmts(s.body)


def well_formed(p: Proc, target=None) -> list[str]:
    """Every invariant violation of `p` (empty list means well formed)."""
    return _Checker(p, target).run()
