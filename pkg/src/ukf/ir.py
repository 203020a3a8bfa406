"""Affine loop-nest IR.

All nodes are frozen dataclasses; rewrites build new trees. Index
expressions (buffer subscripts, window bases, loop bounds, buffer dims) are
normalized on construction to a canonical sorted-term affine form, so two
spellings of the same index compare equal.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterator, Union

from .errors import IRError


class Precision(str, enum.Enum):
    f32 = "f32"
    f16 = "f16"

    @property
    def nbytes(self) -> int:
        return 4 if self is Precision.f32 else 2

    @property
    def ctype(self) -> str:
        return "float" if self is Precision.f32 else "_Float16"


def as_precision(p) -> Precision:
    try:
        return Precision(p)
    except ValueError:
        raise IRError(f"unknown precision {p!r}") from None


@dataclass(frozen=True)
class MemSpace:
    name: str
    kind: str = "addressable"  # or "vector_register"
    lanes: int | None = None
    lane_precision: Precision | None = None
    ctype: str | None = None  # register type emitted in C

    @property
    def is_register(self) -> bool:
        return self.kind == "vector_register"


DRAM = MemSpace("DRAM")

# Spaces known without loading any target library.
BUILTIN_SPACES: dict[str, MemSpace] = {
    "DRAM": DRAM,
    "Neon": MemSpace("Neon", "vector_register", 4, Precision.f32, "float32x4_t"),
    "Neon8f": MemSpace("Neon8f", "vector_register", 8, Precision.f16, "float16x8_t"),
    "AVX512": MemSpace("AVX512", "vector_register", 16, Precision.f32, "__m512"),
}


# --------------------------------------------------------------------------- #
# Expressions


@dataclass(frozen=True)
class Const:
    value: Fraction

    def __post_init__(self):
        if not isinstance(self.value, Fraction):
            object.__setattr__(self, "value", Fraction(self.value))


@dataclass(frozen=True)
class SizeParam:
    name: str


@dataclass(frozen=True)
class LoopVar:
    name: str


@dataclass(frozen=True)
class Read:
    buf: str
    idx: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "idx", tuple(canon(e) for e in self.idx))


@dataclass(frozen=True)
class BinOp:
    op: str
    lhs: "Expr"
    rhs: "Expr"

    def __post_init__(self):
        if self.op not in ("+", "-", "*"):
            raise IRError(f"unsupported operator {self.op!r}")


Expr = Union[Const, SizeParam, LoopVar, Read, BinOp]
Atom = Union[SizeParam, LoopVar]


def const(v) -> Const:
    return Const(Fraction(v))


def var(name: str) -> LoopVar:
    return LoopVar(name)


# --------------------------------------------------------------------------- #
# Affine forms


@dataclass(frozen=True)
class Affine:
    """sum(coeff * atom) + const with integer coefficients."""

    terms: tuple[tuple[Atom, int], ...] = ()
    const: int = 0

    @staticmethod
    def build(terms: dict, c) -> "Affine":
        items = sorted(((a, k) for a, k in terms.items() if k != 0), key=lambda t: (t[0].name, type(t[0]).__name__))
        return Affine(tuple(items), int(c))

    def as_dict(self) -> dict:
        return dict(self.terms)

    def coeff(self, atom) -> int:
        return self.as_dict().get(atom, 0)

    def atoms(self) -> set:
        return {a for a, _ in self.terms}

    def loop_vars(self) -> set[str]:
        return {a.name for a, _ in self.terms if isinstance(a, LoopVar)}

    def size_params(self) -> set[str]:
        return {a.name for a, _ in self.terms if isinstance(a, SizeParam)}

    def is_const(self) -> bool:
        return not self.terms

    def __add__(self, other: "Affine") -> "Affine":
        d = self.as_dict()
        for a, k in other.terms:
            d[a] = d.get(a, 0) + k
        return Affine.build(d, self.const + other.const)

    def scale(self, k: int) -> "Affine":
        return Affine.build({a: c * k for a, c in self.terms}, self.const * k)

    def __sub__(self, other: "Affine") -> "Affine":
        return self + other.scale(-1)

    def eval(self, env: dict[str, int]) -> int:
        return self.const + sum(k * env[a.name] for a, k in self.terms)

    def to_expr(self) -> Expr:
        out = None
        for atom, k in self.terms:
            t = atom if abs(k) == 1 else BinOp("*", Const(Fraction(abs(k))), atom)
            if out is None:
                out = t if k > 0 else BinOp("*", Const(Fraction(k)), atom) if k != -1 else BinOp("*", Const(Fraction(-1)), atom)
            else:
                out = BinOp("+" if k > 0 else "-", out, t)
        if out is None:
            return Const(Fraction(self.const))
        if self.const > 0:
            out = BinOp("+", out, Const(Fraction(self.const)))
        elif self.const < 0:
            out = BinOp("-", out, Const(Fraction(-self.const)))
        return out


def affine(e: Expr) -> Affine:
    """Affine form of an index expression; raises IRError if non-affine."""
    if isinstance(e, Const):
        if e.value.denominator != 1:
            raise IRError(f"non-integer constant {e.value} in index")
        return Affine((), int(e.value))
    if isinstance(e, (LoopVar, SizeParam)):
        return Affine(((e, 1),), 0)
    if isinstance(e, Read):
        raise IRError(f"buffer read {e.buf} inside an index expression")
    if isinstance(e, BinOp):
        a, b = affine(e.lhs), affine(e.rhs)
        if e.op == "+":
            return a + b
        if e.op == "-":
            return a - b
        if a.is_const():
            return b.scale(a.const)
        if b.is_const():
            return a.scale(b.const)
        raise IRError("non-affine index: product of two variables")
    raise IRError(f"not an expression: {e!r}")


def canon(e) -> Expr:
    if isinstance(e, int):
        e = const(e)
    return affine(e).to_expr()


def const_value(e: Expr) -> int | None:
    a = affine(e)
    return a.const if a.is_const() else None


# --------------------------------------------------------------------------- #
# Statements


@dataclass(frozen=True)
class BufferDecl:
    name: str
    dims: tuple = ()
    prec: Precision = Precision.f32
    mem: MemSpace = DRAM
    mutable: bool = True

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(canon(d) for d in self.dims))
        object.__setattr__(self, "prec", as_precision(self.prec))

    @property
    def rank(self) -> int:
        return len(self.dims)


@dataclass(frozen=True)
class WinDim:
    lo: Expr
    extent: int | None = None  # None: point access, dimension dropped

    def __post_init__(self):
        object.__setattr__(self, "lo", canon(self.lo))


@dataclass(frozen=True)
class Window:
    buf: str
    dims: tuple[WinDim, ...] = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(d.extent for d in self.dims if d.extent is not None)


@dataclass(frozen=True)
class Loop:
    var: str
    hi: Expr
    body: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "hi", canon(self.hi))
        object.__setattr__(self, "body", tuple(self.body))


@dataclass(frozen=True)
class Assign:
    buf: str
    idx: tuple
    rhs: Expr

    def __post_init__(self):
        object.__setattr__(self, "idx", tuple(canon(e) for e in self.idx))


@dataclass(frozen=True)
class Reduce:
    """buf[idx] += rhs"""

    buf: str
    idx: tuple
    rhs: Expr

    def __post_init__(self):
        object.__setattr__(self, "idx", tuple(canon(e) for e in self.idx))


@dataclass(frozen=True)
class Alloc:
    decl: BufferDecl


@dataclass(frozen=True)
class InstrCall:
    instr: str
    args: tuple  # Window for buffer params, index Expr for index params

    def __post_init__(self):
        args = tuple(a if isinstance(a, Window) else canon(a) for a in self.args)
        object.__setattr__(self, "args", args)


Stmt = Union[Loop, Assign, Reduce, Alloc, InstrCall]


@dataclass(frozen=True)
class Proc:
    name: str
    size_params: tuple[str, ...] = ()
    args: tuple[BufferDecl, ...] = ()
    body: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "size_params", tuple(self.size_params))
        object.__setattr__(self, "args", tuple(self.args))
        object.__setattr__(self, "body", tuple(self.body))

    def arg(self, name: str) -> BufferDecl:
        for a in self.args:
            if a.name == name:
                return a
        raise KeyError(name)

    def decls(self) -> dict[str, BufferDecl]:
        """Every buffer visible anywhere in the proc (args and allocs)."""
        out = {a.name: a for a in self.args}
        for _, s in walk(self.body):
            if isinstance(s, Alloc):
                out[s.decl.name] = s.decl
        return out

    def with_body(self, body) -> "Proc":
        return Proc(self.name, self.size_params, self.args, tuple(body))

    def __str__(self):
        from .printer import pretty_print

        return pretty_print(self)


# --------------------------------------------------------------------------- #
# Traversal helpers. A path is a tuple of child indices from the proc body.

Path = tuple[int, ...]


def walk(body, prefix: Path = ()) -> Iterator[tuple[Path, Stmt]]:
    """Pre-order traversal yielding (path, stmt)."""
    for i, s in enumerate(body):
        p = prefix + (i,)
        yield p, s
        if isinstance(s, Loop):
            yield from walk(s.body, p)


def get_stmt(body, path: Path) -> Stmt:
    s = body[path[0]]
    for i in path[1:]:
        s = s.body[i]
    return s


def enclosing_loops(body, path: Path) -> list[Loop]:
    out = []
    cur = body
    for i in path[:-1]:
        s = cur[i]
        out.append(s)
        cur = s.body
    return out


def splice(body, path: Path, new: list) -> tuple:
    """Replace the statement at `path` by the statement list `new`."""
    body = list(body)
    i = path[0]
    if len(path) == 1:
        return tuple(body[:i] + list(new) + body[i + 1:])
    loop = body[i]
    body[i] = Loop(loop.var, loop.hi, splice(loop.body, path[1:], new))
    return tuple(body)


def map_exprs(s: Stmt, fe, fi=None) -> Stmt:
    """Rebuild a statement tree applying `fe` to value exprs and `fi` to
    index exprs (defaults to fe)."""
    fi = fi or fe
    if isinstance(s, Loop):
        return Loop(s.var, fi(s.hi), tuple(map_exprs(c, fe, fi) for c in s.body))
    if isinstance(s, Assign):
        return Assign(s.buf, tuple(fi(e) for e in s.idx), fe(s.rhs))
    if isinstance(s, Reduce):
        return Reduce(s.buf, tuple(fi(e) for e in s.idx), fe(s.rhs))
    if isinstance(s, Alloc):
        d = s.decl
        return Alloc(BufferDecl(d.name, tuple(fi(x) for x in d.dims), d.prec, d.mem, d.mutable))
    if isinstance(s, InstrCall):
        args = []
        for a in s.args:
            if isinstance(a, Window):
                args.append(Window(a.buf, tuple(WinDim(fi(d.lo), d.extent) for d in a.dims)))
            else:
                args.append(fi(a))
        return InstrCall(s.instr, tuple(args))
    raise IRError(f"unknown statement {s!r}")


def subst(e: Expr, mapping: dict[str, Expr]) -> Expr:
    """Substitute loop variables and size parameters by name."""
    if isinstance(e, (LoopVar, SizeParam)):
        return mapping.get(e.name, e)
    if isinstance(e, Read):
        return Read(e.buf, tuple(subst(i, mapping) for i in e.idx))
    if isinstance(e, BinOp):
        return BinOp(e.op, subst(e.lhs, mapping), subst(e.rhs, mapping))
    return e


def subst_stmt(s: Stmt, mapping: dict[str, Expr]) -> Stmt:
    def f(e):
        return subst(e, mapping)

    def fi(e):
        return canon(subst(e, mapping))

    return map_exprs(s, f, fi)


def rename_buffer(s: Stmt, old: str, new: str) -> Stmt:
    def fe(e):
        if isinstance(e, Read):
            return Read(new if e.buf == old else e.buf, e.idx)
        if isinstance(e, BinOp):
            return BinOp(e.op, fe(e.lhs), fe(e.rhs))
        return e

    s = map_exprs(s, fe, lambda e: e)
    if isinstance(s, (Assign, Reduce)) and s.buf == old:
        return type(s)(new, s.idx, s.rhs)
    if isinstance(s, Loop):
        return Loop(s.var, s.hi, tuple(rename_buffer(c, old, new) for c in s.body))
    if isinstance(s, InstrCall):
        return InstrCall(s.instr, tuple(Window(new, a.dims) if isinstance(a, Window) and a.buf == old else a for a in s.args))
    return s


def expr_reads(e: Expr) -> Iterator[Read]:
    if isinstance(e, Read):
        yield e
    elif isinstance(e, BinOp):
        yield from expr_reads(e.lhs)
        yield from expr_reads(e.rhs)


def free_loop_vars(e: Expr) -> set[str]:
    if isinstance(e, LoopVar):
        return {e.name}
    if isinstance(e, Read):
        out = set()
        for i in e.idx:
            out |= free_loop_vars(i)
        return out
    if isinstance(e, BinOp):
        return free_loop_vars(e.lhs) | free_loop_vars(e.rhs)
    return set()


def stmt_free_vars(stmts) -> set[str]:
    """Loop variables referenced but not bound within `stmts`."""
    out: set[str] = set()
    for s in stmts:
        if isinstance(s, Loop):
            out |= free_loop_vars(s.hi)
            out |= stmt_free_vars(s.body) - {s.var}
        elif isinstance(s, (Assign, Reduce)):
            for i in s.idx:
                out |= free_loop_vars(i)
            out |= free_loop_vars(s.rhs)
        elif isinstance(s, InstrCall):
            for a in s.args:
                if isinstance(a, Window):
                    for d in a.dims:
                        out |= free_loop_vars(d.lo)
                else:
                    out |= free_loop_vars(a)
    return out


def stmt_buffers(stmts) -> set[str]:
    out: set[str] = set()
    for _, s in walk(stmts):
        if isinstance(s, (Assign, Reduce)):
            out.add(s.buf)
            out |= {r.buf for r in expr_reads(s.rhs)}
        elif isinstance(s, InstrCall):
            out |= {a.buf for a in s.args if isinstance(a, Window)}
        elif isinstance(s, Alloc):
            out.add(s.decl.name)
    return out


def is_idempotent(stmts) -> bool:
    """No accumulation anywhere (instruction calls are checked by the caller)."""
    return not any(isinstance(s, Reduce) for _, s in walk(stmts))
