"""Textual IR form.

Grammar (a Python-syntax subset, parsed with the stdlib ``ast`` module)::

    proc    := "def" NAME "(" arg ("," arg)* "):" NEWLINE stmt*
    arg     := NAME ":" "size"
             | NAME ":" type            # read-only buffer
             | NAME ":" "inout(" type ")"   # read-write buffer
    type    := PREC ["[" index ("," index)* "]"] "@" SPACE
    stmt    := "for" NAME "in seq(0," index "):" block
             | access "=" expr | access "+=" expr
             | NAME ":" type                   # allocation, scoped to the
                                               # rest of the enclosing block
             | INSTR "(" callarg ("," callarg)* ")"
    access  := NAME | NAME "[" index ("," index)* "]"
    callarg := NAME "[" (index | index ":" index) ("," ...)* "]" | NAME | index
    expr    := expr ("+"|"-"|"*") expr | "-" expr | access | INT | "q(" INT "," INT ")"

A rank-0 buffer is written and read by its bare name. Non-integer
constants print as ``q(num, den)``. A proc with no statements prints as the
header line alone.
"""

from __future__ import annotations

import ast
import textwrap
from fractions import Fraction

from .errors import ParseError
from .ir import (
    BUILTIN_SPACES,
    Alloc,
    Assign,
    BinOp,
    BufferDecl,
    Const,
    InstrCall,
    Loop,
    LoopVar,
    MemSpace,
    Precision,
    Proc,
    Read,
    Reduce,
    SizeParam,
    WinDim,
    Window,
    affine,
    canon,
)

INDENT = "    "
_PREC = {"+": 1, "-": 1, "*": 2}


def expr_str(e) -> str:
    if isinstance(e, Const):
        v = e.value
        if v.denominator == 1:
            return str(v.numerator)
        return f"q({v.numerator}, {v.denominator})"
    if isinstance(e, (LoopVar, SizeParam)):
        return e.name
    if isinstance(e, Read):
        if not e.idx:
            return e.buf
        return f"{e.buf}[{', '.join(expr_str(i) for i in e.idx)}]"
    if isinstance(e, BinOp):
        p = _PREC[e.op]
        ls, rs = expr_str(e.lhs), expr_str(e.rhs)
        if _prec_of(e.lhs) < p:
            ls = f"({ls})"
        if _prec_of(e.rhs) <= p:
            rs = f"({rs})"
        return f"{ls} {e.op} {rs}"
    raise TypeError(e)


def _prec_of(e) -> int:
    if isinstance(e, BinOp):
        return _PREC[e.op]
    if isinstance(e, Const) and e.value < 0:
        return 2  # "-1" binds like a unary minus
    return 3


def type_str(d: BufferDecl) -> str:
    dims = f"[{', '.join(expr_str(x) for x in d.dims)}]" if d.dims else ""
    return f"{d.prec.value}{dims} @ {d.mem.name}"


def window_str(w: Window) -> str:
    if not w.dims:
        return w.buf
    parts = []
    for d in w.dims:
        if d.extent is None:
            parts.append(expr_str(d.lo))
        else:
            hi = canon(BinOp("+", d.lo, Const(Fraction(d.extent))))
            parts.append(f"{expr_str(d.lo)}:{expr_str(hi)}")
    return f"{w.buf}[{', '.join(parts)}]"


def _access(buf, idx) -> str:
    return buf if not idx else f"{buf}[{', '.join(expr_str(i) for i in idx)}]"


def stmt_lines(s, depth: int = 0) -> list[str]:
    pad = INDENT * depth
    if isinstance(s, Loop):
        out = [f"{pad}for {s.var} in seq(0, {expr_str(s.hi)}):"]
        for c in s.body:
            out += stmt_lines(c, depth + 1)
        if not s.body:
            out.append(f"{pad}{INDENT}pass")
        return out
    if isinstance(s, Assign):
        return [f"{pad}{_access(s.buf, s.idx)} = {expr_str(s.rhs)}"]
    if isinstance(s, Reduce):
        return [f"{pad}{_access(s.buf, s.idx)} += {expr_str(s.rhs)}"]
    if isinstance(s, Alloc):
        return [f"{pad}{s.decl.name}: {type_str(s.decl)}"]
    if isinstance(s, InstrCall):
        args = [window_str(a) if isinstance(a, Window) else expr_str(a) for a in s.args]
        return [f"{pad}{s.instr}({', '.join(args)})"]
    raise TypeError(s)


def header_str(p: Proc) -> str:
    args = [f"{n}: size" for n in p.size_params]
    for a in p.args:
        t = type_str(a)
        args.append(f"{a.name}: inout({t})" if a.mutable else f"{a.name}: {t}")
    return f"def {p.name}({', '.join(args)}):"


def pretty_print(p: Proc) -> str:
    lines = [header_str(p)]
    for s in p.body:
        lines += stmt_lines(s, 1)
    return "\n".join(lines) + "\n"


def body_str(stmts, depth: int = 0) -> str:
    lines = []
    for s in stmts:
        lines += stmt_lines(s, depth)
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------- #
# Parsing


class _Parser:
    def __init__(self, spaces: dict[str, MemSpace] | None, free_vars: bool = False):
        self.spaces = dict(BUILTIN_SPACES)
        if spaces:
            self.spaces.update(spaces)
        self.sizes: set[str] = set()
        self.buffers: set[str] = set()
        self.loops: list[str] = []
        self.free_vars = free_vars

    def fail(self, msg, node):
        raise ParseError(msg, getattr(node, "lineno", None), getattr(node, "col_offset", None))

    # types -------------------------------------------------------------
    def decl(self, name, ann, mutable) -> BufferDecl:
        if not (isinstance(ann, ast.BinOp) and isinstance(ann.op, ast.MatMult)):
            self.fail("expected '<prec>[dims] @ <space>'", ann)
        if not isinstance(ann.right, ast.Name) or ann.right.id not in self.spaces:
            self.fail(f"unknown memory space {ast.unparse(ann.right)}", ann.right)
        mem = self.spaces[ann.right.id]
        t = ann.left
        dims = ()
        if isinstance(t, ast.Subscript):
            dims = tuple(self.index(d) for d in _subscript_items(t))
            t = t.value
        if not isinstance(t, ast.Name) or t.id not in ("f32", "f16"):
            self.fail(f"unknown precision {ast.unparse(t)}", t)
        return BufferDecl(name, dims, Precision(t.id), mem, mutable)

    # expressions ---------------------------------------------------------
    def name(self, n: str, node):
        if n in self.loops:
            return LoopVar(n)
        if n in self.sizes:
            return SizeParam(n)
        if n in self.buffers:
            return Read(n, ())
        if self.free_vars:
            return LoopVar(n)
        self.fail(f"unbound name {n!r}", node)

    def expr(self, node):
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) and not isinstance(node.value, bool):
            return Const(Fraction(str(node.value)) if isinstance(node.value, float) else Fraction(node.value))
        if isinstance(node, ast.Name):
            return self.name(node.id, node)
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, ast.USub):
            inner = self.expr(node.operand)
            if isinstance(inner, Const):
                return Const(-inner.value)
            return BinOp("*", Const(Fraction(-1)), inner)
        if isinstance(node, ast.BinOp):
            ops = {ast.Add: "+", ast.Sub: "-", ast.Mult: "*"}
            op = ops.get(type(node.op))
            if op is None:
                self.fail(f"unsupported operator {type(node.op).__name__}", node)
            return BinOp(op, self.expr(node.left), self.expr(node.right))
        if isinstance(node, ast.Subscript):
            if not isinstance(node.value, ast.Name):
                self.fail("subscript of non-name", node)
            buf = node.value.id
            if buf not in self.buffers and not self.free_vars:
                self.fail(f"unknown buffer {buf!r}", node)
            return Read(buf, tuple(self.index(i) for i in _subscript_items(node)))
        if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and node.func.id == "q":
            num, den = node.args
            return Const(Fraction(num.value, den.value))
        self.fail(f"unsupported expression {ast.unparse(node)}", node)

    def index(self, node):
        e = self.expr(node)
        try:
            return canon(e)
        except Exception as exc:
            self.fail(str(exc), node)

    def window(self, node) -> Window:
        if isinstance(node, ast.Name):
            return Window(node.id, ())
        dims = []
        for item in _subscript_items(node):
            if isinstance(item, ast.Slice):
                lo = self.index(item.lower)
                hi = self.index(item.upper)
                ext = affine(hi) - affine(lo)
                if not ext.is_const() or ext.const < 1:
                    self.fail("window extent must be a positive constant", item)
                dims.append(WinDim(lo, ext.const))
            else:
                dims.append(WinDim(self.index(item), None))
        return Window(node.value.id, tuple(dims))

    # statements ----------------------------------------------------------
    def stmts(self, nodes) -> list:
        out = []
        for n in nodes:
            s = self.stmt(n)
            if s is not None:
                out.append(s)
        return out

    def stmt(self, node):
        if isinstance(node, ast.Pass):
            return None
        if isinstance(node, ast.For):
            it = node.iter
            if not (isinstance(node.target, ast.Name) and isinstance(it, ast.Call)
                    and getattr(it.func, "id", None) == "seq" and len(it.args) == 2):
                self.fail("expected 'for <var> in seq(0, <hi>)'", node)
            lo = self.index(it.args[0])
            if lo != Const(Fraction(0)):
                self.fail("loop lower bound must be 0", it)
            hi = self.index(it.args[1])
            v = node.target.id
            self.loops.append(v)
            body = self.stmts(node.body)
            self.loops.pop()
            return Loop(v, hi, tuple(body))
        if isinstance(node, (ast.Assign, ast.AugAssign)):
            tgt = node.targets[0] if isinstance(node, ast.Assign) else node.target
            if isinstance(node, ast.Assign) and len(node.targets) != 1:
                self.fail("chained assignment", node)
            if isinstance(tgt, ast.Name):
                buf, idx = tgt.id, ()
            elif isinstance(tgt, ast.Subscript) and isinstance(tgt.value, ast.Name):
                buf, idx = tgt.value.id, tuple(self.index(i) for i in _subscript_items(tgt))
            else:
                self.fail("bad assignment target", tgt)
            if buf not in self.buffers and not self.free_vars:
                self.fail(f"unknown buffer {buf!r}", tgt)
            rhs = self.expr(node.value)
            if isinstance(node, ast.AugAssign):
                if not isinstance(node.op, ast.Add):
                    self.fail("only += is supported", node)
                return Reduce(buf, idx, rhs)
            return Assign(buf, idx, rhs)
        if isinstance(node, ast.AnnAssign):
            if node.value is not None or not isinstance(node.target, ast.Name):
                self.fail("allocation takes no initializer", node)
            d = self.decl(node.target.id, node.annotation, True)
            self.buffers.add(d.name)
            return Alloc(d)
        if isinstance(node, ast.Expr) and isinstance(node.value, ast.Call):
            call = node.value
            if not isinstance(call.func, ast.Name):
                self.fail("bad call", call)
            args = []
            for a in call.args:
                if isinstance(a, ast.Subscript) and isinstance(a.value, ast.Name) and a.value.id in self.buffers:
                    args.append(self.window(a))
                elif isinstance(a, ast.Name) and a.id in self.buffers:
                    args.append(Window(a.id, ()))
                else:
                    args.append(self.index(a))
            return InstrCall(call.func.id, tuple(args))
        self.fail(f"unsupported statement {ast.unparse(node)}", node)

    def proc(self, fn: ast.FunctionDef) -> Proc:
        sizes, args = [], []
        for a in fn.args.args:
            ann = a.annotation
            if ann is None:
                self.fail(f"argument {a.arg} lacks a type", a)
            if isinstance(ann, ast.Name) and ann.id == "size":
                sizes.append(a.arg)
                self.sizes.add(a.arg)
                continue
            mutable = False
            if isinstance(ann, ast.Call) and getattr(ann.func, "id", None) == "inout":
                ann, mutable = ann.args[0], True
            args.append(self.decl(a.arg, ann, mutable))
            self.buffers.add(a.arg)
        body = self.stmts(fn.body)
        return Proc(fn.name, tuple(sizes), tuple(args), tuple(body))


def _subscript_items(node: ast.Subscript):
    s = node.slice
    if isinstance(s, ast.Tuple):
        return list(s.elts)
    return [s]


def _parse_module(text: str) -> ast.Module:
    text = textwrap.dedent(text).strip("\n") + "\n"
    try:
        return ast.parse(text)
    except SyntaxError as exc:
        first = exc
    if text.rstrip().endswith(":"):
        try:
            return ast.parse(text + INDENT + "pass\n")
        except SyntaxError:
            pass
    raise ParseError(first.msg, first.lineno, first.offset)


def parse_proc(text: str, spaces: dict[str, MemSpace] | None = None) -> Proc:
    mod = _parse_module(text)
    fns = [n for n in mod.body if isinstance(n, ast.FunctionDef)]
    if len(fns) != 1 or len(mod.body) != 1:
        raise ParseError("expected exactly one 'def'", 1, 0)
    return _Parser(spaces).proc(fns[0])


def parse_expr(text: str, proc: Proc | None = None, free_vars: bool = True):
    """Parse a standalone expression; unknown names become loop variables."""
    ps = _Parser(None, free_vars=free_vars)
    if proc is not None:
        ps.sizes = set(proc.size_params)
        ps.buffers = set(proc.decls())
    try:
        node = ast.parse(text.strip(), mode="eval").body
    except SyntaxError as exc:
        raise ParseError(exc.msg, exc.lineno, exc.offset) from None
    return ps, node


def parse_window(text: str, proc: Proc | None = None) -> Window:
    ps, node = parse_expr(text, proc)
    if not isinstance(node, (ast.Subscript, ast.Name)):
        raise ParseError(f"expected a buffer window, got {text!r}")
    return ps.window(node)


def parse_value(text: str, proc: Proc | None = None):
    ps, node = parse_expr(text, proc)
    return ps.expr(node)


def parse_body(text: str, sizes, buffers, loops=(), spaces=None) -> list:
    """Parse a statement list given the names in scope."""
    ps = _Parser(spaces)
    ps.sizes = set(sizes)
    ps.buffers = set(buffers)
    ps.loops = list(loops)
    return ps.stmts(_parse_module(text).body)
