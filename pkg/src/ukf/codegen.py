"""C emission for scheduled procs.

Layout conventions:

* size params become ``int32_t`` arguments, read-only rank-0 buffers become
  scalar arguments, every other argument is a pointer (``const`` when
  read-only);
* DRAM buffers are indexed by their row-major linearized affine index;
* a vector-register allocation ``R: f32[d0, .., dn, lanes] @ Space`` becomes
  a flat array ``Space_t R[d0 * .. * dn]``; element ``R[i0, .., in, :]`` is
  ``R[((i0 * d1) + i1) ...]`` (outermost index first);
* instruction calls are rendered through the library's C template. DRAM
  operands are passed as ``&X[lo]``, register operands as ``R[flat]``.

The harness is a single C file embedding the kernel, a naive reference
loop, and a splitmix64 input generator (see :func:`splitmix_values`).
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import CodegenError, NonConstRegisterDim, UnresolvedInstr
from .interp import DEFAULT_SEED
from .ir import (
    Affine,
    Alloc,
    Assign,
    BinOp,
    BufferDecl,
    Const,
    InstrCall,
    Loop,
    LoopVar,
    Precision,
    Proc,
    Read,
    Reduce,
    SizeParam,
    Window,
    affine,
    const_value,
)
from .printer import parse_proc
from .targets import TargetLibrary, get_target

INDENT = "    "
MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class EmittedUnit:
    kernel_source: str
    header: str
    kernel_symbol: str
    harness_source: str | None = None

    def files(self) -> dict[str, str]:
        out = {f"{self.kernel_symbol}.c": self.kernel_source, f"{self.kernel_symbol}.h": self.header}
        if self.harness_source is not None:
            out[f"{self.kernel_symbol}_harness.c"] = self.harness_source
        return out


# --------------------------------------------------------------------------- #
# Expressions


def c_affine(a: Affine) -> str:
    parts: list[str] = []
    for atom, k in a.terms:
        mag = abs(k)
        term = atom.name if mag == 1 else f"{mag} * {atom.name}"
        if not parts:
            parts.append(term if k > 0 else f"-{term}")
        else:
            parts.append(f"{'+' if k > 0 else '-'} {term}")
    if a.const or not parts:
        if not parts:
            parts.append(str(a.const))
        else:
            parts.append(f"{'+' if a.const > 0 else '-'} {abs(a.const)}")
    return " ".join(parts)


def _mul(a: Affine, b: Affine):
    """Product of two affine forms if it stays affine, else None."""
    if a.is_const():
        return b.scale(a.const)
    if b.is_const():
        return a.scale(b.const)
    return None


def _float_literal(v: Fraction) -> str:
    if v.denominator == 1 and abs(v.numerator) < 1 << 24:
        return f"{v.numerator}.0f"
    return f"{float(np.float32(float(v))).hex()}f"


class _Scope:
    def __init__(self, lib: TargetLibrary, restrict: bool):
        self.lib = lib
        self.restrict = restrict
        self.decls: dict[str, BufferDecl] = {}
        self.scalar_args: set[str] = set()
        self.pointer_rank0: set[str] = set()

    def ctype(self, prec: Precision) -> str:
        return self.lib.scalar_ctype(prec)

    def strides(self, d: BufferDecl):
        out = []
        acc = Affine((), 1)
        exact = True
        for dim in reversed(d.dims):
            out.append(acc if exact else None)
            nxt = _mul(acc, affine(dim)) if exact else None
            exact = nxt is not None
            acc = nxt if exact else acc
        return list(reversed(out))

    def lin(self, d: BufferDecl, idx) -> str:
        if not idx:
            return "0"
        total = Affine((), 0)
        extra: list[str] = []
        strides = self.strides(d)
        for k, e in enumerate(idx):
            a = affine(e)
            s = strides[k]
            if s is None:
                s_txt = " * ".join(f"({c_affine(affine(x))})" for x in d.dims[k + 1 :])
                extra.append(f"({c_affine(a)}) * {s_txt}")
                continue
            prod = _mul(a, s)
            if prod is None:
                extra.append(f"({c_affine(a)}) * ({c_affine(s)})")
            else:
                total = total + prod
        txt = c_affine(total)
        if extra:
            txt = " + ".join(([txt] if txt != "0" else []) + extra)
        return txt

    def reg_flat(self, d: BufferDecl, idx) -> str:
        outer = d.dims[:-1]
        sub = BufferDecl(d.name, outer, d.prec, d.mem, d.mutable)
        return self.lin(sub, idx)

    def access(self, buf: str, idx) -> str:
        d = self.decls[buf]
        if d.mem.is_register:
            return f"{buf}[{self.reg_flat(d, idx[:-1])}][{c_affine(affine(idx[-1]))}]"
        if not d.dims:
            if buf in self.pointer_rank0:
                return f"(*{buf})"
            return buf
        return f"{buf}[{self.lin(d, idx)}]"

    def expr(self, e) -> str:
        if isinstance(e, Const):
            return _float_literal(e.value)
        if isinstance(e, (LoopVar, SizeParam)):
            return f"(float){e.name}"
        if isinstance(e, Read):
            d = self.decls[e.buf]
            txt = self.access(e.buf, e.idx)
            if d.prec is Precision.f16:
                txt = f"(float){txt}"
            return txt
        if isinstance(e, BinOp):
            return f"({self.expr(e.lhs)} {e.op} {self.expr(e.rhs)})"
        raise CodegenError(f"cannot emit expression {e!r}")

    def window(self, w: Window, shape) -> str:
        d = self.decls.get(w.buf)
        if d is None:
            raise CodegenError(f"window over unknown buffer {w.buf}")
        los = [x.lo for x in w.dims]
        if d.mem.is_register:
            last = w.dims[-1]
            if last.extent != d.mem.lanes or const_value(last.lo) != 0:
                raise CodegenError(f"window {w.buf} does not cover a whole register")
            if any(x.extent is not None for x in w.dims[:-1]):
                raise CodegenError(f"window {w.buf} spans more than one register")
            return f"{w.buf}[{self.reg_flat(d, los[:-1])}]"
        if not d.dims:
            return f"&{w.buf}" if w.buf not in self.pointer_rank0 else w.buf
        return f"&{w.buf}[{self.lin(d, los)}]"


# --------------------------------------------------------------------------- #
# Statements


def _signature(p: Proc, sc: _Scope, name: str) -> str:
    parts = [f"int32_t {s}" for s in p.size_params]
    for d in p.args:
        if d.mem.is_register:
            raise CodegenError(f"argument {d.name} lives in {d.mem.name}; arguments must be in DRAM")
    scalars = [d for d in p.args if not d.dims and not d.mutable]
    pointers = [d for d in p.args if d.dims or d.mutable]
    for d in scalars:
        parts.append(f"{F16_ARG if d.prec is Precision.f16 else sc.ctype(d.prec)} {d.name}")
    qual = " restrict" if sc.restrict else ""
    for d in pointers:
        const = "const " if not d.mutable else ""
        parts.append(f"{const}{sc.ctype(d.prec)} *{qual}{' ' if qual else ''}{d.name}")
    return f"void {name}({', '.join(parts) or 'void'})"


def arg_order(p: Proc) -> list[str]:
    """C argument order: sizes, scalar args, then pointer args."""
    scalars = [d.name for d in p.args if not d.dims and not d.mutable]
    pointers = [d.name for d in p.args if d.dims or d.mutable]
    return list(p.size_params) + scalars + pointers


def _emit_body(stmts, sc: _Scope, depth: int, out: list[str]) -> None:
    pad = INDENT * depth
    for s in stmts:
        if isinstance(s, Loop):
            v = s.var
            out.append(f"{pad}for (int32_t {v} = 0; {v} < {c_affine(affine(s.hi))}; {v}++) {{")
            _emit_body(s.body, sc, depth + 1, out)
            out.append(f"{pad}}}")
        elif isinstance(s, Alloc):
            d = s.decl
            sc.decls[d.name] = d
            if d.mem.is_register:
                outer = [const_value(x) for x in d.dims[:-1]]
                if any(x is None for x in outer):
                    raise NonConstRegisterDim(f"register allocation {d.name} has non-constant dimensions")
                n = int(np.prod(outer)) if outer else 1
                out.append(f"{pad}{d.mem.ctype} {d.name}[{n}];")
            elif not d.dims:
                out.append(f"{pad}{sc.ctype(d.prec)} {d.name} = 0;")
            else:
                size = " * ".join(f"({c_affine(affine(x))})" if not affine(x).is_const() else str(const_value(x))
                                  for x in d.dims)
                out.append(f"{pad}{sc.ctype(d.prec)} {d.name}[{size}];")
        elif isinstance(s, (Assign, Reduce)):
            d = sc.decls[s.buf]
            lhs = sc.access(s.buf, s.idx)
            rhs = sc.expr(s.rhs)
            if d.prec is Precision.f16 or d.mem.is_register:
                ct = sc.ctype(d.prec)
                if isinstance(s, Reduce):
                    rhs = f"({'(float)' if d.prec is Precision.f16 else ''}{lhs} + {rhs})"
                out.append(f"{pad}{lhs} = ({ct})({rhs});")
            else:
                op = "+=" if isinstance(s, Reduce) else "="
                out.append(f"{pad}{lhs} {op} {rhs};")
        elif isinstance(s, InstrCall):
            instr = sc.lib.get(s.instr)
            if instr is None:
                raise UnresolvedInstr(f"{s.instr} is not defined by target {sc.lib.name}")
            if len(s.args) != len(instr.params):
                raise CodegenError(f"{s.instr}: expected {len(instr.params)} arguments, got {len(s.args)}")
            values = {}
            for prm, a in zip(instr.params, s.args):
                if prm.role == "index":
                    values[prm.name] = c_affine(affine(a))
                else:
                    if not isinstance(a, Window):
                        raise CodegenError(f"{s.instr}: operand {prm.name} is not a window")
                    values[prm.name] = sc.window(a, prm.shape)
            out.append(pad + instr.render(values))
        else:
            raise CodegenError(f"cannot emit statement {s!r}")


def _function(p: Proc, lib: TargetLibrary, name: str, restrict: bool, static: bool = False) -> tuple[str, str]:
    sc = _Scope(lib, restrict)
    for d in p.args:
        sc.decls[d.name] = d
        if not d.dims and d.mutable:
            sc.pointer_rank0.add(d.name)
    sig = _signature(p, sc, name)
    lines = [("static " if static else "") + sig + " {"]
    _emit_body(p.body, sc, 1, lines)
    lines.append("}")
    return sig, "\n".join(lines) + "\n"


# f16 scalars passed by value; hosts whose f16 type is storage-only override this
F16_ARG = "UKF_F16_ARG"


def _f16_arg_guard(p: Proc, lib: TargetLibrary) -> list[str]:
    if not any(d.prec is Precision.f16 and not d.dims and not d.mutable for d in p.args):
        return []
    return [f"#ifndef {F16_ARG}", f"#define {F16_ARG} {lib.scalar_ctype(Precision.f16)}", "#endif"]


def _includes(lib: TargetLibrary, extra=()) -> list[str]:
    heads = ["stdint.h", *extra]
    for h in lib.headers:
        if h not in heads:
            heads.append(h)
    for i in lib.instrs:
        for h in i.headers:
            if h not in heads:
                heads.append(h)
    return [f"#include <{h}>" for h in heads]


def emit(p: Proc, t, symbol: str | None = None, restrict: bool = False) -> EmittedUnit:
    lib = get_target(t)
    name = symbol or p.name
    sig, fn = _function(p, lib, name, restrict)
    guard = f"{name.upper()}_H"
    heads = [*_includes(lib), *_f16_arg_guard(p, lib)]
    header = "\n".join([f"#ifndef {guard}", f"#define {guard}", "", *heads, "", f"{sig};", "", "#endif", ""])
    kernel = "\n".join([*heads, "", fn])
    return EmittedUnit(kernel, header, name)


# --------------------------------------------------------------------------- #
# Harness


def splitmix_values(seed: int, n: int) -> np.ndarray:
    """The harness input stream: splitmix64 outputs mapped to {-2..2}."""
    out = np.empty(n, dtype=np.float32)
    state = seed & MASK64
    for k in range(n):
        state = (state + 0x9E3779B97F4A7C15) & MASK64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        z ^= z >> 31
        out[k] = float(z % 5) - 2.0
    return out


def _dims(d: BufferDecl, sizes: dict[str, int]) -> tuple[int, ...]:
    return tuple(affine(x).eval(sizes) for x in d.dims)


def harness_inputs(p: Proc, sizes: dict[str, int], seed: int = DEFAULT_SEED) -> dict[str, np.ndarray]:
    """The arrays the harness feeds the kernel, filled in argument order."""
    total = sum(int(np.prod(_dims(d, sizes))) for d in p.args)
    stream = splitmix_values(seed, total)
    out, pos = {}, 0
    for d in p.args:
        shape = _dims(d, sizes)
        n = int(np.prod(shape))
        out[d.name] = stream[pos : pos + n].reshape(shape).copy()
        pos += n
    return out


def naive_reference(p: Proc) -> Proc:
    """Triple-loop GEMM with the micro-kernel signature of `p`."""
    names = {d.name: d for d in p.args}
    if not {"A", "B", "C"} <= set(names):
        raise CodegenError(f"{p.name}: no default reference for this signature; pass one explicitly")
    a, b, c = names["A"], names["B"], names["C"]
    if a.rank != 2 or b.rank != 2 or c.rank != 2:
        raise CodegenError(f"{p.name}: A, B, C must be matrices for the default reference")
    from .printer import expr_str, type_str

    kdim, mdim, ndim = (expr_str(x) for x in (a.dims[0], a.dims[1], b.dims[1]))
    generic = "alpha" in names and "beta" in names
    hdr = [f"{s}: size" for s in p.size_params]
    for d in p.args:
        hdr.append(f"{d.name}: inout({type_str(d)})" if d.mutable else f"{d.name}: {type_str(d)}")
    lines = [f"def ref_{p.name}({', '.join(hdr)}):"]
    if generic:
        lines += [
            f"    for j in seq(0, {ndim}):",
            f"        for i in seq(0, {mdim}):",
            "            C[j, i] = C[j, i] * beta",
        ]
        prod = "A[k, i] * (B[k, j] * alpha)"
    else:
        prod = "A[k, i] * B[k, j]"
    lines += [
        f"    for k in seq(0, {kdim}):",
        f"        for j in seq(0, {ndim}):",
        f"            for i in seq(0, {mdim}):",
        f"                C[j, i] += {prod}",
    ]
    return parse_proc("\n".join(lines) + "\n")


def _c_array_init(name: str, ctype: str, vals: np.ndarray, const: bool) -> str:
    body = ", ".join(f"{int(v)}" for v in vals.ravel())
    return f"    {'static const ' if const else ''}{ctype} {name}[{max(vals.size, 1)}] = {{{body or '0'}}};"


def emit_harness(p: Proc, t, sizes: dict[str, int], symbol: str | None = None, reference: Proc | None = None,
                 seed: int = DEFAULT_SEED, restrict: bool = False) -> str:
    """Self-checking C program: kernel vs naive reference, bitwise."""
    lib = get_target(t)
    name = symbol or p.name
    missing = [s for s in p.size_params if s not in sizes]
    if missing:
        raise CodegenError(f"harness needs values for sizes {missing}")
    ref = reference if reference is not None else naive_reference(p)
    _, kernel_fn = _function(p, lib, name, restrict)
    _, ref_fn = _function(ref, lib, f"ref_{name}", False, static=True)
    inputs = harness_inputs(p, sizes, seed)
    sc = _Scope(lib, restrict)
    lines = [
        "/* Self-checking harness: exits 0 iff the kernel matches the naive loop bitwise.",
        f" * Inputs: splitmix64 stream from seed {seed:#x}, each draw mapped to (z % 5) - 2,",
        " * consumed in argument order, row-major. Pass --dump to print outputs. */",
        *_includes(lib, ("stdio.h", "string.h")),
        *_f16_arg_guard(p, lib),
        "",
        kernel_fn,
        ref_fn,
        "int main(int argc, char **argv) {",
    ]
    for s in p.size_params:
        lines.append(f"    const int32_t {s} = {int(sizes[s])};")
    outs = []
    for d in p.args:
        ct = sc.ctype(d.prec)
        vals = inputs[d.name]
        if not d.dims and not d.mutable:
            lines.append(f"    const {ct} {d.name} = {int(vals.reshape(-1)[0])};")
            continue
        lines.append(_c_array_init(d.name, ct, vals, const=not d.mutable))
        if d.mutable:
            lines.append(f"    {ct} {d.name}_ref[{max(vals.size, 1)}];")
            lines.append(f"    memcpy({d.name}_ref, {d.name}, sizeof {d.name});")
            outs.append((d.name, vals.size))
    order = arg_order(p)
    lines.append(f"    {name}({', '.join(order)});")
    mutated = {o for o, _ in outs}
    lines.append(f"    ref_{name}({', '.join(n + '_ref' if n in mutated else n for n in order)});")
    lines.append("    int ok = 1;")
    for o, n in outs:
        lines.append(f"    if (memcmp({o}, {o}_ref, sizeof {o}) != 0) ok = 0;")
    lines.append('    if (argc > 1 && strcmp(argv[1], "--dump") == 0) {')
    for o, n in outs:
        lines.append(f'        for (int i = 0; i < {n}; i++) printf("%.9g\\n", (double){o}[i]);')
    lines.append("    }")
    lines.append('    printf("%s %s\\n", ok ? "PASS" : "FAIL", "' + name + '");')
    lines.append("    return ok ? 0 : 1;")
    lines.append("}")
    return "\n".join(lines) + "\n"


def emit_unit(p: Proc, t, sizes: dict[str, int] | None = None, symbol: str | None = None,
              restrict: bool = False, reference: Proc | None = None) -> EmittedUnit:
    """Kernel, header and (when sizes are known) harness in one go."""
    unit = emit(p, t, symbol, restrict)
    if sizes is None:
        return unit
    harness = emit_harness(p, t, sizes, symbol=unit.kernel_symbol, reference=reference, restrict=restrict)
    return EmittedUnit(unit.kernel_source, unit.header, unit.kernel_symbol, harness)
