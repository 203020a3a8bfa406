"""Reference interpreter and equivalence oracle.

A proc is lowered to Python source once (instruction calls are inlined
first) and cached. Every buffer is held as a 2-D float32 array of shape
``(batch, numel)`` with row-major linear indexing, so one compiled function
serves a single binding (batch 1) and many independent bindings at once
(the GEMM driver runs all tiles of a block in one call). Arithmetic is f32;
stores into f16 buffers round to nearest-even half precision.
"""

from __future__ import annotations

import logging
import os
import re
from dataclasses import dataclass, field
from functools import lru_cache
from math import prod

import numpy as np

from .errors import (
    InterpError,
    InterpreterBoundsFault,
    MissingBinding,
    SignatureMismatch,
    UnknownInstr,
)
from .ir import (
    Alloc,
    Assign,
    BinOp,
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
    map_exprs,
    subst,
)

log = logging.getLogger(__name__)

DEFAULT_SEED = 20230417
TOLERANCE = {Precision.f32: 1e-5, Precision.f16: 1e-2}
ABS_FLOOR = 1e-6


def default_seed() -> int:
    env = os.environ.get("UKF_SEED")
    return int(env) if env else DEFAULT_SEED


# --------------------------------------------------------------------------- #
# Bindings


@dataclass
class ConcreteBuffer:
    dims: tuple[int, ...]
    prec: Precision
    data: np.ndarray  # flat, row-major

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.prec = Precision(self.prec)
        dtype = np.float16 if self.prec is Precision.f16 else np.float32
        self.data = np.asarray(self.data, dtype=dtype).reshape(-1).copy()
        if self.data.size != prod(self.dims):
            raise InterpError(f"buffer data has {self.data.size} values, dims {self.dims} need {prod(self.dims)}")

    @classmethod
    def of(cls, array, prec=Precision.f32) -> "ConcreteBuffer":
        a = np.asarray(array)
        return cls(a.shape, prec, a.reshape(-1))

    def array(self) -> np.ndarray:
        return self.data.reshape(self.dims)

    def copy(self) -> "ConcreteBuffer":
        return ConcreteBuffer(self.dims, self.prec, self.data)


@dataclass
class Bindings:
    sizes: dict[str, int] = field(default_factory=dict)
    buffers: dict[str, ConcreteBuffer] = field(default_factory=dict)
    scalars: dict[str, float] = field(default_factory=dict)

    def copy(self) -> "Bindings":
        return Bindings(dict(self.sizes), {k: v.copy() for k, v in self.buffers.items()}, dict(self.scalars))

    def value(self, name: str) -> np.ndarray:
        if name in self.buffers:
            return self.buffers[name].array()
        return np.asarray(self.scalars[name])


# --------------------------------------------------------------------------- #
# Instruction inlining


def _rename_loops(s, mapping: dict[str, str]):
    if isinstance(s, Loop):
        inner = {**mapping, s.var: mapping.get(s.var, s.var)}
        body = tuple(_rename_loops(c, inner) for c in s.body)
        return Loop(inner[s.var], s.hi, body)
    return map_exprs(s, lambda e: subst(e, {k: LoopVar(v) for k, v in mapping.items()}))


def _loop_vars(stmts) -> set[str]:
    out = set()
    for s in stmts:
        if isinstance(s, Loop):
            out.add(s.var)
            out |= _loop_vars(s.body)
    return out


def inline_call(call: InstrCall, instr, tag: str) -> list:
    """The instruction's semantic body with operand windows substituted."""
    if len(call.args) != len(instr.params):
        raise InterpError(f"{call.instr}: expected {len(instr.params)} arguments, got {len(call.args)}")
    body = list(instr.body)
    vmap = {v: f"{tag}_{v}" for v in _loop_vars(body)}
    body = [_rename_loops(s, vmap) for s in body]
    sizes = {}
    windows = {}
    for prm, arg in zip(instr.params, call.args):
        if prm.role == "index":
            if isinstance(arg, Window):
                raise InterpError(f"{call.instr}: {prm.name} expects an index")
            sizes[prm.name] = arg
        else:
            if not isinstance(arg, Window):
                raise InterpError(f"{call.instr}: {prm.name} expects a window")
            if arg.shape != tuple(prm.shape):
                raise InterpError(f"{call.instr}: window on {arg.buf} has shape {arg.shape}, need {tuple(prm.shape)}")
            windows[prm.name] = arg

    def remap(buf, idx):
        w = windows[buf]
        it = iter(idx)
        out = []
        for d in w.dims:
            if d.extent is None:
                out.append(d.lo)
            else:
                out.append(BinOp("+", d.lo, next(it)))
        return w.buf, tuple(out)

    def fe(e):
        if isinstance(e, Read):
            b, i = remap(e.buf, tuple(subst(x, sizes) for x in e.idx))
            return Read(b, i)
        if isinstance(e, BinOp):
            return BinOp(e.op, fe(e.lhs), fe(e.rhs))
        if isinstance(e, SizeParam) and e.name in sizes:
            raise InterpError(f"{call.instr}: index parameter {e.name} used as a value")
        return e

    def rewrite(s):
        if isinstance(s, Loop):
            return Loop(s.var, s.hi, tuple(rewrite(c) for c in s.body))
        if isinstance(s, (Assign, Reduce)):
            b, i = remap(s.buf, tuple(subst(x, sizes) for x in s.idx))
            return type(s)(b, i, fe(s.rhs))
        raise InterpError(f"{call.instr}: unsupported statement in semantic body")

    return [rewrite(s) for s in body]


def inline_calls(p: Proc, target) -> Proc:
    if isinstance(target, str):
        from .targets import get_target

        target = get_target(target)
    counter = [0]

    def go(stmts):
        out = []
        for s in stmts:
            if isinstance(s, Loop):
                out.append(Loop(s.var, s.hi, tuple(go(s.body))))
            elif isinstance(s, InstrCall):
                instr = target.get(s.instr) if target is not None else None
                if instr is None:
                    raise UnknownInstr(f"instruction {s.instr!r} is not defined by the target library")
                counter[0] += 1
                out.extend(inline_call(s, instr, f"_x{counter[0]}"))
            else:
                out.append(s)
        return out

    return p.with_body(go(p.body))


def has_calls(stmts) -> bool:
    for s in stmts:
        if isinstance(s, InstrCall):
            return True
        if isinstance(s, Loop) and has_calls(s.body):
            return True
    return False


# --------------------------------------------------------------------------- #
# Compilation


def _ident(kind: str, name: str) -> str:
    return f"{kind}_{re.sub(r'[^0-9A-Za-z_]', '_', name)}"


class _Compiler:
    def __init__(self, p: Proc, check: bool):
        self.p = p
        self.check = check
        self.lines: list[str] = []
        self.decls = {a.name: a for a in p.args}

    def emit(self, depth, text):
        self.lines.append("    " * depth + text)

    def aff(self, e) -> str:
        a = affine(e)
        parts = []
        for atom, k in a.terms:
            n = _ident("v" if isinstance(atom, LoopVar) else "s", atom.name)
            parts.append(n if k == 1 else f"{k}*{n}")
        if a.const or not parts:
            parts.append(str(a.const))
        return " + ".join(parts)

    def lin(self, buf: str, idx) -> str:
        d = self.decls[buf]
        if not idx:
            return "0"
        terms = []
        for k, e in enumerate(idx):
            stride = " * ".join(f"({self.aff(x)})" for x in d.dims[k + 1:])
            a = f"({self.aff(e)})"
            terms.append(f"{a} * {stride}" if stride else a)
        return " + ".join(terms)

    def bounds(self, depth, buf, idx):
        if not self.check or not idx:
            return
        d = self.decls[buf]
        conds = [f"0 <= ({self.aff(e)}) < ({self.aff(x)})" for e, x in zip(idx, d.dims)]
        vals = ", ".join(f"({self.aff(e)})" for e in idx)
        self.emit(depth, f"if not ({' and '.join(conds)}): _fault({buf!r}, ({vals},))")

    def value(self, e, depth) -> str:
        if isinstance(e, Const):
            return repr(float(e.value))
        if isinstance(e, SizeParam):
            return f"float({_ident('s', e.name)})"
        if isinstance(e, LoopVar):
            raise InterpError(f"loop variable {e.name} used as a value")
        if isinstance(e, Read):
            self.bounds(depth, e.buf, e.idx)
            return f"{_ident('b', e.buf)}[:, {self.lin(e.buf, e.idx)}]"
        if isinstance(e, BinOp):
            return f"({self.value(e.lhs, depth)} {e.op} {self.value(e.rhs, depth)})"
        raise InterpError(f"unknown expression {e!r}")

    def block(self, stmts, depth):
        if not stmts:
            self.emit(depth, "pass")
        for s in stmts:
            if isinstance(s, Loop):
                self.emit(depth, f"for {_ident('v', s.var)} in range({self.aff(s.hi)}):")
                self.block(s.body, depth + 1)
            elif isinstance(s, Alloc):
                d = s.decl
                self.decls[d.name] = d
                n = " * ".join(f"({self.aff(x)})" for x in d.dims) or "1"
                self.emit(depth, f"{_ident('b', d.name)} = _np.zeros((_B, {n}), _np.float32)")
            elif isinstance(s, (Assign, Reduce)):
                rhs = self.value(s.rhs, depth)
                self.bounds(depth, s.buf, s.idx)
                tgt = f"{_ident('b', s.buf)}[:, {self.lin(s.buf, s.idx)}]"
                half = self.decls[s.buf].prec is Precision.f16
                if isinstance(s, Assign):
                    self.emit(depth, f"{tgt} = _r16({rhs})" if half else f"{tgt} = {rhs}")
                elif half:
                    self.emit(depth, f"{tgt} = _r16({tgt} + {rhs})")
                else:
                    self.emit(depth, f"{tgt} += {rhs}")
            elif isinstance(s, InstrCall):
                raise InterpError("instruction calls must be inlined before compilation")
            else:
                raise InterpError(f"unknown statement {s!r}")

    def source(self) -> str:
        p = self.p
        self.emit(0, "def _kernel(_S, _Bufs, _B):")
        for s in p.size_params:
            self.emit(1, f"{_ident('s', s)} = _S[{s!r}]")
        for a in p.args:
            self.emit(1, f"{_ident('b', a.name)} = _Bufs[{a.name!r}]")
        self.block(p.body, 1)
        return "\n".join(self.lines) + "\n"


def _r16(x):
    return np.asarray(x, np.float32).astype(np.float16).astype(np.float32)


def _fault(buf, idx):
    raise InterpreterBoundsFault(f"access {buf}{list(idx)} is out of bounds")


@lru_cache(maxsize=512)
def _compile(p: Proc, check: bool):
    src = _Compiler(p, check).source()
    ns = {"_np": np, "_r16": _r16, "_fault": _fault}
    exec(compile(src, f"<ukf:{p.name}>", "exec"), ns)
    return ns["_kernel"]


def compiled_source(p: Proc, target=None, check_bounds: bool = False) -> str:
    """Python source the interpreter executes for `p` (debugging aid)."""
    if has_calls(p.body):
        p = inline_calls(p, target)
    return _Compiler(p, check_bounds).source()


@lru_cache(maxsize=512)
def _lowered(p: Proc, target):
    return inline_calls(p, target) if has_calls(p.body) else p


def _eval_dim(x, sizes) -> int:
    try:
        return affine(x).eval(sizes)
    except KeyError as exc:
        raise MissingBinding(f"size parameter {exc.args[0]} is not bound") from None


# --------------------------------------------------------------------------- #
# Execution


def run_batched(p: Proc, sizes: dict[str, int], arrays: dict[str, np.ndarray], target=None,
                check_bounds: bool = False) -> dict[str, np.ndarray]:
    """Execute `p` on a batch of independent bindings.

    ``arrays[name]`` has shape ``(batch, *dims)``; rank-0 args may be given
    with shape ``(batch,)``. Returns float32 arrays for every mutable arg.
    """
    for s in p.size_params:
        if s not in sizes:
            raise MissingBinding(f"size parameter {s} is not bound")
        if int(sizes[s]) < 1:
            raise InterpError(f"size parameter {s} must be positive")
    sizes = {s: int(sizes[s]) for s in p.size_params}
    batch = None
    bufs = {}
    for a in p.args:
        if a.name not in arrays:
            raise MissingBinding(f"argument {a.name} is not bound")
        arr = np.asarray(arrays[a.name])
        if batch is None:
            batch = arr.shape[0]
        n = prod(_eval_dim(x, sizes) for x in a.dims)
        if arr.shape[0] != batch or arr.size != batch * n:
            raise InterpError(f"argument {a.name} has shape {arr.shape}, expected ({batch}, {n} values)")
        flat = np.array(arr, dtype=np.float32).reshape(batch, n)
        if a.prec is Precision.f16:
            flat = _r16(flat)
        bufs[a.name] = flat
    if batch is None:
        batch = 1
    low = _lowered(p, target)
    _compile(low, check_bounds)(sizes, bufs, batch)
    return {
        a.name: bufs[a.name].reshape((batch,) + tuple(_eval_dim(x, sizes) for x in a.dims))
        for a in p.args
        if a.mutable
    }


def run(p: Proc, b: Bindings, target=None, check_bounds: bool = True) -> Bindings:
    """Execute `p`; returns a new Bindings with read-write buffers updated."""
    out = b.copy()
    arrays = {}
    for a in p.args:
        if a.name in b.buffers:
            arrays[a.name] = b.buffers[a.name].data[None, :]
        elif a.name in b.scalars and a.rank == 0:
            arrays[a.name] = np.asarray([[b.scalars[a.name]]], dtype=np.float32)
        else:
            raise MissingBinding(f"argument {a.name} is not bound")
    for a in p.args:
        if a.name in b.buffers:
            dims = tuple(_eval_dim(x, {**b.sizes}) for x in a.dims)
            if tuple(b.buffers[a.name].dims) != dims:
                raise InterpError(f"argument {a.name} bound with dims {b.buffers[a.name].dims}, expected {dims}")
    res = run_batched(p, b.sizes, arrays, target, check_bounds)
    for name, arr in res.items():
        if name in out.buffers:
            buf = out.buffers[name]
            out.buffers[name] = ConcreteBuffer(buf.dims, buf.prec, arr.reshape(-1))
        else:
            out.scalars[name] = float(arr.reshape(-1)[0])
    return out


# --------------------------------------------------------------------------- #
# Equivalence


@dataclass
class EquivalenceReport:
    p1: str
    p2: str
    trials: int
    mode: str
    seed: int
    max_err: float = 0.0
    equivalent: bool = True
    counterexample: dict | None = None

    @property
    def verdict(self) -> str:
        return "equivalent" if self.equivalent else "different"

    def to_text(self) -> str:
        lines = [
            f"equivalence p1={self.p1} p2={self.p2} trials={self.trials} mode={self.mode} "
            f"seed={self.seed} max_err={self.max_err:.6g} verdict={self.verdict}"
        ]
        if self.counterexample is not None:
            ce = self.counterexample
            sizes = " ".join(f"{k}={v}" for k, v in sorted(ce["sizes"].items()))
            lines.append(f"counterexample trial={ce['trial']} buffer={ce['buffer']} index={ce['index']} "
                         f"expected={ce['expected']} got={ce['got']} sizes:{(' ' + sizes) if sizes else ''}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "EquivalenceReport":
        lines = text.strip().splitlines()
        f = dict(kv.split("=", 1) for kv in lines[0].split()[1:])
        rep = cls(f["p1"], f["p2"], int(f["trials"]), f["mode"], int(f["seed"]), float(f["max_err"]),
                  f["verdict"] == "equivalent")
        if len(lines) > 1:
            head, _, tail = lines[1].partition("sizes:")
            g = dict(kv.split("=", 1) for kv in head.split()[1:])
            rep.counterexample = {
                "trial": int(g["trial"]),
                "buffer": g["buffer"],
                "index": g["index"],
                "expected": float(g["expected"]),
                "got": float(g["got"]),
                "sizes": {k: int(v) for k, v in (kv.split("=") for kv in tail.split())},
            }
        return rep


def unify_signatures(p1: Proc, p2: Proc, fixed: dict[str, int] | None = None) -> dict[str, int]:
    """Size values forced by matching the two signatures.

    Args must agree in name, rank, precision and mutability. A dim that is a
    size in one proc and a constant in the other (e.g. after partial
    evaluation) binds that size.
    """
    forced = dict(fixed or {})
    if [a.name for a in p1.args] != [a.name for a in p2.args]:
        raise SignatureMismatch(f"{p1.name} and {p2.name} take different arguments")
    for a, b in zip(p1.args, p2.args):
        if a.rank != b.rank or a.prec != b.prec or a.mutable != b.mutable:
            raise SignatureMismatch(f"argument {a.name} differs in rank, precision or mutability")
        for x, y in zip(a.dims, b.dims):
            ax, ay = affine(x), affine(y)
            for one, other in ((ax, ay), (ay, ax)):
                if other.is_const() and len(one.terms) == 1 and one.terms[0][1] == 1 and one.const == 0:
                    name = one.terms[0][0].name
                    if forced.get(name, other.const) != other.const:
                        raise SignatureMismatch(f"size {name} bound to both {forced[name]} and {other.const}")
                    forced[name] = other.const
            if ax.is_const() and ay.is_const() and ax.const != ay.const:
                raise SignatureMismatch(f"argument {a.name}: dimension {ax.const} vs {ay.const}")
            if not ax.is_const() and not ay.is_const() and ax != ay:
                raise SignatureMismatch(f"argument {a.name}: dimensions differ")
    return forced


def random_arrays(p: Proc, sizes, rng, mode: str, batch: int = 1) -> dict[str, np.ndarray]:
    out = {}
    for a in p.args:
        dims = tuple(_eval_dim(x, sizes) for x in a.dims)
        if mode == "integer_exact":
            v = rng.integers(-2, 3, size=(batch,) + dims).astype(np.float32)
        elif mode == "real_tolerance":
            v = rng.uniform(-1, 1, size=(batch,) + dims).astype(np.float32)
        else:
            raise ValueError(f"unknown value mode {mode!r}")
        out[a.name] = v
    return out


def equivalent(p1: Proc, p2: Proc, trials: int = 20, mode: str = "integer_exact", target=None,
               seed: int | None = None, fixed_sizes: dict[str, int] | None = None,
               max_size: int = 6, target2=None) -> EquivalenceReport:
    """Randomized differential test of two procs with matching signatures."""
    seed = default_seed() if seed is None else seed
    forced = unify_signatures(p1, p2, fixed_sizes)
    rng = np.random.default_rng(seed)
    log.info("equivalence %s vs %s: seed=%d trials=%d mode=%s", p1.name, p2.name, seed, trials, mode)
    rep = EquivalenceReport(p1.name, p2.name, trials, mode, seed)
    free = sorted((set(p1.size_params) | set(p2.size_params)) - set(forced))
    tol_of = {a.name: TOLERANCE[a.prec] for a in p1.args}
    t2 = target if target2 is None else target2
    for t in range(trials):
        sizes = {**forced, **{s: int(rng.integers(1, max_size + 1)) for s in free}}
        arrays = random_arrays(p1, sizes, rng, mode)
        o1 = run_batched(p1, sizes, arrays, target, check_bounds=True)
        o2 = run_batched(p2, sizes, arrays, t2, check_bounds=True)
        for name in o1:
            x, y = o1[name].reshape(-1), o2[name].reshape(-1)
            diff = np.abs(x.astype(np.float64) - y.astype(np.float64))
            if mode == "integer_exact":
                errs = diff
                bad = x.view(np.uint32) != y.view(np.uint32)
                bad &= ~(np.isnan(x) & np.isnan(y))
            else:
                scale = np.maximum(np.abs(x), np.abs(y)).astype(np.float64)
                errs = np.where(diff <= ABS_FLOOR, 0.0, diff / np.maximum(scale, ABS_FLOOR))
                bad = errs > tol_of[name]
            if errs.size:
                rep.max_err = max(rep.max_err, float(np.nanmax(errs)) if not np.all(np.isnan(errs)) else np.inf)
            if bad.any() and rep.counterexample is None:
                k = int(np.argmax(bad))
                dims = o1[name].shape[1:]
                rep.equivalent = False
                rep.counterexample = {
                    "trial": t,
                    "buffer": name,
                    "index": ",".join(str(int(i)) for i in np.unravel_index(k, dims)) if dims else "0",
                    "expected": float(x[k]),
                    "got": float(y[k]),
                    "sizes": dict(sizes),
                }
            if bad.any():
                rep.equivalent = False
    return rep
