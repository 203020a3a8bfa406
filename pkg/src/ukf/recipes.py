"""Executable micro-kernel recipes.

Three schedule styles share one skeleton (six phases v1..v6):

``lane``     packed A, lane-indexed FMA. C_reg[NR, MR/VL, VL], A_reg[MR/VL, VL],
             B_reg[NR/VL, VL]; needs VL | MR and VL | NR.
``bcast_b``  packed A on targets without a lane FMA (or VL not dividing NR):
             B values are broadcast, FMA is elementwise. C_reg[NR, MR/VL, VL],
             A_reg[MR/VL, VL], B_reg[NR, VL]; needs VL | MR.
``bcast_a``  A not packed: A values are broadcast per row, C is vectorized
             along j. C_reg[MR, NR/VL, VL], A_reg[MR, VL], B_reg[NR/VL, VL];
             needs VL | NR, any MR.

In ``generic`` mode the base kernel computes ``C = beta*C + A*(alpha*B)``
through the temporaries C_b and B_a; the same recipe is applied to the
compute nest while the scaling passes stay scalar.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

from .cursor import find_all
from .datasets import preset_shapes
from .errors import SchedulingError, UkfError
from .ir import Alloc, Assign, InstrCall, Loop, Precision, Proc, Read, Reduce, as_precision, const_value, get_stmt, walk
from .printer import parse_proc
from .schedule import ScheduleScript
from .targets import TargetLibrary, get_target

log = logging.getLogger(__name__)

PHASES = ("v1", "v2", "v3", "v4", "v5", "v6")


@dataclass(frozen=True)
class KernelSpec:
    mr: int
    nr: int
    prec: Precision = Precision.f32
    target: str = "neon_f32"
    packed_a: bool = True
    mode: str = "unit"  # unit | generic
    style: str | None = None  # derived when None

    def __post_init__(self):
        object.__setattr__(self, "prec", as_precision(self.prec))
        if self.mode not in ("unit", "generic"):
            raise ValueError(f"alpha/beta mode must be 'unit' or 'generic', got {self.mode!r}")
        if self.mr < 1 or self.nr < 1:
            raise ValueError("MR and NR must be positive")

    @property
    def lib(self) -> TargetLibrary:
        return get_target(self.target)

    @property
    def vl(self) -> int:
        return self.lib.vector_length

    @property
    def schedule_style(self) -> str:
        if self.style is not None:
            return self.style
        if not self.packed_a:
            return "bcast_a"
        if self.lib.by_kind("fma_lane") is not None and self.nr % self.vl == 0:
            return "lane"
        return "bcast_b"

    @property
    def symbol(self) -> str:
        s = f"gemm_ukr_{self.mr}x{self.nr}_{self.prec.value}_{self.target}"
        if self.schedule_style == "bcast_a":
            s += "_bcast"
        elif self.style is not None and self.style != replace(self, style=None).schedule_style:
            s += f"_{self.style}"
        if self.mode == "generic":
            s += "_generic"
        return s

    def validate(self) -> None:
        lib = self.lib
        if self.prec not in lib.precisions:
            raise SchedulingError(f"target {lib.name} does not support {self.prec.value}")
        vl = self.vl
        style = self.schedule_style
        if style in ("lane", "bcast_b") and self.mr % vl:
            raise SchedulingError(f"packed-A kernels need VL={vl} to divide MR={self.mr}")
        if style in ("lane", "bcast_a") and self.nr % vl:
            raise SchedulingError(f"{style} kernels need VL={vl} to divide NR={self.nr}")
        if style == "lane" and lib.by_kind("fma_lane") is None:
            raise SchedulingError(f"target {lib.name} has no lane FMA")
        if style not in ("lane", "bcast_b", "bcast_a"):
            raise SchedulingError(f"unknown schedule style {style!r}")

    def label(self) -> str:
        return f"{self.mr}x{self.nr}"


# --------------------------------------------------------------------------- #
# Base kernels


def base_proc(spec: KernelSpec) -> Proc:
    t = spec.prec.value
    if spec.mode == "unit":
        text = f"""
def gemm_ukr(M_R: size, N_R: size, K_R: size, A: {t}[K_R, M_R] @ DRAM, B: {t}[K_R, N_R] @ DRAM, C: inout({t}[N_R, M_R] @ DRAM)):
    for k in seq(0, K_R):
        for j in seq(0, N_R):
            for i in seq(0, M_R):
                C[j, i] += A[k, i] * B[k, j]
"""
    else:
        text = f"""
def gemm_ukr(M_R: size, N_R: size, K_R: size, alpha: {t} @ DRAM, beta: {t} @ DRAM, A: {t}[K_R, M_R] @ DRAM, B: {t}[K_R, N_R] @ DRAM, C: inout({t}[N_R, M_R] @ DRAM)):
    C_b: {t}[N_R, M_R] @ DRAM
    for cb_j in seq(0, N_R):
        for cb_i in seq(0, M_R):
            C_b[cb_j, cb_i] = C[cb_j, cb_i] * beta
    B_a: {t}[K_R, N_R] @ DRAM
    for ba_k in seq(0, K_R):
        for ba_j in seq(0, N_R):
            B_a[ba_k, ba_j] = B[ba_k, ba_j] * alpha
    for k in seq(0, K_R):
        for j in seq(0, N_R):
            for i in seq(0, M_R):
                C_b[j, i] += A[k, i] * B_a[k, j]
    for wb_j in seq(0, N_R):
        for wb_i in seq(0, M_R):
            C[wb_j, wb_i] = C_b[wb_j, wb_i]
"""
    return parse_proc(text)


# --------------------------------------------------------------------------- #
# Cursor helpers


def _cursor(p: Proc, pattern: str, pred=lambda s: True) -> str:
    """`pattern #n` addressing the first match satisfying `pred`."""
    hits = find_all(p, pattern)
    for n, path in enumerate(hits, 1):
        if pred(get_stmt(p.body, path)):
            return f"{pattern} #{n}"
    raise SchedulingError(f"recipe could not locate {pattern!r}")


def _loop_over(buf_w: str, buf_r: str | None = None, reduce: bool = False):
    """Predicate: a loop whose single leaf writes `buf_w` (reading `buf_r`)."""

    def pred(s):
        leaves = [x for _, x in walk([s]) if isinstance(x, (Assign, Reduce))]
        if len(leaves) != 1 or leaves[0].buf != buf_w:
            return False
        if reduce != isinstance(leaves[0], Reduce):
            return False
        if buf_r is not None:
            rhs = leaves[0].rhs
            return isinstance(rhs, Read) and rhs.buf == buf_r
        return True

    return pred


def _has_reduce(s) -> bool:
    return any(isinstance(x, Reduce) for _, x in walk([s]))


def _copy(buf_w: str, buf_r: str):
    return lambda s: isinstance(s, Assign) and s.buf == buf_w and isinstance(s.rhs, Read) and s.rhs.buf == buf_r


# --------------------------------------------------------------------------- #
# Schedules


@dataclass
class Recipe:
    spec: KernelSpec
    script: ScheduleScript
    snapshots: dict[str, Proc] = field(default_factory=dict)

    @property
    def proc(self) -> Proc:
        return self.script.current


def _names(spec: KernelSpec) -> tuple[str, str]:
    return ("C_b", "B_a") if spec.mode == "generic" else ("C", "B")


def _common_v1(sc: ScheduleScript, spec: KernelSpec):
    sc.phase("v1")
    sc.apply("rename", spec.symbol)
    sc.apply("partial_eval", {"M_R": spec.mr, "N_R": spec.nr})


def _stage_c(sc, spec, window, dims, levels):
    """Stage C into registers around the update and hoist the copies."""
    cn, _ = _names(spec)
    lib = spec.lib
    p = sc.apply("stage_mem", f"{cn}[_] += _", window, "C_reg")
    for size, idx in dims:
        sc.apply("expand_dim", "C_reg", str(size), idx)
    sc.apply("lift_alloc", "C_reg", levels)
    sc.apply("fission", _cursor(sc.current, "C_reg[_] = _", _copy("C_reg", cn)), "after", levels)
    sc.apply("fission", _cursor(sc.current, f"{cn}[_] = _", _copy(cn, "C_reg")), "before", levels)
    sc.apply("set_memory", "C_reg", lib.register_space.name)
    return p


def _replace_loop(sc, var, pred, kind):
    instr = sc.target.by_kind(kind)
    sc.apply("replace", _cursor(sc.current, f"for {var} in _: _", pred), instr.name)


def _stage_operand(sc, spec, window, name, dims, fission_levels, levels):
    sc.apply("stage_mem", "C_reg[_] += _", window, name)
    for size, idx in dims:
        sc.apply("expand_dim", name, str(size), idx)
    sc.apply("lift_alloc", name, levels)
    src = window.split("[")[0]
    sc.apply("fission", _cursor(sc.current, f"{name}[_] = _", _copy(name, src)), "after", fission_levels)


def _unroll_all(sc, vars_):
    while True:
        target = None
        for _, s in walk(sc.current.body):
            if isinstance(s, Loop) and s.var in vars_ and const_value(s.hi) is not None:
                target = s.var
                break
        if target is None:
            return
        sc.apply("unroll_loop", f"for {target} in _: _ #1")


def _lane(sc, spec):
    vl, mr, nr = spec.vl, spec.mr, spec.nr
    cn, bn = _names(spec)
    reg = spec.lib.register_space.name
    sc.phase("v2")
    sc.apply("divide_loop", "for i in _: _", vl, "it", "itt")
    sc.apply("divide_loop", "for j in _: _", vl, "jt", "jtt")
    sc.phase("v3")
    _stage_c(sc, spec, f"{cn}[{vl} * jt + jtt, {vl} * it + itt]",
             [(vl, "itt"), (mr // vl, "it"), (nr, f"{vl} * jt + jtt")], 5)
    _replace_loop(sc, "itt", _loop_over("C_reg", cn), "load")
    _replace_loop(sc, "itt", _loop_over(cn, "C_reg"), "store")
    sc.phase("v4")
    _stage_operand(sc, spec, f"A[k, {vl} * it + itt]", "A_reg", [(vl, "itt"), (mr // vl, "it")], 4, 5)
    _stage_operand(sc, spec, f"{bn}[k, {vl} * jt + jtt]", "B_reg", [(vl, "jtt"), (nr // vl, "jt")], 4, 5)
    sc.apply("set_memory", "A_reg", reg)
    sc.apply("set_memory", "B_reg", reg)
    _replace_loop(sc, "itt", _loop_over("A_reg", "A"), "load")
    _replace_loop(sc, "jtt", _loop_over("B_reg", bn), "load")
    sc.phase("v5")
    sc.apply("reorder_loops", _cursor(sc.current, "for jtt in _: _", _has_reduce))
    _replace_loop(sc, "itt", _loop_over("C_reg", reduce=True), "fma_lane")
    sc.phase("v6")
    _unroll_all(sc, {"it", "itt", "jt", "jtt"})


def _bcast_b(sc, spec):
    vl, mr, nr = spec.vl, spec.mr, spec.nr
    cn, bn = _names(spec)
    reg = spec.lib.register_space.name
    sc.phase("v2")
    sc.apply("divide_loop", "for i in _: _", vl, "it", "itt")
    sc.phase("v3")
    _stage_c(sc, spec, f"{cn}[j, {vl} * it + itt]", [(vl, "itt"), (mr // vl, "it"), (nr, "j")], 4)
    _replace_loop(sc, "itt", _loop_over("C_reg", cn), "load")
    _replace_loop(sc, "itt", _loop_over(cn, "C_reg"), "store")
    sc.phase("v4")
    _stage_operand(sc, spec, f"A[k, {vl} * it + itt]", "A_reg", [(vl, "itt"), (mr // vl, "it")], 3, 4)
    _stage_operand(sc, spec, f"{bn}[k, j]", "B_reg", [(vl, "itt"), (nr, "j")], 3, 4)
    sc.apply("set_memory", "A_reg", reg)
    sc.apply("set_memory", "B_reg", reg)
    _replace_loop(sc, "itt", _loop_over("A_reg", "A"), "load")
    _replace_loop(sc, "itt", _loop_over("B_reg", bn), "bcast")
    sc.phase("v5")
    _replace_loop(sc, "itt", _loop_over("C_reg", reduce=True), "fma")
    sc.phase("v6")
    _unroll_all(sc, {"it", "itt", "j"})


def _bcast_a(sc, spec):
    vl, mr, nr = spec.vl, spec.mr, spec.nr
    cn, bn = _names(spec)
    reg = spec.lib.register_space.name
    sc.phase("v2")
    sc.apply("divide_loop", "for j in _: _", vl, "jt", "jtt")
    sc.apply("reorder_loops", "jtt i")
    sc.phase("v3")
    _stage_c(sc, spec, f"{cn}[{vl} * jt + jtt, i]", [(vl, "jtt"), (nr // vl, "jt"), (mr, "i")], 4)
    if mr == 1:
        # only a single-column C tile is contiguous along j
        _replace_loop(sc, "jtt", _loop_over("C_reg", cn), "load")
        _replace_loop(sc, "jtt", _loop_over(cn, "C_reg"), "store")
    sc.phase("v4")
    _stage_operand(sc, spec, "A[k, i]", "A_reg", [(vl, "jtt"), (mr, "i")], 3, 4)
    _stage_operand(sc, spec, f"{bn}[k, {vl} * jt + jtt]", "B_reg", [(vl, "jtt"), (nr // vl, "jt")], 3, 4)
    sc.apply("set_memory", "A_reg", reg)
    sc.apply("set_memory", "B_reg", reg)
    _replace_loop(sc, "jtt", _loop_over("A_reg", "A"), "bcast")
    _replace_loop(sc, "jtt", _loop_over("B_reg", bn), "load")
    sc.phase("v5")
    _replace_loop(sc, "jtt", _loop_over("C_reg", reduce=True), "fma")
    sc.phase("v6")
    _unroll_all(sc, {"i", "jt", "jtt"})


_STYLES = {"lane": _lane, "bcast_b": _bcast_b, "bcast_a": _bcast_a}


def schedule(spec: KernelSpec) -> Recipe:
    spec.validate()
    sc = ScheduleScript(base_proc(spec), spec.lib)
    sc.meta.update(
        {
            "mr": str(spec.mr),
            "nr": str(spec.nr),
            "precision": spec.prec.value,
            "target": spec.target,
            "packed_a": "1" if spec.packed_a else "0",
            "mode": spec.mode,
            "style": spec.schedule_style,
        }
    )
    _common_v1(sc, spec)
    try:
        _STYLES[spec.schedule_style](sc, spec)
    except UkfError as exc:
        raise type(exc)(f"{spec.symbol}: step {len(sc.steps) + 1} failed: {exc}") from exc
    return Recipe(spec, sc, sc.snapshots())


def schedule_packed(spec: KernelSpec) -> tuple[Proc, ScheduleScript]:
    if not spec.packed_a:
        raise SchedulingError("schedule_packed needs a packed-A spec")
    r = schedule(spec)
    return r.proc, r.script


def schedule_broadcast(spec: KernelSpec) -> tuple[Proc, ScheduleScript]:
    if spec.packed_a and spec.mr % spec.vl == 0:
        raise SchedulingError("schedule_broadcast is for non-packed A or VL not dividing MR")
    if spec.packed_a:
        spec = KernelSpec(spec.mr, spec.nr, spec.prec, spec.target, False, spec.mode, spec.style)
    r = schedule(spec)
    return r.proc, r.script


def spec_from_meta(meta: dict[str, str]) -> KernelSpec:
    return KernelSpec(
        int(meta["mr"]),
        int(meta["nr"]),
        Precision(meta.get("precision", "f32")),
        meta.get("target", "neon_f32"),
        meta.get("packed_a", "1") == "1",
        meta.get("mode", "unit"),
        meta.get("style"),
    )


def auto_spec(mr: int, nr: int, prec="f32", target: str = "neon_f32", mode: str = "unit") -> KernelSpec:
    """Packed A when the vector length divides MR, broadcast otherwise."""
    s = KernelSpec(mr, nr, prec, target, True, mode)
    if mr % s.vl:
        s = KernelSpec(mr, nr, prec, target, False, mode)
    return s


# --------------------------------------------------------------------------- #
# Families and presets

PAPER_FAMILY = tuple(preset_shapes("paper-family"))
VGG_FAMILY = tuple(preset_shapes("vgg-family"))
TEST_MATRIX = tuple(preset_shapes("test-matrix"))
PRESETS = ("paper-8x12", "paper-family", "vgg-family")


def preset(name: str, prec="f32", target: str = "neon_f32", mode: str = "unit") -> list[KernelSpec]:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; known: {', '.join(PRESETS)}")
    return [auto_spec(mr, nr, prec, target, mode) for mr, nr in preset_shapes(name)]


@dataclass
class FamilyResult:
    ok: dict = field(default_factory=dict)  # spec -> (Proc, EmittedUnit)
    errors: dict = field(default_factory=dict)  # spec -> exception


def generate_family(specs, harness_k: int | None = 8) -> FamilyResult:
    """Schedule and emit every spec; failures are collected per spec."""
    from .codegen import emit_unit

    out = FamilyResult()
    for spec in specs:
        try:
            r = schedule(spec)
            sizes = {"K_R": harness_k} if harness_k else None
            out.ok[spec] = (r.proc, emit_unit(r.proc, spec.lib, sizes, symbol=spec.symbol))
        except (UkfError, ValueError) as exc:
            log.warning("kernel %s failed: %s", spec.symbol, exc)
            out.errors[spec] = exc
    return out


def count_ops(p: Proc, lib: TargetLibrary) -> dict:
    """Instruction calls by kind, split into inside / outside the k loop."""
    counts = {"in_k": {}, "out_k": {}}

    def go(stmts, in_k):
        for s in stmts:
            if isinstance(s, Loop):
                go(s.body, in_k or s.var == "k")
            elif isinstance(s, InstrCall):
                kind = lib.instr(s.instr).kind
                d = counts["in_k" if in_k else "out_k"]
                d[kind] = d.get(kind, 0) + 1

    go(p.body, False)
    return counts


def register_count(p: Proc) -> int:
    """Vector registers allocated (product of the non-lane dims)."""
    n = 0
    for _, s in walk(p.body):
        if isinstance(s, Alloc) and s.decl.mem.is_register:
            k = 1
            for d in s.decl.dims[:-1]:
                k *= const_value(d)
            n += k
    return n
