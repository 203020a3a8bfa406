"""Dependence analysis by concrete enumeration.

Legality of loop reordering and fission is decided by executing the affected
region symbolically at small instantiations of the size parameters: every
statement instance gets a timestamp (its position vector in the original
nest) and the list of elements it touches. A transformation is legal when
every pair of conflicting accesses (same element, at least one write, not
both ``+=`` accumulations) keeps its relative order.

Loop variables bound outside the region are fixed at 0: indices are affine,
so the outer contribution is the same offset on both sides of any
comparison and cannot create or remove a conflict.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

from .errors import DependenceViolation, InterpError, SchedulingError
from .ir import Alloc, Assign, InstrCall, Loop, Proc, Read, Reduce, affine, expr_reads

READ, WRITE, RED = "r", "w", "red"


@dataclass
class Inst:
    ts: tuple
    stmt: object
    env: dict
    acc: list = field(default_factory=list)  # (key, kind)


def size_instantiations(p: Proc) -> list[dict[str, int]]:
    """Representative size assignments used for exhaustive checks."""
    names = list(p.size_params)
    if not names:
        return [{}]
    out = [{n: v for n in names} for v in (1, 2, 3)]
    out.append({n: 2 + k for k, n in enumerate(names)})
    return out


class _Enum:
    def __init__(self, sizes, target):
        self.sizes = sizes
        self.target = target
        self.gens: dict[str, tuple] = {}
        self.out: list[Inst] = []
        self.tag = 0
        self.cache: dict = {}

    def ev(self, e, env) -> int:
        a = self.cache.get(e)
        if a is None:
            a = self.cache[e] = affine(e)
        return a.eval(env)

    def key(self, buf, idx, env):
        return (buf, self.gens.get(buf), tuple(self.ev(i, env) for i in idx))

    def leaf(self, s, env, ts):
        inst = Inst(ts, s, dict(env))
        for r in expr_reads(s.rhs):
            inst.acc.append((self.key(r.buf, r.idx, env), READ))
        inst.acc.append((self.key(s.buf, s.idx, env), RED if isinstance(s, Reduce) else WRITE))
        self.out.append(inst)

    def block(self, stmts, env, prefix):
        for k, s in enumerate(stmts):
            ts = prefix + (k,)
            if isinstance(s, Loop):
                hi = self.ev(s.hi, env)
                for v in range(hi):
                    self.block(s.body, {**env, s.var: v}, ts + (v,))
            elif isinstance(s, Alloc):
                self.gens[s.decl.name] = ts
            elif isinstance(s, (Assign, Reduce)):
                self.leaf(s, env, ts)
            elif isinstance(s, InstrCall):
                from .interp import inline_call

                instr = self.target.get(s.instr) if self.target is not None else None
                if instr is None:
                    raise DependenceViolation(
                        f"cannot analyze call to {s.instr!r} without its target library"
                    )
                self.tag += 1
                try:
                    body = inline_call(s, instr, f"_d{self.tag}")
                except InterpError as exc:
                    raise SchedulingError(str(exc)) from None
                self.block(body, env, ts)
            else:
                raise SchedulingError(f"unknown statement {s!r}")


def instances(stmts, sizes: dict[str, int], target=None, env: dict | None = None) -> list[Inst]:
    e = _Enum(sizes, target)
    e.block(tuple(stmts), {**sizes, **(env or {})}, ())
    return e.out


def first_violation(insts: list[Inst], new_ts) -> str | None:
    """Describe a conflicting pair whose order changes under ``new_ts``."""
    by_key = defaultdict(list)
    for n, inst in enumerate(insts):
        nts = new_ts(inst.ts)
        for key, kind in inst.acc:
            by_key[key].append((inst.ts, nts, kind, n))
    for key, lst in by_key.items():
        writes = [x for x in lst if x[2] != READ]
        if not writes:
            continue
        for a in writes:
            for b in lst:
                if a[3] == b[3] or (a[2] == RED and b[2] == RED):
                    continue
                if (a[0] < b[0]) != (a[1] < b[1]):
                    buf, _, elem = key
                    return f"{buf}{list(elem)}: {a[2]} and {b[2]} accesses change order"
    return None


def buffer_effects(insts: list[Inst]) -> tuple[set, set, bool]:
    reads, writes, red = set(), set(), False
    for inst in insts:
        for (buf, _, _), kind in inst.acc:
            if kind == READ:
                reads.add(buf)
            else:
                writes.add(buf)
                if kind == RED:
                    reads.add(buf)
                    red = True
    return reads, writes, red


def idempotent(insts: list[Inst]) -> bool:
    r, w, red = buffer_effects(insts)
    return not red and not (r & w)


# --------------------------------------------------------------------------- #
# Transformations expressed on timestamps (region = [the loop], ts[0] == 0)


def reorder_ts(ts: tuple) -> tuple:
    # (0, v_outer, 0, v_inner, ...) -> (0, v_inner, 0, v_outer, ...)
    if len(ts) < 4:
        return ts
    return (ts[0], ts[3], ts[2], ts[1]) + ts[4:]


def fission_ts(gap: int):
    def f(ts: tuple) -> tuple:
        # (0, v, s, ...) -> (half, v, s, ...)
        return (0 if ts[2] < gap else 1,) + ts[1:]

    return f


def check_reorder(p: Proc, outer: Loop, target=None) -> None:
    for sizes in size_instantiations(p):
        insts = instances([outer], sizes, target, _outer_env(outer))
        bad = first_violation(insts, reorder_ts)
        if bad:
            raise DependenceViolation(f"reordering {outer.var} and {outer.body[0].var}: {bad}")


def _outer_env(loop: Loop) -> dict:
    from .ir import stmt_free_vars

    return {v: 0 for v in stmt_free_vars([loop])}


def _copy_pairs(insts: list[Inst]):
    pairs = []
    for inst in insts:
        s = inst.stmt
        if not (isinstance(s, Assign) and isinstance(s.rhs, Read)) or len(inst.acc) != 2:
            return None
        (src, _), (dst, _) = inst.acc
        pairs.append((dst, src))
    return pairs


def _round_trip(loop: Loop, P, Q, sizes, target) -> bool:
    """P copies S into R; every iteration of Q ends by copying R back to S."""
    env = _outer_env(loop)
    pinsts = instances(P, sizes, target, env)
    pairs = _copy_pairs(pinsts)
    if not pairs:
        return False
    dsts = [d for d, _ in pairs]
    srcs = [s for _, s in pairs]
    if len(set(dsts)) != len(dsts) or len(set(srcs)) != len(srcs):
        return False
    hi = affine(loop.hi).eval(sizes)
    for v in range(hi):
        qinsts = instances(Q, sizes, target, {**env, loop.var: v})
        last = {}
        for n, inst in enumerate(qinsts):
            for key, _ in inst.acc:
                last[key] = n
        for dst, src in pairs:
            if dst not in last and src not in last:
                continue
            n = last.get(dst)
            if n is None or last.get(src) != n:
                return False
            s = qinsts[n]
            if not (isinstance(s.stmt, Assign) and s.acc == [(dst, READ), (src, WRITE)]):
                return False
    return True


def check_fission(p: Proc, loop: Loop, gap: int, target=None) -> None:
    """Legality of ``for v: {P; Q}`` -> ``for v: P; for v: Q``."""
    from .ir import stmt_free_vars

    P, Q = loop.body[:gap], loop.body[gap:]
    allocs_p = {s.decl.name for s in P if isinstance(s, Alloc)}
    if allocs_p:
        from .ir import stmt_buffers

        hidden = allocs_p & stmt_buffers(Q)
        if hidden:
            raise DependenceViolation(f"fission would hide allocation of {sorted(hidden)[0]} from its uses")
    p_free = loop.var in stmt_free_vars(P)
    q_free = loop.var in stmt_free_vars(Q)
    for sizes in size_instantiations(p):
        env = _outer_env(loop)
        insts = instances([loop], sizes, target, env)
        if first_violation(insts, fission_ts(gap)) is None:
            continue
        pi = instances(P, sizes, target, {**env, loop.var: 0})
        qi = instances(Q, sizes, target, {**env, loop.var: 0})
        rp, wp, _ = buffer_effects(pi)
        rq, wq, _ = buffer_effects(qi)
        # invariant producer: P recomputes the same values every iteration
        if not p_free and idempotent(pi) and not (wq & (rp | wp)):
            continue
        # dead copy-out: only the last Q survives and it reads nothing Q writes
        if not q_free and idempotent(qi) and not (wq & (rp | wp | rq)):
            continue
        if not p_free and _round_trip(loop, P, Q, sizes, target):
            continue
        bad = first_violation(insts, fission_ts(gap))
        raise DependenceViolation(f"fission of loop {loop.var}: {bad}")


def droppable(p: Proc, loop: Loop, half, target=None) -> bool:
    """`for v: half` equals `half` (v unused, idempotent, at least one trip)."""
    from .check import nonneg_for_all_sizes
    from .ir import Affine, stmt_free_vars

    if loop.var in stmt_free_vars(half):
        return False
    if not nonneg_for_all_sizes(affine(loop.hi) - Affine((), 1)):
        return False
    for sizes in size_instantiations(p)[:1]:
        if not idempotent(instances(half, sizes, target, _outer_env(loop))):
            return False
    return any(True for _ in half)
