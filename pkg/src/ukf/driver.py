"""BLIS-style five-loop GEMM over generated micro-kernels.

Loop order jc (nc) -> pc (kc) -> ic (mc) -> jr (nr') -> ir (mr') around the
micro-kernel. Edge tiles are served by smaller kernels of the family. All
tiles of one kernel shape inside an (jc, pc, ic) block run as a single
batched interpreter call, which is semantically the same as calling them
one after another since tiles write disjoint parts of C.

The kernels see C transposed (``C[nr, mr]``), A micro-panels as
``[kc, mr]`` and B micro-panels as ``[kc, nr]``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property, lru_cache

import numpy as np

from .errors import DegenerateCacheWarning, DimensionMismatch, MissingKernelForTile, ShapeMismatch
from .interp import run_batched
from .ir import Precision, as_precision
from .recipes import KernelSpec, auto_spec, preset_shapes, schedule
from .targets import get_target

# --------------------------------------------------------------------------- #
# Shapes and cache model


@dataclass(frozen=True)
class GemmShape:
    m: int
    n: int
    k: int
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if min(self.m, self.n, self.k) < 1:
            raise ShapeMismatch(f"GEMM dimensions must be positive, got {self.m}x{self.n}x{self.k}")


@dataclass(frozen=True)
class CacheParams:
    mc: int
    kc: int
    nc: int
    mr: int
    nr: int

    def __post_init__(self):
        if min(self.mc, self.kc, self.nc, self.mr, self.nr) < 1:
            raise ValueError("cache parameters must be positive")
        if self.mc % self.mr or self.nc % self.nr:
            raise ValueError(f"mc must be a multiple of mr and nc of nr, got {self}")


@dataclass(frozen=True)
class CacheLevel:
    capacity: int  # bytes
    occupancy: float  # fraction of the level given to one operand buffer

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("cache capacity must be positive")
        if not 0.0 < self.occupancy <= 1.0:
            raise ValueError(f"occupancy fraction must lie in (0, 1], got {self.occupancy}")

    @property
    def budget(self) -> float:
        return self.capacity * self.occupancy


@dataclass(frozen=True)
class CacheDescriptor:
    l1: CacheLevel
    l2: CacheLevel
    l3: CacheLevel
    name: str = "custom"

    def __post_init__(self):
        if not self.l1.capacity < self.l2.capacity < self.l3.capacity:
            raise ValueError("cache capacities must strictly increase from L1 to L3")

    def scaled(self, level: str, factor: float) -> "CacheDescriptor":
        lv = getattr(self, level)
        new = CacheLevel(int(lv.capacity * factor), lv.occupancy)
        return CacheDescriptor(**{**self.__dict__, level: new, "name": f"{self.name}-{level}x{factor:g}"})

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            **{lv: {"capacity": getattr(self, lv).capacity, "occupancy": getattr(self, lv).occupancy}
               for lv in ("l1", "l2", "l3")},
        }

    @staticmethod
    def from_dict(d: dict) -> "CacheDescriptor":
        lv = {k: CacheLevel(int(d[k]["capacity"]), float(d[k]["occupancy"])) for k in ("l1", "l2", "l3")}
        return CacheDescriptor(name=d.get("name", "custom"), **lv)


KiB, MiB = 1024, 1024 * 1024

# Carmel: 64 KiB L1D, 2 MiB L2 per core pair, 4 MiB L3. The L1 fraction is
# calibrated so that (8 + 12) * kc * 4 bytes fills it exactly at kc = 512.
CACHE_PRESETS = {
    "carmel": CacheDescriptor(CacheLevel(64 * KiB, 0.625), CacheLevel(2 * MiB, 0.5), CacheLevel(4 * MiB, 0.5), "carmel"),
    "generic": CacheDescriptor(CacheLevel(32 * KiB, 0.5), CacheLevel(1 * MiB, 0.5), CacheLevel(8 * MiB, 0.5), "generic"),
}


def select_cache_params(cache: CacheDescriptor, mr: int, nr: int, precision="f32") -> CacheParams:
    """Heuristic blocking: kc from L1, then mc from L2 and nc from L3.

    kc is the largest value with (mr + nr) * kc * bytes <= L1 budget, mc the
    largest multiple of mr with mc * kc * bytes <= L2 budget, nc the largest
    multiple of nr with nc * kc * bytes <= L3 budget. Levels too small for a
    single micro-panel are clamped to the minimum with a warning.
    """
    b = as_precision(precision).nbytes
    kc = math.floor(cache.l1.budget / ((mr + nr) * b))
    if kc < 1:
        warnings.warn(f"L1 cannot hold one {mr}x{nr} k-slice; clamping kc to 1", DegenerateCacheWarning, stacklevel=2)
        kc = 1
    mc = math.floor(cache.l2.budget / (kc * b)) // mr * mr
    if mc < mr:
        warnings.warn(f"L2 cannot hold one {mr}x{kc} micro-panel; clamping mc to {mr}", DegenerateCacheWarning,
                      stacklevel=2)
        mc = mr
    nc = math.floor(cache.l3.budget / (kc * b)) // nr * nr
    if nc < nr:
        warnings.warn(f"L3 cannot hold one {kc}x{nr} micro-panel; clamping nc to {nr}", DegenerateCacheWarning,
                      stacklevel=2)
        nc = nr
    return CacheParams(mc, kc, nc, mr, nr)


def capacity_ok(cache: CacheDescriptor, p: CacheParams, precision="f32") -> bool:
    b = as_precision(precision).nbytes
    return (
        (p.mr + p.nr) * p.kc * b <= cache.l1.budget
        and p.mc * p.kc * b <= cache.l2.budget
        and p.nc * p.kc * b <= cache.l3.budget
    )


# --------------------------------------------------------------------------- #
# Packing


@dataclass
class PackedPanel:
    """Micro-panels laid out one after another.

    ``layout`` is ``A_panels`` (panel t holds rows of width widths[t], element
    (i, p) at offset + p * w + i) or ``B_panels`` (element (p, j) at
    offset + p * w + j).
    """

    layout: str
    kc: int
    widths: tuple[int, ...]
    data: np.ndarray
    origin: str = ""

    @cached_property
    def offsets(self) -> list[int]:
        out, pos = [], 0
        for w in self.widths:
            out.append(pos)
            pos += w * self.kc
        return out

    def micro(self, t: int) -> np.ndarray:
        """Micro-panel t as a [kc, w] array (unit stride within the panel)."""
        off, w = self.offsets[t], self.widths[t]
        return self.data[off : off + w * self.kc].reshape(self.kc, w)


def pack_A_tiles(block: np.ndarray, widths, origin: str = "A") -> PackedPanel:
    mc, kc = block.shape
    if sum(widths) != mc:
        raise DimensionMismatch(f"micro-panel widths {list(widths)} do not cover {mc} rows")
    parts, i0 = [], 0
    for w in widths:
        parts.append(np.ascontiguousarray(block[i0 : i0 + w, :].T).ravel())
        i0 += w
    data = np.concatenate(parts) if parts else np.zeros(0, block.dtype)
    return PackedPanel("A_panels", kc, tuple(widths), data, origin)


def pack_B_tiles(block: np.ndarray, widths, origin: str = "B") -> PackedPanel:
    kc, nc = block.shape
    if sum(widths) != nc:
        raise DimensionMismatch(f"micro-panel widths {list(widths)} do not cover {nc} columns")
    parts, j0 = [], 0
    for w in widths:
        parts.append(np.ascontiguousarray(block[:, j0 : j0 + w]).ravel())
        j0 += w
    data = np.concatenate(parts) if parts else np.zeros(0, block.dtype)
    return PackedPanel("B_panels", kc, tuple(widths), data, origin)


def pack_A(block, mr: int) -> PackedPanel:
    block = np.asarray(block)
    if block.ndim != 2 or block.shape[0] % mr:
        raise DimensionMismatch(f"A block of shape {block.shape} cannot be split into {mr}-row micro-panels")
    return pack_A_tiles(block, (mr,) * (block.shape[0] // mr))


def pack_B(block, nr: int) -> PackedPanel:
    block = np.asarray(block)
    if block.ndim != 2 or block.shape[1] % nr:
        raise DimensionMismatch(f"B block of shape {block.shape} cannot be split into {nr}-column micro-panels")
    return pack_B_tiles(block, (nr,) * (block.shape[1] // nr))


def unpack(panel: PackedPanel) -> np.ndarray:
    mats = [panel.micro(t) for t in range(len(panel.widths))]
    if panel.layout == "A_panels":
        return np.concatenate([m.T for m in mats], axis=0) if mats else np.zeros((0, panel.kc))
    return np.concatenate(mats, axis=1) if mats else np.zeros((panel.kc, 0))


# --------------------------------------------------------------------------- #
# Kernel families and edge tiling


class KernelFamily:
    """A set of micro-kernel tiles sharing precision and target.

    Unit kernels (C += A B) are used when alpha = beta = 1 for a block,
    generic kernels otherwise; both are scheduled on first use.
    """

    def __init__(self, tiles, prec="f32", target: str = "neon_f32"):
        self.tiles = tuple(sorted({(int(a), int(b)) for a, b in tiles}, key=lambda t: (-t[0] * t[1], -t[1])))
        if not self.tiles:
            raise ValueError("a kernel family needs at least one tile")
        self.prec = as_precision(prec)
        self.target = get_target(target).name

    @classmethod
    def preset(cls, name: str, prec="f32", target: str = "neon_f32") -> "KernelFamily":
        return cls(preset_shapes(name), prec, target)

    @property
    def main(self) -> tuple[int, int]:
        return self.tiles[0]

    def spec(self, mr: int, nr: int, generic: bool) -> KernelSpec:
        return auto_spec(mr, nr, self.prec.value, self.target, "generic" if generic else "unit")

    def kernel(self, mr: int, nr: int, generic: bool):
        if (mr, nr) not in self.tiles:
            raise MissingKernelForTile(f"family has no {mr}x{nr} kernel")
        return _scheduled(self.spec(mr, nr, generic))

    def __repr__(self) -> str:
        return f"KernelFamily({[f'{a}x{b}' for a, b in self.tiles]}, {self.prec.value}, {self.target})"


@lru_cache(maxsize=None)
def _scheduled(spec: KernelSpec):
    return schedule(spec).proc


def _decompose(total: int, options) -> list[int] | None:
    """Greedy largest-first split of `total` into `options`, with lookahead.

    At each step the largest option that still leaves a coverable remainder
    is taken; returns None if no split exists.
    """
    opts = sorted(set(options), reverse=True)
    ok = [False] * (total + 1)
    ok[0] = True
    for r in range(1, total + 1):
        ok[r] = any(o <= r and ok[r - o] for o in opts)
    if not ok[total]:
        return None
    out, r = [], total
    while r:
        o = next(o for o in opts if o <= r and ok[r - o])
        out.append(o)
        r -= o
    return out


@dataclass(frozen=True)
class TilePlan:
    """Column strips (width nr') and, per strip width, the row split (mr')."""

    cols: tuple[int, ...]
    rows: dict = field(default_factory=dict)  # nr' -> tuple of mr'

    def tiles(self):
        """(i0, j0, mr', nr') for every tile, jr outer, ir inner."""
        j0 = 0
        for nr in self.cols:
            i0 = 0
            for mr in self.rows[nr]:
                yield i0, j0, mr, nr
                i0 += mr
            j0 += nr


def plan_tiles(mb: int, nb: int, tiles) -> TilePlan:
    by_nr: dict[int, list[int]] = {}
    for mr, nr in tiles:
        by_nr.setdefault(nr, []).append(mr)
    rows = {}
    for nr, mrs in by_nr.items():
        split = _decompose(mb, mrs)
        if split is not None:
            rows[nr] = tuple(split)
    cols = _decompose(nb, rows) if rows else None
    if cols is None:
        have = ", ".join(f"{a}x{b}" for a, b in sorted(tiles))
        raise MissingKernelForTile(f"cannot tile a {mb}x{nb} block of C with kernels {{{have}}}")
    return TilePlan(tuple(cols), {nr: rows[nr] for nr in set(cols)})


# --------------------------------------------------------------------------- #
# GEMM


@dataclass
class GemmStats:
    kernel_calls: dict = field(default_factory=dict)  # (mr, nr, mode) -> tiles executed
    blocks: int = 0
    padded: int = 0

    def add(self, key, n: int) -> None:
        self.kernel_calls[key] = self.kernel_calls.get(key, 0) + n


def _run_group(family: KernelFamily, mr: int, nr: int, A_p, B_p, C_t, alpha: float, beta: float, kc: int):
    generic = not (alpha == 1 and beta == 1)
    proc = family.kernel(mr, nr, generic)
    arrays = {"A": A_p, "B": B_p, "C": C_t}
    if generic:
        batch = C_t.shape[0]
        arrays["alpha"] = np.full(batch, alpha, np.float32)
        arrays["beta"] = np.full(batch, beta, np.float32)
    return run_batched(proc, {"K_R": kc}, arrays, target=family.target)["C"], generic


def _padded_plan(mb: int, nb: int, tiles) -> tuple[int, int, TilePlan]:
    """Smallest (mb', nb') >= (mb, nb) that the family can tile exactly."""
    max_mr = max(t[0] for t in tiles)
    max_nr = max(t[1] for t in tiles)
    best = None
    for mp in range(mb, mb + max_mr + 1):
        for np_ in range(nb, nb + max_nr + 1):
            if best is not None and mp * np_ >= best[0] * best[1]:
                continue
            try:
                plan = plan_tiles(mp, np_, tiles)
            except MissingKernelForTile:
                continue
            best = (mp, np_, plan)
    if best is None:
        raise MissingKernelForTile(f"no padded tiling of a {mb}x{nb} block exists")
    return best


EDGE_POLICIES = ("family", "pad")


def gemm(A, B, C, shape: GemmShape | None = None, params: CacheParams | None = None,
         family: KernelFamily | None = None, target: str | None = None, stats: GemmStats | None = None,
         edge: str = "family") -> np.ndarray:
    """C' = alpha A B + beta C through packed, blocked micro-kernel calls.

    beta is applied on the first kc block only. With beta = 0 the initial
    contents of C are never read. ``edge="family"`` requires the family to
    tile every block exactly; ``edge="pad"`` zero-pads blocks the family
    cannot tile (BLIS-style padded micro-panels plus a scratch C tile).
    """
    if edge not in EDGE_POLICIES:
        raise ValueError(f"edge policy must be one of {EDGE_POLICIES}")
    A = np.asarray(A, dtype=np.float32)
    B = np.asarray(B, dtype=np.float32)
    C = np.asarray(C, dtype=np.float32)
    if A.ndim != 2 or B.ndim != 2 or C.ndim != 2:
        raise ShapeMismatch("A, B and C must be matrices")
    if shape is None:
        shape = GemmShape(A.shape[0], B.shape[1], A.shape[1])
    if A.shape != (shape.m, shape.k) or B.shape != (shape.k, shape.n) or C.shape != (shape.m, shape.n):
        raise ShapeMismatch(
            f"operands A{A.shape} B{B.shape} C{C.shape} do not match {shape.m}x{shape.n}x{shape.k}"
        )
    family = family or KernelFamily.preset("paper-family", target=target or "neon_f32")
    if target is not None and get_target(target).name != family.target:
        raise ValueError(f"family targets {family.target}, gemm asked for {target}")
    mr0, nr0 = family.main
    if params is None:
        params = select_cache_params(CACHE_PRESETS["carmel"], mr0, nr0, family.prec)
    alpha, beta = float(shape.alpha), float(shape.beta)
    out = C.copy() if beta != 0 else np.zeros_like(C)
    stats = stats if stats is not None else GemmStats()
    plans: dict[tuple[int, int], tuple[int, int, TilePlan]] = {}
    for jc in range(0, shape.n, params.nc):
        nb = min(params.nc, shape.n - jc)
        for pc in range(0, shape.k, params.kc):
            kb = min(params.kc, shape.k - pc)
            b_eff = (beta if beta != 0 else 1.0) if pc == 0 else 1.0
            for ic in range(0, shape.m, params.mc):
                mb = min(params.mc, shape.m - ic)
                got = plans.get((mb, nb))
                if got is None:
                    try:
                        got = (mb, nb, plan_tiles(mb, nb, family.tiles))
                    except MissingKernelForTile:
                        if edge != "pad":
                            raise
                        got = _padded_plan(mb, nb, family.tiles)
                    plans[(mb, nb)] = got
                mp, np_, plan = got
                a_blk = A[ic : ic + mb, pc : pc + kb]
                b_blk = B[pc : pc + kb, jc : jc + nb]
                c_blk = out[ic : ic + mb, jc : jc + nb]
                if (mp, np_) != (mb, nb):
                    a_blk = np.pad(a_blk, ((0, mp - mb), (0, 0)))
                    b_blk = np.pad(b_blk, ((0, 0), (0, np_ - nb)))
                    scratch = np.pad(c_blk, ((0, mp - mb), (0, np_ - nb)))
                    _block(a_blk, b_blk, scratch, family, plan, kb, alpha, b_eff, stats)
                    c_blk[...] = scratch[:mb, :nb]
                    stats.padded += 1
                else:
                    _block(a_blk, b_blk, c_blk, family, plan, kb, alpha, b_eff, stats)
                stats.blocks += 1
    return out


def _block(a_blk, b_blk, c_blk, family, plan: TilePlan, kb, alpha, beta, stats: GemmStats):
    """Pack one (jc, pc, ic) block and run its tiles; updates c_blk in place."""
    Bp = pack_B_tiles(b_blk, plan.cols)
    Aps = {nr: pack_A_tiles(a_blk, rows) for nr, rows in plan.rows.items()}
    col_index, j0 = {}, 0
    for t, nr in enumerate(plan.cols):
        col_index[j0] = t
        j0 += nr
    row_index: dict[int, dict[int, int]] = {}
    for nr, rows in plan.rows.items():
        row_index[nr], i0 = {}, 0
        for t, mr in enumerate(rows):
            row_index[nr][i0] = t
            i0 += mr
    groups: dict[tuple[int, int], list] = {}
    for i0, j0, mr, nr in plan.tiles():
        groups.setdefault((mr, nr), []).append((i0, j0))
    for (mr, nr), where in sorted(groups.items(), key=lambda g: (-g[0][0] * g[0][1], -g[0][1])):
        A_p = np.stack([Aps[nr].micro(row_index[nr][i0]) for i0, _ in where])
        B_p = np.stack([Bp.micro(col_index[j0]) for _, j0 in where])
        C_t = np.stack([c_blk[i0 : i0 + mr, j0 : j0 + nr].T for i0, j0 in where])
        res, generic = _run_group(family, mr, nr, A_p, B_p, C_t, alpha, beta, kb)
        for (i0, j0), tile in zip(where, res):
            c_blk[i0 : i0 + mr, j0 : j0 + nr] = tile.T
        stats.add((mr, nr, "generic" if generic else "unit"), len(where))


def reference_gemm(A, B, C, alpha=1, beta=1) -> np.ndarray:
    """Exact integer oracle: alpha A B + beta C in int64 (beta = 0 ignores C)."""
    Ai = np.asarray(A).astype(np.int64)
    Bi = np.asarray(B).astype(np.int64)
    res = int(alpha) * (Ai @ Bi)
    if beta != 0:
        res = res + int(beta) * np.asarray(C).astype(np.int64)
    return res


def naive_gemm(A, B, C, alpha=1, beta=1) -> np.ndarray:
    """Plain triple loop in Python integers (slow; for small shapes)."""
    m, k = len(A), len(A[0])
    n = len(B[0])
    out = [[0] * n for _ in range(m)]
    for i in range(m):
        for j in range(n):
            acc = 0
            for p in range(k):
                acc += int(A[i][p]) * int(B[p][j])
            out[i][j] = int(alpha) * acc + (int(beta) * int(C[i][j]) if beta != 0 else 0)
    return np.array(out, dtype=np.int64)


def bitwise_equal(result: np.ndarray, oracle: np.ndarray) -> bool:
    a = np.ascontiguousarray(result, dtype=np.float32)
    b = np.ascontiguousarray(oracle.astype(np.float32))
    return a.shape == b.shape and np.array_equal(a.view(np.uint32), b.view(np.uint32))


def random_int_operands(rng: np.random.Generator, m: int, n: int, k: int, lo: int = -2, hi: int = 2):
    A = rng.integers(lo, hi + 1, size=(m, k)).astype(np.float32)
    B = rng.integers(lo, hi + 1, size=(k, n)).astype(np.float32)
    C = rng.integers(lo, hi + 1, size=(m, n)).astype(np.float32)
    return A, B, C


__all__ = [
    "CACHE_PRESETS",
    "EDGE_POLICIES",
    "CacheDescriptor",
    "CacheLevel",
    "CacheParams",
    "GemmShape",
    "GemmStats",
    "KernelFamily",
    "PackedPanel",
    "Precision",
    "TilePlan",
    "bitwise_equal",
    "capacity_ok",
    "gemm",
    "naive_gemm",
    "pack_A",
    "pack_B",
    "pack_A_tiles",
    "pack_B_tiles",
    "plan_tiles",
    "random_int_operands",
    "reference_gemm",
    "select_cache_params",
    "unpack",
]
