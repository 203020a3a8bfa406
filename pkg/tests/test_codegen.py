from __future__ import annotations

import re
import subprocess
from pathlib import Path

import numpy as np
import pytest

from conftest import needs_toolchain, recipe
from ukf.codegen import emit, emit_harness, emit_unit, harness_inputs, naive_reference, splitmix_values
from ukf.errors import NonConstRegisterDim, UnresolvedInstr
from ukf.interp import run_batched
from ukf.printer import parse_proc
from ukf.recipes import count_ops
from ukf.targets import get_target
from ukf.toolchain import harness_plan, run_harness, syntax_check


def intrinsic(lib, kind: str) -> str:
    """C function a template of the given kind calls."""
    return re.search(r"(\w+)\(", lib.by_kind(kind).c_template).group(1)


def k_loop_span(src: str) -> tuple[int, int]:
    start = src.index("for (int32_t k = 0;")
    depth, i = 0, src.index("{", start)
    for j in range(i, len(src)):
        depth += {"{": 1, "}": -1}.get(src[j], 0)
        if depth == 0:
            return start, j
    raise AssertionError("unbalanced k loop")


def text_counts(src: str, lib) -> dict:
    """Count intrinsic calls inside and outside the k loop, by regex."""
    a, b = k_loop_span(src)
    inside, outside = src[a:b], src[:a] + src[b:]
    out = {"in_k": {}, "out_k": {}}
    for kind in ("load", "store", "fma_lane", "fma", "bcast"):
        if lib.by_kind(kind) is None:
            continue
        name = intrinsic(lib, kind)
        # load and store may share a name on some targets; count by call shape
        pat = re.compile(rf"\b{name}\(")
        for where, text in (("in_k", inside), ("out_k", outside)):
            n = len(pat.findall(text))
            if n:
                out[where][kind] = n
    return out


def test_8x12_text_counts(r8x12):
    lib = r8x12.spec.lib
    src = emit(r8x12.proc, lib, r8x12.spec.symbol).kernel_source
    a, b = k_loop_span(src)
    inside, outside = src[a:b], src[:a] + src[b:]
    assert len(re.findall(r"\bvld1q_f32\(", inside)) == 5
    assert len(re.findall(r"\bvfmaq_laneq_f32\(", inside)) == 24
    assert len(re.findall(r"\bvld1q_f32\(&C\[", outside)) == 24
    assert len(re.findall(r"\bvst1q_f32\(&C\[", outside)) == 24


@pytest.mark.parametrize(
    "shape",
    [(8, 12, "f32", "neon_f32", True), (4, 4, "f32", "neon_f32", True), (1, 8, "f32", "neon_f32", False),
     (4, 8, "f32", "neon_f32", False), (16, 12, "f32", "avx512_f32", True), (8, 12, "f16", "neon_f16", True)],
)
def test_text_counts_match_ast(shape):
    mr, nr, prec, target, packed = shape
    r = recipe(mr, nr, prec, target, packed)
    lib = r.spec.lib
    src = emit(r.proc, lib).kernel_source
    ast = count_ops(r.proc, lib)
    text = text_counts(src, lib)
    if intrinsic(lib, "load") == intrinsic(lib, "store"):
        pytest.skip("load and store share a C name")
    assert text == ast


def test_formula_counts(r8x12):
    for mr, nr in ((8, 12), (4, 4), (8, 8), (4, 12)):
        r = recipe(mr, nr)
        c = count_ops(r.proc, r.spec.lib)
        vl = 4
        assert c["in_k"]["load"] == mr // vl + nr // vl
        assert c["in_k"]["fma_lane"] == (mr // vl) * nr
        assert c["out_k"] == {"load": nr * mr // vl, "store": nr * mr // vl}


def test_deterministic(r8x12):
    a = emit_unit(r8x12.proc, r8x12.spec.lib, {"K_R": 4})
    b = emit_unit(r8x12.proc, r8x12.spec.lib, {"K_R": 4})
    assert a == b


def test_single_definition_and_header(r8x12):
    sym = r8x12.spec.symbol
    u = emit(r8x12.proc, r8x12.spec.lib, sym)
    defs = re.findall(rf"^\w[\w\s\*]*\b{sym}\(.*\)\s*\{{", u.kernel_source, re.M)
    assert len(defs) == 1
    sig = defs[0].rstrip("{").strip()
    assert sig + ";" in u.header
    assert sym == "gemm_ukr_8x12_f32_neon_f32"
    assert "int32_t K_R, const float *A, const float *B, float *C" in sig


def test_file_layout(r8x12):
    u = emit_unit(r8x12.proc, r8x12.spec.lib, {"K_R": 4}, symbol=r8x12.spec.symbol)
    assert set(u.files()) == {f"{r8x12.spec.symbol}{x}" for x in (".c", ".h", "_harness.c")}


def test_restrict_flag(r8x12):
    plain = emit(r8x12.proc, r8x12.spec.lib).kernel_source
    assert "restrict" not in plain
    assert "restrict" in emit(r8x12.proc, r8x12.spec.lib, restrict=True).kernel_source


def test_f16_scalar_args_use_overridable_type():
    r = recipe(8, 12, "f16", "neon_f16", mode="generic")
    u = emit(r.proc, r.spec.lib)
    assert "UKF_F16_ARG alpha, UKF_F16_ARG beta" in u.kernel_source
    assert "#define UKF_F16_ARG float16_t" in u.header
    assert "UKF_F16_ARG" not in emit(recipe(8, 12).proc, recipe(8, 12).spec.lib).kernel_source


def test_f16_declarations():
    r = recipe(8, 12, "f16", "neon_f16")
    src = emit(r.proc, r.spec.lib).kernel_source
    assert "float16x8_t" in src and "float16_t" in src


def test_register_array_flattened(r8x12):
    src = emit(r8x12.proc, r8x12.spec.lib).kernel_source
    assert "float32x4_t C_reg[24];" in src
    # outermost-first flattening: C_reg[jt*4+jtt][it] -> 2 * j + it
    assert "C_reg[1] = vld1q_f32(&C[4]);" in src
    assert "C_reg[2] = vld1q_f32(&C[8]);" in src


EMPTY = "def nothing(N: size, x: inout(f32[N] @ DRAM)):\n    pass\n"


def test_empty_proc_emits():
    u = emit(parse_proc(EMPTY), get_target("neon_f32"))
    assert re.search(r"void nothing\(int32_t N, float \*x\) \{\s*\}", u.kernel_source)


@needs_toolchain("avx512_f32")
def test_empty_proc_compiles(tmp_path):
    lib = get_target("avx512_f32")
    plan = harness_plan(lib)
    src = tmp_path / "empty.c"
    src.write_text(emit(parse_proc(EMPTY), lib).kernel_source)
    r = subprocess.run([plan.cc, *plan.flags, "-c", "-o", str(tmp_path / "empty.o"), str(src)],
                       capture_output=True, text=True)
    assert r.returncode == 0, r.stderr


def test_unresolved_instr(r8x12):
    with pytest.raises(UnresolvedInstr):
        emit(r8x12.proc, get_target("avx512_f32"))


def test_non_const_register_dim():
    p = parse_proc("""
def f(N: size, x: inout(f32[N, 4] @ DRAM)):
    r: f32[N, 4] @ Neon
    for a in seq(0, N):
        for l in seq(0, 4):
            r[a, l] = x[a, l]
""")
    with pytest.raises(NonConstRegisterDim):
        emit(p, get_target("neon_f32"))


def _splitmix64(seed: int, n: int) -> list[int]:
    """Reference splitmix64 written out with explicit 64-bit masking."""
    mask = (1 << 64) - 1
    x, out = seed & mask, []
    for _ in range(n):
        x = (x + 0x9E3779B97F4A7C15) & mask
        z = x
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
        z = z ^ (z >> 31)
        out.append(z % 5 - 2)
    return out


def test_splitmix_pattern():
    for seed in (0, 1, 42, 2**63 + 5):
        assert splitmix_values(seed, 50).tolist() == _splitmix64(seed, 50)


def test_harness_embeds_naive_loop(r8x12):
    ref = naive_reference(r8x12.proc)
    assert all(type(s).__name__ == "Loop" for s in ref.body)
    text = emit_harness(r8x12.proc, r8x12.spec.lib, {"K_R": 8})
    assert "memcmp" in text and "ref_" in text


HARNESS_CASES = [
    (8, 12, "f32", "neon_f32", True, "unit"),
    (4, 4, "f32", "neon_f32", True, "unit"),
    (1, 8, "f32", "neon_f32", False, "unit"),
    (4, 8, "f32", "neon_f32", False, "unit"),
    (8, 12, "f32", "neon_f32", True, "generic"),
    (1, 12, "f32", "neon_f32", False, "generic"),
    (16, 12, "f32", "avx512_f32", True, "unit"),
    (8, 12, "f16", "neon_f16", True, "unit"),
    (8, 12, "f16", "neon_f16", True, "generic"),
]


def _case_id(c):
    return f"{c[0]}x{c[1]}-{c[3]}-{c[5]}" + ("" if c[4] else "-bcast")


@pytest.mark.parametrize("case", HARNESS_CASES, ids=_case_id)
def test_harness_cross_validates(case):
    mr, nr, prec, target, packed, mode = case
    if harness_plan(target) is None:
        pytest.skip(f"no toolchain for {target}")
    r = recipe(mr, nr, prec, target, packed, mode)
    lib = r.spec.lib
    sizes = {"K_R": 8}
    res = run_harness(emit_harness(r.proc, lib, sizes, symbol=r.spec.symbol), lib, ("--dump",))
    assert res.passed, res.stdout + res.stderr
    assert res.stdout.strip().endswith(f"PASS {r.spec.symbol}")
    dumped = np.array([float(x) for x in res.stdout.split()[:-2]], dtype=np.float32)
    ins = harness_inputs(r.proc, sizes)
    out = run_batched(r.proc, sizes, {k: v[None] for k, v in ins.items()}, lib)
    assert np.array_equal(out["C"].reshape(-1), dumped)


@needs_toolchain("neon_f32")
def test_corrupted_kernel_fails():
    r = recipe(8, 12)
    text = emit_harness(r.proc, r.spec.lib, {"K_R": 8})
    bad = text.replace("vfmaq_laneq_f32(C_reg[0], A_reg[0], B_reg[0], 0)",
                       "vfmaq_laneq_f32(C_reg[0], A_reg[0], B_reg[0], 1)", 1)
    assert bad != text
    res = run_harness(bad, r.spec.lib)
    assert res.returncode != 0
    assert "FAIL" in res.stdout


@pytest.mark.parametrize("case", [c for c in HARNESS_CASES if "neon" in c[3]], ids=_case_id)
def test_aarch64_syntax(case):
    mr, nr, prec, target, packed, mode = case
    r = recipe(mr, nr, prec, target, packed, mode)
    got = syntax_check(emit(r.proc, r.spec.lib).kernel_source, r.spec.lib)
    if got is None:
        pytest.skip("clang not available")
    ok, err = got
    if not ok and "arm_neon.h" in err and "not found" in err:
        pytest.skip("no aarch64 arm_neon.h for clang")
    assert ok, err


def test_emulation_header_ships():
    from ukf.toolchain import emulation_dir

    assert (Path(emulation_dir()) / "arm_neon.h").exists()
