from __future__ import annotations

import numpy as np
import pytest

from conftest import recipe
from ukf.errors import SchedulingError
from ukf.interp import equivalent, run_batched
from ukf.ir import InstrCall, walk
from ukf.printer import pretty_print
from ukf.recipes import (
    PAPER_FAMILY,
    PHASES,
    TEST_MATRIX,
    VGG_FAMILY,
    KernelSpec,
    auto_spec,
    count_ops,
    generate_family,
    preset,
    register_count,
    schedule_broadcast,
    schedule_packed,
)
from ukf.toolchain import harness_plan, run_harness


def test_unit_base_matches_oracle(unit_base, rng):
    A = rng.integers(-2, 3, (1, 1, 2)).astype(np.float32)
    B = rng.integers(-2, 3, (1, 1, 3)).astype(np.float32)
    C = rng.integers(-2, 3, (1, 3, 2)).astype(np.float32)
    out = run_batched(unit_base, {"M_R": 2, "N_R": 3, "K_R": 1}, {"A": A, "B": B, "C": C})
    assert np.array_equal(out["C"][0], C[0] + np.outer(B[0, 0], A[0, 0]))


def test_generic_beta_zero_ignores_c(generic_base, rng):
    sizes = {"M_R": 3, "N_R": 2, "K_R": 4}
    A = rng.integers(-2, 3, (1, 4, 3)).astype(np.float32)
    B = rng.integers(-2, 3, (1, 4, 2)).astype(np.float32)
    outs = []
    for fill in (0.0, 7.0, -3.0):
        C = np.full((1, 2, 3), fill, np.float32)
        arrays = {"A": A, "B": B, "C": C, "alpha": np.ones((1,), np.float32), "beta": np.zeros((1,), np.float32)}
        outs.append(run_batched(generic_base, sizes, arrays)["C"])
    assert np.array_equal(outs[0], outs[1]) and np.array_equal(outs[0], outs[2])


def test_base_layout_text(unit_base):
    text = pretty_print(unit_base)
    assert "C[j, i] += A[k, i] * B[k, j]" in text
    assert "A: f32[K_R, M_R]" in text and "C: inout(f32[N_R, M_R]" in text


def test_packed_8x12():
    p, script = schedule_packed(KernelSpec(8, 12))
    c = count_ops(p, KernelSpec(8, 12).lib)
    assert c["in_k"] == {"load": 5, "fma_lane": 24}
    assert [label for label, _ in script.phases] == list(PHASES)


def test_packed_4x4():
    p, _ = schedule_packed(KernelSpec(4, 4))
    assert count_ops(p, KernelSpec(4, 4).lib)["in_k"] == {"load": 2, "fma_lane": 4}


def test_broadcast_1x8():
    p, _ = schedule_broadcast(KernelSpec(1, 8))
    c = count_ops(p, KernelSpec(1, 8).lib)
    assert c["in_k"] == {"bcast": 1, "load": 2, "fma": 2}


def test_broadcast_1x12_matches_oracle(rng):
    p, _ = schedule_broadcast(KernelSpec(1, 12))
    A = rng.integers(-2, 3, (1, 9, 1)).astype(np.float32)
    B = rng.integers(-2, 3, (1, 9, 12)).astype(np.float32)
    C = rng.integers(-2, 3, (1, 12, 1)).astype(np.float32)
    out = run_batched(p, {"K_R": 9}, {"A": A, "B": B, "C": C}, "neon_f32")
    want = C[0].astype(np.int64) + (B[0].T.astype(np.int64) @ A[0].astype(np.int64))
    assert np.array_equal(out["C"][0], want.astype(np.float32))


def test_packed_requires_vl():
    with pytest.raises(SchedulingError):
        schedule_packed(KernelSpec(6, 12))
    with pytest.raises(SchedulingError):
        schedule_packed(KernelSpec(1, 8, packed_a=False))


def test_register_budget():
    for mr, nr in ((8, 12), (4, 4), (8, 8), (4, 12)):
        r = recipe(mr, nr)
        assert register_count(r.proc) == nr * mr // 4 + mr // 4 + nr // 4
    assert register_count(recipe(8, 12).proc) == 29


def test_packed_and_broadcast_agree():
    lane = recipe(4, 8).proc
    bcast = recipe(4, 8, packed_a=False).proc
    rep = equivalent(lane, bcast, trials=20, target="neon_f32")
    assert rep.equivalent, rep.to_text()


@pytest.mark.parametrize("mode", ["unit", "generic"])
@pytest.mark.parametrize("shape", TEST_MATRIX, ids=lambda s: f"{s[0]}x{s[1]}")
def test_chain_final_vs_base(shape, mode):
    # adjacent steps are covered by the acceptance suite; here base vs final
    spec = auto_spec(shape[0], shape[1], mode=mode)
    r = recipe(spec.mr, spec.nr, packed_a=spec.packed_a, mode=mode)
    rep = equivalent(r.script.base, r.proc, trials=20, target=spec.lib)
    assert rep.equivalent, rep.to_text()


def test_generic_scaling_uses_staging_names():
    text = pretty_print(recipe(8, 12, mode="generic").proc)
    assert "C_b" in text and "B_a" in text
    assert "neon_vfmla_4xf32_4xf32" in text


def test_presets():
    assert [(s.mr, s.nr) for s in preset("paper-8x12")] == [(8, 12)]
    fam = [(s.mr, s.nr) for s in preset("paper-family")]
    assert sorted(fam) == sorted([(8, 12), (8, 4), (4, 4), (4, 8), (4, 12), (1, 8), (1, 12)])
    assert sorted(PAPER_FAMILY) == sorted(fam)
    assert set(PAPER_FAMILY) <= set(VGG_FAMILY)
    with pytest.raises(KeyError):
        preset("nope")


def test_generate_family_empty():
    res = generate_family([])
    assert res.ok == {} and res.errors == {}


def test_generate_family_collects_errors():
    res = generate_family([KernelSpec(8, 12), KernelSpec(6, 12)], harness_k=None)
    assert KernelSpec(8, 12) in res.ok
    assert KernelSpec(6, 12) in res.errors


def test_paper_family_harnesses():
    specs = preset("paper-family")
    res = generate_family(specs)
    assert len(res.ok) == 7 and not res.errors
    if harness_plan("neon_f32") is None:
        pytest.skip("no toolchain for neon_f32 harnesses")
    for spec, (_, unit) in res.ok.items():
        r = run_harness(unit.harness_source, spec.lib)
        assert r.passed, (spec.symbol, r.stdout, r.stderr)


def test_family_with_f16():
    res = generate_family([KernelSpec(8, 12, "f16", "neon_f16")], harness_k=None)
    (_, unit), = res.ok.values()
    assert "float16x8_t" in unit.kernel_source


def test_symbols():
    assert KernelSpec(8, 12).symbol == "gemm_ukr_8x12_f32_neon_f32"
    assert KernelSpec(1, 8, packed_a=False).symbol.endswith("_bcast")
    assert KernelSpec(8, 12, mode="generic").symbol.endswith("_generic")
    assert KernelSpec(8, 12, style="bcast_b").symbol.endswith("_bcast_b")


def test_k_stays_runtime():
    p = recipe(8, 12).proc
    assert p.size_params == ("K_R",)
    assert any(isinstance(s, InstrCall) for _, s in walk(p.body))


def test_spec_validation():
    with pytest.raises(ValueError):
        KernelSpec(0, 4)
    with pytest.raises(ValueError):
        KernelSpec(4, 4, mode="weird")
    with pytest.raises(SchedulingError):
        KernelSpec(4, 6, packed_a=False).validate()
