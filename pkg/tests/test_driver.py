from __future__ import annotations

import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ukf.driver import (
    CACHE_PRESETS,
    CacheDescriptor,
    CacheLevel,
    CacheParams,
    GemmShape,
    GemmStats,
    KernelFamily,
    bitwise_equal,
    capacity_ok,
    gemm,
    naive_gemm,
    pack_A,
    pack_B,
    plan_tiles,
    random_int_operands,
    reference_gemm,
    select_cache_params,
    unpack,
)
from ukf.errors import DegenerateCacheWarning, DimensionMismatch, MissingKernelForTile, ShapeMismatch

PAPER = KernelFamily.preset("paper-family")
KiB, MiB = 1024, 1024 * 1024


# packing


def test_pack_identity():
    eye = np.eye(2, dtype=np.float32)
    assert pack_A(eye, 2).data.tolist() == [1, 0, 0, 1]
    assert pack_B(eye, 2).data.tolist() == [1, 0, 0, 1]


def test_pack_A_offsets(rng):
    mc, kc, mr = 8, 3, 4
    X = rng.integers(-9, 10, (mc, kc))
    data = pack_A(X, mr).data
    for t in range(mc // mr):
        for p in range(kc):
            for i in range(mr):
                assert data[t * mr * kc + p * mr + i] == X[t * mr + i, p]


def test_pack_B_offsets(rng):
    kc, nc, nr = 3, 8, 4
    X = rng.integers(-9, 10, (kc, nc))
    data = pack_B(X, nr).data
    for t in range(nc // nr):
        for p in range(kc):
            for j in range(nr):
                assert data[t * nr * kc + p * nr + j] == X[p, t * nr + j]


@given(st.integers(1, 4), st.integers(1, 5), st.integers(1, 6), st.integers(0, 2**32 - 1))
@settings(max_examples=50, deadline=None)
def test_unpack_inverts_pack(panels, width, kc, seed):
    g = np.random.default_rng(seed)
    A = g.standard_normal((panels * width, kc)).astype(np.float32)
    B = g.standard_normal((kc, panels * width)).astype(np.float32)
    pa, pb = pack_A(A, width), pack_B(B, width)
    assert np.array_equal(unpack(pa), A)
    assert np.array_equal(unpack(pb), B)
    # a bijection: every element appears exactly once
    assert sorted(pa.data.tolist()) == sorted(A.ravel().tolist())


def test_pack_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        pack_A(np.zeros((6, 2)), 4)
    with pytest.raises(DimensionMismatch):
        pack_B(np.zeros((2, 6)), 4)


# tiling


def sums_to(total: int, parts) -> bool:
    ok = [True] + [False] * total
    for t in range(1, total + 1):
        ok[t] = any(p <= t and ok[t - p] for p in parts)
    return ok[total]


def tileable(mb: int, nb: int, tiles) -> bool:
    """Independent check: some column split exists whose widths each admit a row split."""
    widths = {nr for _, nr in tiles if sums_to(mb, [m for m, n in tiles if n == nr])}
    return sums_to(nb, widths)


@given(st.integers(1, 64), st.integers(1, 64))
@settings(max_examples=200, deadline=None)
def test_tile_partition(mb, nb):
    try:
        plan = plan_tiles(mb, nb, PAPER.tiles)
    except MissingKernelForTile:
        assert not tileable(mb, nb, PAPER.tiles)
        return
    seen = np.zeros((mb, nb), dtype=int)
    for i0, j0, mr, nr in plan.tiles():
        assert (mr, nr) in PAPER.tiles
        seen[i0 : i0 + mr, j0 : j0 + nr] += 1
    assert (seen == 1).all()


def test_largest_kernel_first():
    plan = plan_tiles(12, 12, PAPER.tiles)
    assert list(plan.tiles()) == [(0, 0, 8, 12), (8, 0, 4, 12)]
    # no 1x4 kernel, so a width-4 column cannot hold 9 rows
    plan = plan_tiles(9, 16, PAPER.tiles)
    assert plan.cols == (8, 8)
    assert plan.rows[8] == (4, 4, 1)  # the family has no 8x8 kernel


def test_missing_kernel():
    fam = KernelFamily([(8, 12)])
    A, B, C = np.zeros((5, 3)), np.zeros((3, 12)), np.zeros((5, 12))
    with pytest.raises(MissingKernelForTile):
        gemm(A, B, C, family=fam)


def test_shape_errors():
    with pytest.raises(ShapeMismatch):
        GemmShape(0, 1, 1)
    with pytest.raises(ShapeMismatch):
        gemm(np.zeros((2, 3)), np.zeros((4, 2)), np.zeros((2, 2)))


# gemm


def test_single_8x12_k512(rng):
    A, B, C = random_int_operands(rng, 8, 12, 512)
    fam = KernelFamily([(8, 12)])
    stats = GemmStats()
    out = gemm(A, B, C, family=fam, stats=stats)
    assert bitwise_equal(out, naive_gemm(A, B, C))
    assert stats.kernel_calls == {(8, 12, "unit"): 1}


def test_beta_zero_ignores_garbage(rng):
    A, B, _ = random_int_operands(rng, 12, 16, 9)
    C = np.full((12, 16), np.nan, np.float32)
    C[::2] = np.inf
    out = gemm(A, B, C, GemmShape(12, 16, 9, alpha=2, beta=0), family=PAPER)
    assert bitwise_equal(out, reference_gemm(A, B, C, 2, 0))


def test_beta_only_on_first_k_block(rng):
    A, B, C = random_int_operands(rng, 8, 12, 40)
    params = CacheParams(8, 16, 12, 8, 12)
    out = gemm(A, B, C, GemmShape(8, 12, 40, alpha=1, beta=2), params, PAPER)
    assert bitwise_equal(out, naive_gemm(A, B, C, 1, 2))


def test_resnet_layer1_scaled(rng):
    # same n and k as the first ResNet50 layer, m reduced for desk scale
    A, B, C = random_int_operands(rng, 196, 64, 147)
    out = gemm(A, B, C, family=PAPER)
    assert bitwise_equal(out, reference_gemm(A, B, C))


@pytest.mark.parametrize("edge", ["family", "pad"])
def test_small_blocks_many_tiles(rng, edge):
    A, B, C = random_int_operands(rng, 37, 44, 23)
    params = CacheParams(16, 8, 24, 8, 12)
    out = gemm(A, B, C, GemmShape(37, 44, 23, 2, 1), params, PAPER, edge=edge)
    assert bitwise_equal(out, reference_gemm(A, B, C, 2, 1))


def test_pad_covers_odd_n(rng):
    A, B, C = random_int_operands(rng, 5, 7, 3)
    stats = GemmStats()
    out = gemm(A, B, C, family=PAPER, edge="pad", stats=stats)
    assert bitwise_equal(out, naive_gemm(A, B, C))
    assert stats.padded == 1


def test_oracles_agree(rng):
    for _ in range(5):
        A, B, C = random_int_operands(rng, 5, 6, 7)
        assert np.array_equal(naive_gemm(A, B, C, 2, 2), reference_gemm(A, B, C, 2, 2))


# cache model


def test_carmel_kc():
    p = select_cache_params(CACHE_PRESETS["carmel"], 8, 12, "f32")
    assert p.kc == 512
    assert p.mc % 8 == 0 and p.nc % 12 == 0
    assert capacity_ok(CACHE_PRESETS["carmel"], p)


def test_l2_doubling_doubles_mc():
    base = CACHE_PRESETS["carmel"]
    big = CacheDescriptor(base.l1, CacheLevel(base.l2.capacity * 2, base.l2.occupancy),
                          CacheLevel(base.l3.capacity * 4, base.l3.occupancy))
    a = select_cache_params(base, 8, 12)
    b = select_cache_params(big, 8, 12)
    assert a.kc == b.kc
    assert abs(b.mc - 2 * a.mc) < 8


def test_capacities_must_increase():
    with pytest.raises(ValueError):
        CacheDescriptor(CacheLevel(2 * MiB, 0.5), CacheLevel(MiB, 0.5), CacheLevel(4 * MiB, 0.5))
    with pytest.raises(ValueError):
        CacheLevel(1024, 0.0)


def test_degenerate_cache_warns():
    tiny = CacheDescriptor(CacheLevel(16, 0.5), CacheLevel(32, 0.5), CacheLevel(64, 0.5))
    with pytest.warns(DegenerateCacheWarning):
        p = select_cache_params(tiny, 8, 12)
    assert (p.mc, p.kc, p.nc) == (8, 1, 12)


def random_descriptor(g: np.random.Generator) -> CacheDescriptor:
    l1 = int(g.integers(4 * KiB, 256 * KiB))
    l2 = l1 + int(g.integers(KiB, 8 * MiB))
    l3 = l2 + int(g.integers(KiB, 64 * MiB))
    occ = g.uniform(0.05, 1.0, 3)
    return CacheDescriptor(CacheLevel(l1, occ[0]), CacheLevel(l2, occ[1]), CacheLevel(l3, occ[2]))


def test_inequalities_on_random_descriptors():
    g = np.random.default_rng(7)
    for _ in range(1000):
        cache = random_descriptor(g)
        mr = int(g.choice([1, 4, 8, 16]))
        nr = int(g.choice([4, 8, 12]))
        prec = str(g.choice(["f32", "f16"]))
        b = 4 if prec == "f32" else 2
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateCacheWarning)
            p = select_cache_params(cache, mr, nr, prec)
        if (mr + nr) * b > cache.l1.budget:
            continue
        assert (mr + nr) * p.kc * b <= cache.l1.budget
        assert (mr + nr) * (p.kc + 1) * b > cache.l1.budget
        if p.mc > mr or mr * p.kc * b <= cache.l2.budget:
            assert p.mc * p.kc * b <= cache.l2.budget
        if p.nc > nr or nr * p.kc * b <= cache.l3.budget:
            assert p.nc * p.kc * b <= cache.l3.budget
        assert p.mc % mr == 0 and p.nc % nr == 0


def test_descriptor_round_trip():
    c = CACHE_PRESETS["carmel"]
    assert CacheDescriptor.from_dict(c.to_dict()) == c
