from __future__ import annotations

from functools import lru_cache

import numpy as np
import pytest

from ukf.recipes import KernelSpec, Recipe, base_proc, schedule
from ukf.toolchain import harness_plan


@lru_cache(maxsize=None)
def recipe(mr: int, nr: int, prec: str = "f32", target: str = "neon_f32", packed_a: bool = True,
           mode: str = "unit", style: str | None = None) -> Recipe:
    """Scheduled kernels are shared across the session; Procs are immutable."""
    return schedule(KernelSpec(mr, nr, prec, target, packed_a, mode, style))


@pytest.fixture(scope="session")
def r8x12() -> Recipe:
    return recipe(8, 12)


@pytest.fixture(scope="session")
def unit_base():
    return base_proc(KernelSpec(8, 12))


@pytest.fixture(scope="session")
def generic_base():
    return base_proc(KernelSpec(8, 12, mode="generic"))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def needs_toolchain(target: str):
    plan = harness_plan(target)
    return pytest.mark.skipif(plan is None, reason=f"no C toolchain can run {target} harnesses here")
