from __future__ import annotations

import re

import numpy as np
import pytest

from ukf.errors import ParseError, ValidationError
from ukf.interp import run_batched
from ukf.printer import parse_proc
from ukf.targets import builtin_targets, get_target, load_target, serialize_target


def test_builtin_set():
    names = {t.name for t in builtin_targets()}
    assert names == {"neon_f32", "neon_f16", "avx512_f32"}


def test_vector_lengths():
    assert get_target("neon_f32").vector_length == 4
    assert get_target("neon_f16").vector_length == 8
    assert get_target("avx512_f32").vector_length == 16
    assert get_target("neon_f16").register_space.name == "Neon8f"


def test_neon_instruction_names():
    lib = get_target("neon_f32")
    for name in ("neon_vld_4xf32", "neon_vst_4xf32", "neon_vfmla_4xf32_4xf32", "neon_vfmadd_4xf32_4xf32",
                 "neon_vdup_4xf32", "neon_vzero_4xf32"):
        assert lib.get(name) is not None, name


def test_avx512_loadu():
    lib = get_target("avx512_f32")
    assert lib.get("_mm512_loadu_ps") is not None
    assert lib.get("_mm512_storeu_ps") is not None
    assert lib.by_kind("fma") is not None


@pytest.mark.parametrize("lib", builtin_targets(), ids=lambda t: t.name)
def test_serialize_round_trip(lib):
    assert load_target(serialize_target(lib)) == lib


@pytest.mark.parametrize("lib", builtin_targets(), ids=lambda t: t.name)
def test_templates_fully_rendered(lib):
    for i in lib.instrs:
        text = i.render({p.name: f"op_{p.name}" for p in i.params})
        assert not re.search(r"\{\w+\}", text), i.name
        for p in i.params:
            assert f"op_{p.name}" in text, (i.name, p.name)


def _formula(kind: str, ops: dict, lanes: int, lane: int) -> dict:
    """Direct definitions of each instruction kind on lane vectors."""
    if kind in ("load", "store"):
        return {"dst": ops["src"].copy()}
    if kind == "bcast":
        return {"dst": np.full(lanes, ops["src"].reshape(-1)[0], dtype=np.float32)}
    if kind == "zero":
        return {"dst": np.zeros(lanes, dtype=np.float32)}
    names = sorted(k for k in ops if k != "dst")
    a, b = ops[names[0]], ops[names[1]]
    if kind == "fma_lane":
        return {"dst": ops["dst"] + a * b[lane]}
    if kind == "fma":
        bb = b if b.size == lanes else np.full(lanes, b.reshape(-1)[0])
        return {"dst": ops["dst"] + a * bb}
    raise AssertionError(kind)


def _wrapper(instr, lane: int):
    """A proc whose only statement calls `instr` on whole argument buffers."""
    args, ops = [], []
    for prm in instr.params:
        if prm.role == "index":
            ops.append(str(lane))
            continue
        dims = ", ".join(str(d) for d in prm.shape)
        t = f"{prm.prec.value}[{dims}]" if prm.shape else prm.prec.value
        decl = f"{t} @ {prm.mem.name}"
        args.append(f"{prm.name}: inout({decl})" if prm.role == "dst" else f"{prm.name}: {decl}")
        win = ", ".join(f"0:{d}" for d in prm.shape)
        ops.append(f"{prm.name}[{win}]" if prm.shape else prm.name)
    return f"def w({', '.join(args)}):\n    {instr.name}({', '.join(ops)})\n"


@pytest.mark.parametrize("lib", builtin_targets(), ids=lambda t: t.name)
def test_semantic_bodies_match_formulas(lib, rng):
    lanes = lib.vector_length
    for instr in lib.instrs:
        for lane in range(lanes if instr.kind == "fma_lane" else 1):
            p = parse_proc(_wrapper(instr, lane), lib.spaces)
            arrays = {
                a.name: rng.integers(-2, 3, size=(1,) + tuple(int(d.value) for d in a.dims)).astype(np.float32)
                for a in p.args
            }
            out = run_batched(p, {}, arrays, lib)
            want = _formula(instr.kind, {k: v[0] for k, v in arrays.items()}, lanes, lane)
            for name, v in want.items():
                assert np.array_equal(out[name][0].reshape(-1), v.reshape(-1).astype(np.float32)), (instr.name, lane)


BAD_ROLE = '''
name = "bad"
[[memspace]]
name = "Neon"
kind = "vector_register"
lanes = 4
precision = "f32"

[[instr]]
name = "writes_src"
c_template = "{dst} = {src};"
body = """
for l in seq(0, 4):
    src[l] = dst[l]
"""
[[instr.params]]
name = "dst"
role = "dst"
shape = [4]
mem = "Neon"
[[instr.params]]
name = "src"
role = "src"
shape = [4]
'''


def test_body_writing_src_is_rejected():
    with pytest.raises(ValidationError):
        load_target(BAD_ROLE)


def test_parse_error_position():
    with pytest.raises(ParseError) as e:
        load_target('name = "x"\n[[instr]\n')
    assert e.value.line == 2


F64ISH = '''
name = "wide2"
precisions = ["f32"]
[[memspace]]
name = "{space}"
kind = "vector_register"
lanes = 2
precision = "f32"
ctype = "float2"

[[instr]]
name = "ld2"
kind = "load"
c_template = "{{dst}} = ld2({{src}});"
body = """
for l in seq(0, 2):
    dst[l] = src[l]
"""
[[instr.params]]
name = "dst"
role = "dst"
shape = [2]
mem = "Pair"
[[instr.params]]
name = "src"
role = "src"
shape = [2]
'''


def test_user_library_needs_declared_space():
    lib = load_target(F64ISH.format(space="Pair"))
    assert lib.vector_length == 2 and lib.get("ld2") is not None
    with pytest.raises(ValidationError):
        load_target(F64ISH.format(space="Other"))


def test_missing_field():
    with pytest.raises(ValidationError):
        load_target('name = "x"\n[[instr]]\nname = "y"\n')
