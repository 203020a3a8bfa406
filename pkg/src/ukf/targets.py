"""Hardware libraries: memory spaces plus instructions with IR semantics.

A target document is TOML::

    name = "neon_f32"
    precisions = ["f32"]
    headers = ["arm_neon.h"]
    cflags = []                       # extra compiler flags for harnesses
    scalar_types = { f32 = "float" }  # C type of DRAM elements

    [[memspace]]
    name = "Neon"
    kind = "vector_register"          # or "addressable"
    lanes = 4
    precision = "f32"
    ctype = "float32x4_t"

    [[instr]]
    name = "neon_vld_4xf32"
    kind = "load"                     # load|store|fma_lane|fma|bcast|zero
    c_template = "{dst} = vld1q_f32({src});"
    body = '''
    for l in seq(0, 4):
        dst[l] = src[l]
    '''
    [[instr.params]]
    name = "dst"
    role = "dst"                      # dst|src|index
    shape = [4]                       # index params: [range]
    mem = "Neon"
    precision = "f32"

``body`` uses the textual IR; index params appear in it as plain names.
The DRAM space is always available and need not be declared.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

import tomli
import tomli_w

from .check import well_formed
from .errors import IRError, ParseError, ValidationError
from .ir import (
    DRAM,
    Assign,
    BufferDecl,
    InstrCall,
    Loop,
    LoopVar,
    MemSpace,
    Precision,
    Proc,
    Reduce,
    subst_stmt,
    walk,
)
from .printer import body_str, parse_body

INSTR_KINDS = ("load", "store", "fma_lane", "fma", "bcast", "zero")
_PLACEHOLDER = re.compile(r"\{(\w+)\}")


@dataclass(frozen=True)
class InstrParam:
    name: str
    role: str  # dst | src | index
    shape: tuple[int, ...]
    mem: MemSpace = DRAM
    prec: Precision = Precision.f32


@dataclass(frozen=True)
class InstrDef:
    name: str
    params: tuple[InstrParam, ...]
    body: tuple
    c_template: str
    kind: str = ""
    headers: tuple[str, ...] = ()

    @property
    def index_params(self) -> list[InstrParam]:
        return [p for p in self.params if p.role == "index"]

    @property
    def buffer_params(self) -> list[InstrParam]:
        return [p for p in self.params if p.role != "index"]

    @property
    def proc(self) -> Proc:
        """The semantic body as a proc over the buffer params."""
        args = tuple(
            BufferDecl(p.name, p.shape, p.prec, p.mem, p.role == "dst") for p in self.buffer_params
        )
        return Proc(self.name, tuple(p.name for p in self.index_params), args, self.body)

    def render(self, values: dict[str, str]) -> str:
        return _PLACEHOLDER.sub(lambda m: values[m.group(1)], self.c_template)


@dataclass(frozen=True)
class TargetLibrary:
    name: str
    memspaces: tuple[MemSpace, ...]
    instrs: tuple[InstrDef, ...]
    precisions: tuple[Precision, ...] = (Precision.f32,)
    headers: tuple[str, ...] = ()
    cflags: tuple[str, ...] = ()
    scalar_types: tuple[tuple[str, str], ...] = ()

    def get(self, name: str) -> InstrDef | None:
        for i in self.instrs:
            if i.name == name:
                return i
        return None

    def instr(self, name: str) -> InstrDef:
        i = self.get(name)
        if i is None:
            raise KeyError(f"{self.name} has no instruction {name!r}")
        return i

    def by_kind(self, kind: str) -> InstrDef | None:
        for i in self.instrs:
            if i.kind == kind:
                return i
        return None

    def space(self, name: str) -> MemSpace:
        if name == "DRAM":
            return DRAM
        for m in self.memspaces:
            if m.name == name:
                return m
        raise KeyError(f"{self.name} declares no memory space {name!r}")

    @property
    def spaces(self) -> dict[str, MemSpace]:
        return {"DRAM": DRAM, **{m.name: m for m in self.memspaces}}

    @property
    def register_space(self) -> MemSpace:
        for m in self.memspaces:
            if m.is_register:
                return m
        raise KeyError(f"{self.name} has no vector register space")

    @property
    def vector_length(self) -> int:
        return self.register_space.lanes

    def scalar_ctype(self, prec: Precision) -> str:
        return dict(self.scalar_types).get(prec.value, prec.ctype)


# --------------------------------------------------------------------------- #
# Validation


def validate_instr(instr: InstrDef, lib_spaces: dict[str, MemSpace], lib_precs) -> None:
    if instr.kind and instr.kind not in INSTR_KINDS:
        raise ValidationError(f"{instr.name}: unknown kind {instr.kind!r}")
    names = [p.name for p in instr.params]
    if len(set(names)) != len(names):
        raise ValidationError(f"{instr.name}: duplicate parameter names")
    for p in instr.params:
        if p.role not in ("dst", "src", "index"):
            raise ValidationError(f"{instr.name}: parameter {p.name} has unknown role {p.role!r}")
        if p.role != "index":
            if p.mem.name not in lib_spaces:
                raise ValidationError(f"{instr.name}: memory space {p.mem.name} is not declared")
            if p.prec not in lib_precs:
                raise ValidationError(f"{instr.name}: precision {p.prec.value} is not supported by the library")
        elif len(p.shape) != 1:
            raise ValidationError(f"{instr.name}: index parameter {p.name} needs a single range")
    # index params get their declared range by wrapping the body in loops
    proc = instr.proc
    body = tuple(instr.body)
    mapping = {p.name: LoopVar(p.name) for p in instr.index_params}
    body = tuple(subst_stmt(s, mapping) for s in body)
    for p in reversed(instr.index_params):
        body = (Loop(p.name, p.shape[0], body),)
    check = Proc(proc.name, (), proc.args, body)
    diags = well_formed(check)
    if diags:
        raise ValidationError(f"{instr.name}: semantic body is malformed: {'; '.join(diags)}")
    written = set()
    for _, s in walk(instr.body):
        if isinstance(s, InstrCall):
            raise ValidationError(f"{instr.name}: semantic bodies may not call instructions")
        if isinstance(s, (Assign, Reduce)):
            written.add(s.buf)
    for p in instr.buffer_params:
        if p.role == "src" and p.name in written:
            raise ValidationError(f"{instr.name}: body writes src parameter {p.name}")
        if p.role == "dst" and p.name not in written:
            raise ValidationError(f"{instr.name}: dst parameter {p.name} is never written")
    used = set(_PLACEHOLDER.findall(instr.c_template))
    if used != set(names):
        missing, extra = set(names) - used, used - set(names)
        raise ValidationError(
            f"{instr.name}: template placeholders mismatch (missing {sorted(missing)}, unknown {sorted(extra)})"
        )


def validate_library(lib: TargetLibrary) -> None:
    names = [i.name for i in lib.instrs]
    if len(set(names)) != len(names):
        raise ValidationError(f"{lib.name}: duplicate instruction names")
    spaces = lib.spaces
    for m in lib.memspaces:
        if m.is_register and (not m.lanes or m.lanes < 1 or m.lane_precision is None):
            raise ValidationError(f"{lib.name}: register space {m.name} needs lanes and precision")
        if m.is_register and m.lane_precision not in lib.precisions:
            raise ValidationError(f"{lib.name}: space {m.name} uses undeclared precision")
    for i in lib.instrs:
        validate_instr(i, spaces, lib.precisions)


# --------------------------------------------------------------------------- #
# Documents


def _req(tbl: dict, key: str, where: str):
    if key not in tbl:
        raise ValidationError(f"{where}: missing field {key!r}")
    return tbl[key]


def load_target(document: str) -> TargetLibrary:
    try:
        doc = tomli.loads(document)
    except tomli.TOMLDecodeError as exc:
        m = re.search(r"line (\d+), column (\d+)", str(exc))
        raise ParseError(str(exc), *(int(g) for g in m.groups()) if m else (None, None)) from None
    name = _req(doc, "name", "library")
    try:
        precisions = tuple(Precision(p) for p in doc.get("precisions", ["f32"]))
    except ValueError as exc:
        raise ValidationError(f"{name}: {exc}") from None
    spaces = []
    for m in doc.get("memspace", []):
        where = f"{name}: memspace"
        kind = m.get("kind", "addressable")
        if kind not in ("addressable", "vector_register"):
            raise ValidationError(f"{where} {m.get('name')}: unknown kind {kind!r}")
        prec = m.get("precision")
        spaces.append(
            MemSpace(
                _req(m, "name", where),
                kind,
                m.get("lanes"),
                Precision(prec) if prec else None,
                m.get("ctype"),
            )
        )
    space_map = {"DRAM": DRAM, **{s.name: s for s in spaces}}
    instrs = []
    for t in doc.get("instr", []):
        iname = _req(t, "name", f"{name}: instr")
        where = f"{name}: instr {iname}"
        params = []
        for p in _req(t, "params", where):
            role = _req(p, "role", where)
            mem = p.get("mem", "DRAM")
            if role != "index" and mem not in space_map:
                raise ValidationError(f"{where}: memory space {mem!r} is not declared")
            try:
                prec = Precision(p.get("precision", "f32"))
            except ValueError as exc:
                raise ValidationError(f"{where}: {exc}") from None
            params.append(
                InstrParam(_req(p, "name", where), role, tuple(_req(p, "shape", where)), space_map.get(mem, DRAM), prec)
            )
        buffers = [p.name for p in params if p.role != "index"]
        sizes = [p.name for p in params if p.role == "index"]
        try:
            body = parse_body(_req(t, "body", where), sizes, buffers, spaces=space_map)
        except (ParseError, IRError) as exc:
            raise ValidationError(f"{where}: body: {exc}") from None
        instrs.append(
            InstrDef(
                iname,
                tuple(params),
                tuple(body),
                _req(t, "c_template", where),
                t.get("kind", ""),
                tuple(t.get("headers", [])),
            )
        )
    lib = TargetLibrary(
        name,
        tuple(spaces),
        tuple(instrs),
        precisions,
        tuple(doc.get("headers", [])),
        tuple(doc.get("cflags", [])),
        tuple(sorted(doc.get("scalar_types", {}).items())),
    )
    validate_library(lib)
    return lib


def serialize_target(lib: TargetLibrary) -> str:
    doc: dict = {
        "name": lib.name,
        "precisions": [p.value for p in lib.precisions],
        "headers": list(lib.headers),
        "cflags": list(lib.cflags),
        "scalar_types": dict(lib.scalar_types),
        "memspace": [],
        "instr": [],
    }
    for m in lib.memspaces:
        d = {"name": m.name, "kind": m.kind}
        if m.lanes is not None:
            d["lanes"] = m.lanes
        if m.lane_precision is not None:
            d["precision"] = m.lane_precision.value
        if m.ctype is not None:
            d["ctype"] = m.ctype
        doc["memspace"].append(d)
    for i in lib.instrs:
        doc["instr"].append(
            {
                "name": i.name,
                "kind": i.kind,
                "headers": list(i.headers),
                "c_template": i.c_template,
                "body": body_str(i.body),
                "params": [
                    {"name": p.name, "role": p.role, "shape": list(p.shape), "mem": p.mem.name, "precision": p.prec.value}
                    for p in i.params
                ],
            }
        )
    return tomli_w.dumps(doc, multiline_strings=True)


BUILTIN_NAMES = ("neon_f32", "neon_f16", "avx512_f32")


@lru_cache(maxsize=None)
def builtin_target(name: str) -> TargetLibrary:
    if name not in BUILTIN_NAMES:
        raise KeyError(f"unknown target {name!r}; builtins are {', '.join(BUILTIN_NAMES)}")
    text = resources.files("ukf.data.targets").joinpath(f"{name}.toml").read_text()
    return load_target(text)


def builtin_targets() -> list[TargetLibrary]:
    return [builtin_target(n) for n in BUILTIN_NAMES]


def get_target(name_or_lib) -> TargetLibrary:
    if isinstance(name_or_lib, TargetLibrary):
        return name_or_lib
    return builtin_target(name_or_lib)
