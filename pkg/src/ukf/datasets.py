"""Embedded GEMM shape tables and kernel-family presets."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

import tomli

MODELS = ("resnet50", "vgg16", "square")


@dataclass(frozen=True)
class LayerShape:
    model: str
    id: int
    m: int
    n: int
    k: int
    note: str = ""


def parse_dataset(text: str, model: str = "custom") -> list[LayerShape]:
    """Plain text, one layer per line: ``id m n k`` with ``#`` comments."""
    rows = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        body, _, note = raw.partition("#")
        fields = body.split()
        if not fields:
            continue
        if len(fields) != 4:
            raise ValueError(f"line {lineno}: expected 'id m n k', got {raw.strip()!r}")
        lid, m, n, k = (int(f) for f in fields)
        if min(m, n, k) < 1:
            raise ValueError(f"line {lineno}: dimensions must be positive")
        rows.append(LayerShape(model, lid, m, n, k, note.strip()))
    return rows


@lru_cache(maxsize=None)
def _load(model: str) -> tuple[LayerShape, ...]:
    if model not in MODELS:
        raise KeyError(f"unknown model {model!r}; known: {', '.join(MODELS)}")
    text = resources.files("ukf.data").joinpath(f"{model}.txt").read_text()
    return tuple(parse_dataset(text, model))


def load_dataset(model: str) -> list[LayerShape]:
    return list(_load(model))


@lru_cache(maxsize=None)
def _presets() -> dict:
    return tomli.loads(resources.files("ukf.data").joinpath("presets.toml").read_text())


def preset_names() -> list[str]:
    return list(_presets())


def preset_shapes(name: str) -> list[tuple[int, int]]:
    table = _presets()
    if name not in table:
        raise KeyError(f"unknown preset {name!r}; known: {', '.join(table)}")
    return [(int(mr), int(nr)) for mr, nr in table[name]["kernels"]]
