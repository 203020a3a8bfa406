"""Command line: generate, verify, shapes, model.

Exit codes: 0 success, 1 verification failure, 2 usage or configuration
error. ``UKF_SEED`` overrides ``--seed``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import tomli

from . import __version__
from .codegen import emit_unit, naive_reference
from .datasets import MODELS, load_dataset, preset_names
from .driver import (
    CACHE_PRESETS,
    EDGE_POLICIES,
    CacheDescriptor,
    GemmShape,
    GemmStats,
    KernelFamily,
    bitwise_equal,
    capacity_ok,
    gemm,
    random_int_operands,
    reference_gemm,
    select_cache_params,
)
from .errors import UkfError
from .interp import DEFAULT_SEED, equivalent
from .printer import pretty_print
from .recipes import PRESETS, KernelSpec, auto_spec, base_proc, preset, schedule, spec_from_meta
from .schedule import ScheduleScript, Step, apply_step
from .targets import BUILTIN_NAMES, get_target

log = logging.getLogger("ukf")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

CSV_FIELDS = (
    "command", "model", "layer", "m", "n", "k", "k_run", "kernel", "tiles", "verdict", "max_err", "wall_s", "note",
)


class UsageError(Exception):
    pass


def resolve_seed(flag: int | None) -> int:
    env = os.environ.get("UKF_SEED")
    if env:
        try:
            return int(env, 0)
        except ValueError:
            raise UsageError(f"UKF_SEED must be an integer, got {env!r}") from None
    return DEFAULT_SEED if flag is None else flag


def _spec_from_args(a) -> KernelSpec:
    if a.mr < 1 or a.nr < 1:
        raise UsageError("--mr and --nr must be positive")
    if a.packed_a is None:
        spec = auto_spec(a.mr, a.nr, a.precision, a.target, a.alpha_beta)
    else:
        spec = KernelSpec(a.mr, a.nr, a.precision, a.target, a.packed_a, a.alpha_beta, getattr(a, "style", None))
    try:
        spec.validate()
    except UkfError as exc:
        hint = ""
        if spec.packed_a and spec.mr % spec.vl:
            hint = "; try --no-packed-a"
        raise UsageError(f"invalid kernel spec: {exc}{hint}") from None
    return spec


# --------------------------------------------------------------------------- #
# generate


def cmd_generate(a) -> int:
    spec = _spec_from_args(a)
    out = Path(a.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    try:
        r = schedule(spec)
    except UkfError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    sizes = {"K_R": a.harness_k} if a.harness_k else None
    unit = emit_unit(r.proc, spec.lib, sizes, symbol=spec.symbol, restrict=a.restrict)
    written = []
    for name, text in unit.files().items():
        (out / name).write_text(text)
        written.append(name)
    script = out / f"{spec.symbol}.schedule"
    script.write_text(r.script.serialize())
    written.append(script.name)
    for label, proc in r.snapshots.items():
        snap = out / f"{spec.symbol}.{label}.ir"
        snap.write_text(pretty_print(proc) + "\n")
        written.append(snap.name)
    dt = time.perf_counter() - t0
    print(f"{spec.symbol}: {len(r.script.steps)} steps, {len(r.snapshots)} snapshots, {dt:.2f}s")
    for name in written:
        print(f"  {out / name}")
    return EXIT_OK


# --------------------------------------------------------------------------- #
# verify


def _chain(base, steps, target, trials, mode, seed):
    """Apply steps one by one, checking each against its predecessor."""
    cur = base
    for n, step in enumerate(steps, 1):
        try:
            nxt = apply_step(cur, step, target)
        except UkfError as exc:
            return cur, f"step {n} ({step.line()}) rejected: {exc}"
        rep = equivalent(cur, nxt, trials, mode, target=target, seed=seed + n)
        if not rep.equivalent:
            return nxt, f"step {n} ({step.line()}) changed semantics:\n{rep.to_text()}"
        cur = nxt
    return cur, None


def _verify_one(label, base, steps, lib, a, seed) -> bool:
    t0 = time.perf_counter()
    final, err = _chain(base, steps, lib, a.trials, a.mode, seed)
    if err is None:
        rep = equivalent(final, naive_reference(final), a.trials, a.mode, target=lib, seed=seed)
        if not rep.equivalent:
            err = f"final kernel differs from the naive oracle:\n{rep.to_text()}"
    if err is None and a.harness:
        from .codegen import emit_harness
        from .toolchain import harness_plan, run_harness

        if harness_plan(lib) is None:
            print(f"  {label}: harness skipped (no toolchain for {lib.name})")
        else:
            res = run_harness(emit_harness(final, lib, {"K_R": a.harness_k}, symbol=label), lib)
            if not res.passed:
                err = f"C harness failed (exit {res.returncode}): {res.stderr.strip() or res.stdout.strip()}"
    dt = time.perf_counter() - t0
    if err is None:
        print(f"PASS {label} ({len(steps)} steps, {a.trials} trials, {a.mode}, {dt:.1f}s)")
        return True
    print(f"FAIL {label}: {err}")
    return False


def _specs_for(name: str, a) -> list[KernelSpec]:
    if name in PRESETS:
        return preset(name, a.precision, a.target, a.alpha_beta)
    if "x" in name:
        try:
            mr, nr = (int(x) for x in name.lower().split("x"))
        except ValueError:
            raise UsageError(f"cannot parse spec {name!r}; use a preset or MRxNR") from None
        ns = argparse.Namespace(**{**vars(a), "mr": mr, "nr": nr})
        return [_spec_from_args(ns)]
    raise UsageError(f"unknown spec {name!r}; presets: {', '.join(PRESETS)}")


def cmd_verify(a) -> int:
    seed = resolve_seed(a.seed)
    ok = True
    if a.script:
        path = Path(a.script)
        if not path.exists():
            raise UsageError(f"no such script: {path}")
        text = path.read_text()
        meta, target = ScheduleScript.parse_header(text)
        try:
            spec = spec_from_meta(meta)
        except (KeyError, ValueError) as exc:
            raise UsageError(f"{path}: header lacks kernel metadata ({exc})") from None
        lib = get_target(target or spec.target)
        steps = []
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#") or line.split()[0] in ("meta", "target", "phase"):
                continue
            try:
                steps.append(Step.parse(line))
            except (ValueError, UkfError) as exc:
                raise UsageError(f"{path}:{n}: {exc}") from None
        ok = _verify_one(path.name, base_proc(spec), steps, lib, a, seed)
    else:
        for spec in _specs_for(a.spec, a):
            try:
                r = schedule(spec)
            except UkfError as exc:
                print(f"FAIL {spec.symbol}: {exc}")
                ok = False
                continue
            ok &= _verify_one(spec.symbol, r.script.base, r.script.steps, spec.lib, a, seed)
    return EXIT_OK if ok else EXIT_FAIL


# --------------------------------------------------------------------------- #
# shapes


def _layer_rows(layer, family: KernelFamily, a, seed: int) -> list[dict]:
    k_run = layer.k if a.full else min(layer.k, a.k_cap)
    m_run, n_run = layer.m, layer.n
    notes = []
    if k_run != layer.k:
        notes.append(f"k capped at {k_run}")
    if a.mn_cap and not a.full:
        m_run, n_run = min(m_run, a.mn_cap), min(n_run, a.mn_cap)
        if (m_run, n_run) != (layer.m, layer.n):
            notes.append(f"m,n capped at {a.mn_cap}")
    rng = np.random.default_rng([seed, layer.id, layer.m, layer.n, layer.k])
    A, B, C = random_int_operands(rng, m_run, n_run, k_run)
    stats = GemmStats()
    t0 = time.perf_counter()
    base = {"command": "shapes", "model": layer.model, "layer": layer.id, "m": layer.m, "n": layer.n, "k": layer.k,
            "k_run": k_run}
    try:
        out = gemm(A, B, C, GemmShape(m_run, n_run, k_run), family=family, stats=stats, edge=a.edge)
    except UkfError as exc:
        return [{**base, "kernel": "-", "tiles": 0, "verdict": "error", "max_err": "",
                 "wall_s": f"{time.perf_counter() - t0:.3f}", "note": "; ".join(notes + [str(exc)])}]
    oracle = reference_gemm(A, B, C)
    verdict = "pass" if bitwise_equal(out, oracle) else "fail"
    max_err = float(np.max(np.abs(out.astype(np.float64) - oracle))) if out.size else 0.0
    wall = f"{time.perf_counter() - t0:.3f}"
    if stats.padded:
        notes.append(f"{stats.padded} padded blocks")
    rows = []
    for (mr, nr, mode), tiles in sorted(stats.kernel_calls.items(), key=lambda kv: (-kv[0][0] * kv[0][1], -kv[0][1])):
        rows.append({**base, "kernel": f"{mr}x{nr}" + ("" if mode == "unit" else f"_{mode}"), "tiles": tiles,
                     "verdict": verdict, "max_err": f"{max_err:g}", "wall_s": wall, "note": "; ".join(notes)})
    return rows


def _layer_job(args):
    layer, tiles, prec, target, a, seed = args
    return _layer_rows(layer, KernelFamily(tiles, prec, target), a, seed)


def cmd_shapes(a) -> int:
    seed = resolve_seed(a.seed)
    if a.family not in preset_names():
        raise UsageError(f"unknown family {a.family!r}; known: {', '.join(preset_names())}")
    family = KernelFamily.preset(a.family, a.precision, a.target)
    layers = load_dataset(a.model)
    if a.layers:
        wanted = {int(x) for x in a.layers.split(",")}
        layers = [l for l in layers if l.id in wanted]
    if a.jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(a.jobs) as pool:
            chunks = list(pool.map(_layer_job, [(l, family.tiles, a.precision, a.target, a, seed) for l in layers]))
    else:
        chunks = [_layer_rows(l, family, a, seed) for l in layers]
    rows = sorted((r for c in chunks for r in c), key=lambda r: (int(r["layer"]), r["kernel"]))
    sink = open(a.csv, "w", newline="") if a.csv and a.csv != "-" else sys.stdout
    try:
        w = csv.DictWriter(sink, fieldnames=CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    finally:
        if sink is not sys.stdout:
            sink.close()
    failed = sorted({r["layer"] for r in rows if r["verdict"] != "pass"})
    summary = f"{a.model}: {len(layers) - len(failed)}/{len(layers)} layers pass with {a.family}"
    print(summary, file=sys.stderr if sink is sys.stdout else sys.stdout)
    return EXIT_OK if not failed else EXIT_FAIL


# --------------------------------------------------------------------------- #
# model


def _load_cache(spec: str) -> CacheDescriptor:
    if spec in CACHE_PRESETS:
        return CACHE_PRESETS[spec]
    path = Path(spec)
    if not path.exists():
        raise UsageError(f"unknown cache preset or file {spec!r}; presets: {', '.join(CACHE_PRESETS)}")
    text = path.read_text()
    try:
        data = json.loads(text) if path.suffix == ".json" else tomli.loads(text)
        return CacheDescriptor.from_dict(data)
    except (ValueError, KeyError, TypeError, tomli.TOMLDecodeError) as exc:
        raise UsageError(f"{path}: invalid cache descriptor ({exc})") from None


def cmd_model(a) -> int:
    cache = _load_cache(a.cache)
    params = select_cache_params(cache, a.mr, a.nr, a.precision)
    holds = capacity_ok(cache, params, a.precision)
    if a.json:
        print(json.dumps({"cache": cache.to_dict(), "mr": params.mr, "nr": params.nr, "mc": params.mc,
                          "kc": params.kc, "nc": params.nc, "inequalities_hold": holds}, indent=2))
    else:
        print(f"cache {cache.name}: mr={params.mr} nr={params.nr} precision={a.precision}")
        print(f"mc={params.mc} kc={params.kc} nc={params.nc}")
        print(f"capacity inequalities {'hold' if holds else 'VIOLATED (degenerate cache, clamped)'}")
    return EXIT_OK


# --------------------------------------------------------------------------- #
# parser


def _kernel_args(p: argparse.ArgumentParser, need_shape: bool) -> None:
    if need_shape:
        p.add_argument("--mr", type=int, required=True, help="register tile rows")
        p.add_argument("--nr", type=int, required=True, help="register tile columns")
    p.add_argument("--precision", default="f32", choices=("f32", "f16"))
    p.add_argument("--target", default="neon_f32", choices=BUILTIN_NAMES)
    p.add_argument("--packed-a", dest="packed_a", action=argparse.BooleanOptionalAction, default=None,
                   help="packed A (lane FMA) or broadcast A; default picks packed when VL divides MR")
    p.add_argument("--alpha-beta", dest="alpha_beta", default="unit", choices=("unit", "generic"))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ukf", description="Scheduled GEMM micro-kernel generator.")
    ap.add_argument("--version", action="version", version=f"ukf {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="schedule one kernel and write C, harness, script and snapshots")
    _kernel_args(g, True)
    g.add_argument("--style", choices=("lane", "bcast_b", "bcast_a"), default=None, help="override schedule style")
    g.add_argument("--out-dir", default=".")
    g.add_argument("--restrict", action="store_true", help="qualify pointer arguments with restrict")
    g.add_argument("--harness-k", type=int, default=8, help="K used by the harness (0: no harness)")
    g.set_defaults(func=cmd_generate)

    v = sub.add_parser("verify", help="check every schedule step and the final kernel against the oracle")
    src = v.add_mutually_exclusive_group(required=True)
    src.add_argument("--spec", help=f"preset ({', '.join(PRESETS)}) or MRxNR")
    src.add_argument("--script", help="schedule script written by generate")
    _kernel_args(v, False)
    v.add_argument("--trials", type=int, default=20)
    v.add_argument("--mode", default="integer_exact", choices=("integer_exact", "real_tolerance"))
    v.add_argument("--seed", type=int, default=None)
    v.add_argument("--harness", action="store_true", help="also compile and run the C harness when possible")
    v.add_argument("--harness-k", type=int, default=8)
    v.set_defaults(func=cmd_verify)

    s = sub.add_parser("shapes", help="desk-scale GEMM verification over a layer dataset, CSV output")
    s.add_argument("--model", required=True, choices=MODELS)
    s.add_argument("--family", default="paper-family")
    s.add_argument("--precision", default="f32", choices=("f32", "f16"))
    s.add_argument("--target", default="neon_f32", choices=BUILTIN_NAMES)
    s.add_argument("--csv", default="-", help="output file ('-' for stdout)")
    s.add_argument("--k-cap", type=int, default=512)
    s.add_argument("--mn-cap", type=int, default=None, help="also cap m and n (for the square sizes)")
    s.add_argument("--full", action="store_true", help="run full sizes, no caps")
    s.add_argument("--edge", default="family", choices=EDGE_POLICIES)
    s.add_argument("--layers", default=None, help="comma-separated layer ids")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(func=cmd_shapes)

    m = sub.add_parser("model", help="print cache blocking parameters")
    m.add_argument("--cache", default="carmel", help=f"preset ({', '.join(CACHE_PRESETS)}) or TOML/JSON file")
    m.add_argument("--mr", type=int, default=8)
    m.add_argument("--nr", type=int, default=12)
    m.add_argument("--precision", default="f32", choices=("f32", "f16"))
    m.add_argument("--json", action="store_true")
    m.set_defaults(func=cmd_model)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        a = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return a.func(a)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyError as exc:
        print(f"error: {exc.args[0] if exc.args else exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
