"""Optional C toolchain access for compiling and running harnesses.

Nothing in the core package needs a compiler. Harnesses for a target run
either natively (host supports the ISA) or, for the Neon libraries on other
hosts, against a portable emulation header shipped in ``ukf/data/emul``.
``UKF_CC`` selects the compiler; otherwise clang, then gcc, is used.
"""

from __future__ import annotations

import os
import platform
import shutil
import subprocess
import tempfile
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path

from .targets import TargetLibrary, get_target


@dataclass(frozen=True)
class HarnessPlan:
    cc: str
    flags: tuple[str, ...]
    mode: str  # native | emulated


@dataclass(frozen=True)
class HarnessResult:
    returncode: int
    stdout: str
    stderr: str
    plan: HarnessPlan

    @property
    def passed(self) -> bool:
        return self.returncode == 0


def _compilers() -> list[str]:
    env = os.environ.get("UKF_CC")
    names = [env] if env else ["clang", "gcc", "cc"]
    return [n for n in names if n and shutil.which(n)]


@lru_cache(maxsize=None)
def _cpu_flags() -> frozenset[str]:
    try:
        text = Path("/proc/cpuinfo").read_text()
    except OSError:
        return frozenset()
    for line in text.splitlines():
        if line.startswith(("flags", "Features")):
            return frozenset(line.split(":", 1)[1].split())
    return frozenset()


def emulation_dir() -> Path:
    return Path(str(resources.files("ukf.data").joinpath("emul")))


def _is_arm() -> bool:
    return platform.machine().lower() in ("aarch64", "arm64")


@lru_cache(maxsize=None)
def _accepts(cc: str, flags: tuple[str, ...], probe: str) -> bool:
    with tempfile.TemporaryDirectory() as tmp:
        src = Path(tmp) / "probe.c"
        src.write_text(probe)
        r = subprocess.run([cc, *flags, "-o", str(Path(tmp) / "probe"), str(src), "-lm"],
                           capture_output=True, text=True)
        return r.returncode == 0


def harness_plan(t) -> HarnessPlan | None:
    """How to build and run harnesses for `t` on this host, or None."""
    lib: TargetLibrary = get_target(t)
    uses_f16 = any(p.value == "f16" for p in lib.precisions)
    neon = "arm_neon.h" in lib.headers
    for cc in _compilers():
        if neon and _is_arm():
            flags = ("-std=c99", "-O1", *lib.cflags)
            if _accepts(cc, flags, "#include <arm_neon.h>\nint main(void){return 0;}\n"):
                return HarnessPlan(cc, flags, "native")
        elif neon:
            if uses_f16 and "clang" not in os.path.basename(cc):
                continue
            flags = ("-std=c99", "-O1", "-I", str(emulation_dir()))
            if uses_f16:
                flags += ("-mf16c",) if "f16c" in _cpu_flags() else ()
            probe = "#include <arm_neon.h>\n" + ("float16_t x; " if uses_f16 else "") + "int main(void){return 0;}\n"
            if _accepts(cc, flags, probe):
                return HarnessPlan(cc, flags, "emulated")
        else:
            needed = {f.removeprefix("-m") for f in lib.cflags if f.startswith("-m")}
            if not needed <= _cpu_flags():
                continue
            flags = ("-std=c99", "-O1", *lib.cflags)
            probe = "".join(f"#include <{h}>\n" for h in lib.headers) + "int main(void){return 0;}\n"
            if _accepts(cc, flags, probe):
                return HarnessPlan(cc, flags, "native")
    return None


def run_harness(source: str, t, args: tuple[str, ...] = (), plan: HarnessPlan | None = None,
                workdir: str | None = None) -> HarnessResult:
    plan = plan or harness_plan(t)
    if plan is None:
        raise RuntimeError(f"no toolchain can run harnesses for {get_target(t).name} on this host")
    with tempfile.TemporaryDirectory(dir=workdir) as tmp:
        src = Path(tmp) / "harness.c"
        exe = Path(tmp) / "harness"
        src.write_text(source)
        r = subprocess.run([plan.cc, *plan.flags, "-o", str(exe), str(src), "-lm"], capture_output=True, text=True)
        if r.returncode != 0:
            return HarnessResult(-1, r.stdout, r.stderr, plan)
        r = subprocess.run([str(exe), *args], capture_output=True, text=True, timeout=60)
        return HarnessResult(r.returncode, r.stdout, r.stderr, plan)


def syntax_check(source: str, t) -> tuple[bool, str] | None:
    """Check `source` against the real target headers with a cross clang, if available."""
    lib = get_target(t)
    clang = shutil.which("clang")
    if clang is None:
        return None
    if "arm_neon.h" in lib.headers:
        flags = ["--target=aarch64-linux-gnu", "-ffreestanding", *lib.cflags]
    else:
        flags = list(lib.cflags)
    with tempfile.TemporaryDirectory() as tmp:
        src = Path(tmp) / "unit.c"
        src.write_text(source)
        r = subprocess.run([clang, "-std=c99", "-fsyntax-only", "-Wall", "-Werror", *flags, str(src)],
                           capture_output=True, text=True)
        return r.returncode == 0, r.stderr
