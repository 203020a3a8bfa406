from __future__ import annotations

import csv
import io
import json

import pytest

from ukf.cli import CSV_FIELDS, main, resolve_seed
from ukf.driver import CACHE_PRESETS

SYM = "gemm_ukr_8x12_f32_neon_f32"


def test_usage_errors(capsys):
    assert main(["generate", "--mr", "7", "--nr", "12", "--packed-a"]) == 2
    assert "--no-packed-a" in capsys.readouterr().err
    assert main(["generate", "--mr", "0", "--nr", "4"]) == 2
    assert main(["nonsense"]) == 2
    assert main(["verify", "--spec", "nope"]) == 2
    assert main(["model", "--cache", "/no/such/file"]) == 2


def test_generate_writes_everything(tmp_path, capsys):
    assert main(["generate", "--mr", "8", "--nr", "12", "--out-dir", str(tmp_path)]) == 0
    assert f"{SYM}: " in capsys.readouterr().out
    names = {p.name for p in tmp_path.iterdir()}
    want = {f"{SYM}{x}" for x in (".c", ".h", "_harness.c", ".schedule")}
    want |= {f"{SYM}.v{i}.ir" for i in range(1, 7)}
    assert names == want
    assert "C_reg: f32[12, 2, 4] @ Neon" in (tmp_path / f"{SYM}.v3.ir").read_text()


def test_generate_f16(tmp_path):
    assert main(["generate", "--mr", "8", "--nr", "12", "--precision", "f16", "--target", "neon_f16",
                 "--out-dir", str(tmp_path), "--harness-k", "0"]) == 0
    (src,) = tmp_path.glob("*_neon_f16.c")
    assert "float16x8_t" in src.read_text()
    assert not list(tmp_path.glob("*_harness.c"))


def test_verify_paper_kernel(capsys):
    assert main(["verify", "--spec", "paper-8x12", "--trials", "5"]) == 0
    assert capsys.readouterr().out.startswith(f"PASS {SYM}")


def test_verify_script_round_trip(tmp_path, capsys):
    main(["generate", "--mr", "4", "--nr", "4", "--out-dir", str(tmp_path), "--harness-k", "0"])
    capsys.readouterr()
    script = next(tmp_path.glob("*.schedule"))
    assert main(["verify", "--script", str(script), "--trials", "5"]) == 0
    assert "PASS" in capsys.readouterr().out


def _truncated_script(tmp_path, n_steps: int, extra: str):
    main(["generate", "--mr", "8", "--nr", "12", "--out-dir", str(tmp_path), "--harness-k", "0"])
    lines, kept = [], 0
    for line in (tmp_path / f"{SYM}.schedule").read_text().splitlines():
        head = line.split()[0] if line.strip() else ""
        if head in ("", "#", "meta", "target", "phase") or line.startswith("#"):
            lines.append(line)
            continue
        if kept == n_steps:
            break
        lines.append(line)
        kept += 1
    lines.append(extra)
    path = tmp_path / "bad.schedule"
    path.write_text("\n".join(lines) + "\n")
    return path


def test_verify_illegal_script_names_step(tmp_path, capsys):
    path = _truncated_script(tmp_path, 18, "reorder_loops 'k jt'")
    capsys.readouterr()
    assert main(["verify", "--script", str(path), "--trials", "5"]) == 1
    out = capsys.readouterr().out
    assert out.startswith("FAIL bad.schedule: step 19 (reorder_loops")


def test_verify_garbage_script(tmp_path):
    path = tmp_path / "g.schedule"
    path.write_text("meta mr 4\nmeta nr 4\nmeta precision f32\nmeta target neon_f32\nmeta packed_a 1\n"
                    "meta mode unit\nfrobnicate x\n")
    assert main(["verify", "--script", str(path)]) == 2


def test_shapes_csv(tmp_path, capsys):
    out = tmp_path / "r.csv"
    assert main(["shapes", "--model", "resnet50", "--layers", "2,12", "--k-cap", "64", "--mn-cap", "64",
                 "--csv", str(out)]) == 0
    assert "2/2 layers pass" in capsys.readouterr().out
    rows = list(csv.DictReader(out.open()))
    assert list(rows[0]) == list(CSV_FIELDS)
    assert {r["layer"] for r in rows} == {"2", "12"}
    assert all(r["verdict"] == "pass" for r in rows)
    l12 = [r for r in rows if r["layer"] == "12"]
    assert l12[0]["k"] == "2304" and l12[0]["k_run"] == "64"
    assert "k capped at 64" in l12[0]["note"]


def test_shapes_stdout(capsys):
    assert main(["shapes", "--model", "vgg16", "--layers", "1", "--mn-cap", "24"]) == 0
    cap = capsys.readouterr()
    rows = list(csv.DictReader(io.StringIO(cap.out)))
    assert rows and rows[0]["k_run"] == "27"
    assert "1/1 layers pass" in cap.err


def test_shapes_unknown_family():
    assert main(["shapes", "--model", "vgg16", "--family", "nope"]) == 2


def test_model_carmel(capsys):
    assert main(["model"]) == 0
    out = capsys.readouterr().out
    assert "kc=512" in out and "hold" in out


def test_model_json_and_file(tmp_path, capsys):
    d = CACHE_PRESETS["carmel"].to_dict()
    d["name"] = "big"
    d["l2"]["capacity"] *= 2
    d["l3"]["capacity"] *= 4
    f = tmp_path / "big.json"
    f.write_text(json.dumps(d))
    assert main(["model", "--json"]) == 0
    base = json.loads(capsys.readouterr().out)
    assert main(["model", "--cache", str(f), "--json"]) == 0
    big = json.loads(capsys.readouterr().out)
    assert base["kc"] == big["kc"] == 512
    assert abs(big["mc"] - 2 * base["mc"]) < 8
    assert big["inequalities_hold"]


def test_model_toml_file(tmp_path, capsys):
    f = tmp_path / "c.toml"
    f.write_text('name = "t"\n[l1]\ncapacity = 32768\noccupancy = 0.5\n[l2]\ncapacity = 1048576\noccupancy = 0.5\n'
                 '[l3]\ncapacity = 8388608\noccupancy = 0.5\n')
    assert main(["model", "--cache", str(f)]) == 0
    assert "cache t:" in capsys.readouterr().out


def test_seed_env_override(monkeypatch):
    monkeypatch.delenv("UKF_SEED", raising=False)
    assert resolve_seed(5) == 5
    monkeypatch.setenv("UKF_SEED", "99")
    assert resolve_seed(5) == 99
    monkeypatch.setenv("UKF_SEED", "x")
    assert main(["verify", "--spec", "4x4", "--trials", "1"]) == 2


@pytest.mark.parametrize("argv", [["--version"], ["generate", "--help"]])
def test_help_exits_zero(argv, capsys):
    assert main(argv) == 0
