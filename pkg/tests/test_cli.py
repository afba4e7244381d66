import json
import subprocess
import sys

import pytest

from cacheshield.cli import EXIT_ERROR, EXIT_OK, EXIT_VIOLATION, main
from cacheshield.corpus import EXAMPLE_A, EXAMPLE_B, block_sequence_program

DESK = "sets: 32\nline_size: 32\nassoc: 1\npolicy: direct\n"


@pytest.fixture
def files(tmp_path):
    (tmp_path / "exA.prog").write_text(EXAMPLE_A)
    (tmp_path / "exB.prog").write_text(EXAMPLE_B)
    (tmp_path / "lru.prog").write_text(block_sequence_program([1, 2, 2, 1]))
    (tmp_path / "desk.yaml").write_text(DESK)
    (tmp_path / "lru.yaml").write_text("sets: 1\nline_size: 16\nassoc: 2\npolicy: lru\n")
    return tmp_path


def run(*args):
    return main([str(a) for a in args])


def test_verify_exit_codes(solver, files, capsys):
    assert run("verify", "--program", files / "exA.prog", "--cache", files / "desk.yaml", "--model", "time") == EXIT_OK
    assert "verdict: verified" in capsys.readouterr().out
    out = files / "out"
    assert run("verify", "--program", files / "exB.prog", "--cache", files / "desk.yaml", "--model", "time",
               "--out", out, "--dump") == EXIT_VIOLATION
    rep = json.loads((out / "verify.json").read_text())
    assert rep["verdict"] == "violation" and len(rep["witnesses"]) == 2
    assert (out / "system.txt").read_text().startswith("rho.")
    assert any(p.suffix == ".smt2" for p in (out / "queries").iterdir())


def test_missing_solver(files, capsys):
    code = run("verify", "--program", files / "exA.prog", "--cache", files / "desk.yaml", "--model", "time",
               "--solver", "definitely-not-a-solver")
    assert code == EXIT_ERROR
    assert "not found" in capsys.readouterr().err


def test_missing_program(files):
    assert run("verify", "--program", files / "nope.prog", "--cache", files / "desk.yaml", "--model", "time") == 2


def test_bad_cache_config(files):
    (files / "bad.yaml").write_text("sets: 3\nline_size: 16\n")
    assert run("quantify", "--program", files / "exA.prog", "--cache", files / "bad.yaml", "--model", "time") == 2


def test_structured_report_is_deterministic(solver, files, capsys):
    args = ["verify", "--program", files / "exB.prog", "--cache", files / "desk.yaml", "--model", "trace",
            "--format", "json"]
    outs = []
    for _ in range(2):
        run(*args)
        d = json.loads(capsys.readouterr().out)
        d.pop("wall_time_s")
        outs.append(json.dumps(d))
    assert outs[0] == outs[1]


@pytest.mark.parametrize("model", ["time", "trace"])
def test_patch_then_quantify(solver, files, capsys, model):
    out = files / f"out-{model}"
    assert run("patch", "--program", files / "exB.prog", "--cache", files / "desk.yaml", "--model", model,
               "--out", out) == EXIT_OK
    rep = json.loads((out / "patch.json").read_text())
    assert len(rep["classes"]) == 2
    assert rep["metrics_before"]["classes"] == 2 and rep["metrics_after"]["classes"] == 1
    if model == "time":
        assert sorted(p["delta"] for p in rep["patches"]) == [0, 1]
    else:
        assert rep["reference"] == "1100"
    capsys.readouterr()
    assert run("quantify", "--program", files / "exB.prog", "--cache", files / "desk.yaml", "--model", model,
               "--format", "json") == EXIT_OK
    assert json.loads(capsys.readouterr().out)["capacity_bits"] == 1.0
    run("quantify", "--program", files / "exB.prog", "--cache", files / "desk.yaml", "--model", model,
        "--patches", out / "patches.json", "--format", "json")
    q = json.loads(capsys.readouterr().out)
    assert q["capacity_bits"] == 0.0
    assert q["shannon_remaining"] == q["shannon_prior"] == 8.0


def test_patch_file_for_other_model_is_rejected(solver, files):
    out = files / "o"
    run("patch", "--program", files / "exB.prog", "--cache", files / "desk.yaml", "--model", "time", "--out", out)
    assert run("quantify", "--program", files / "exB.prog", "--cache", files / "desk.yaml", "--model", "trace",
               "--patches", out / "patches.json") == EXIT_ERROR


def test_patch_exA_is_empty(solver, files):
    out = files / "pa"
    assert run("patch", "--program", files / "exA.prog", "--cache", files / "desk.yaml", "--model", "time",
               "--out", out) == EXIT_OK
    assert json.loads((out / "patches.json").read_text())["patches"] == []
    assert "verified" in json.loads((out / "patch.json").read_text())["note"]


def test_quantify_exA_and_prior(files, capsys):
    run("quantify", "--program", files / "exA.prog", "--cache", files / "desk.yaml", "--model", "time",
        "--format", "json")
    assert json.loads(capsys.readouterr().out)["capacity_bits"] == 0.0
    prior = {str(k): "0" for k in range(256)}
    prior["255"], prior["0"] = "1/2", "1/2"
    (files / "prior.json").write_text(json.dumps(prior))
    run("quantify", "--program", files / "exB.prog", "--cache", files / "desk.yaml", "--model", "time",
        "--prior", files / "prior.json", "--format", "json")
    q = json.loads(capsys.readouterr().out)
    assert q["shannon_prior"] == 1.0 and q["shannon_remaining"] == 0.0


def test_simulate(files, capsys):
    assert run("simulate", "--program", files / "exB.prog", "--cache", files / "desk.yaml",
               "--secret", "key=255", "--format", "json") == EXIT_OK
    d = json.loads(capsys.readouterr().out)
    assert d["trace"] == "100" and d["time"] == "1"
    assert [r["result"] for r in d["accesses"]] == ["-", "miss", "hit", "hit"]
    run("simulate", "--program", files / "lru.prog", "--cache", files / "lru.yaml", "--secret", "k=0")
    assert "trace observation: 1100" in capsys.readouterr().out


@pytest.mark.parametrize("secret", ["key=256", "nope=1", "key"])
def test_simulate_bad_secret(files, secret):
    assert run("simulate", "--program", files / "exB.prog", "--cache", files / "desk.yaml", "--secret", secret) == 2


def test_module_entry_point(files):
    r = subprocess.run([sys.executable, "-m", "cacheshield", "simulate", "--program", str(files / "exA.prog"),
                        "--cache", str(files / "desk.yaml"), "--secret", "key=0"], capture_output=True, text=True)
    assert r.returncode == 0 and "time observation: 2" in r.stdout
