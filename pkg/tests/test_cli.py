import json

import pytest

from dyncomp.cli import main


def run_cli(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out


def test_compile_nf(tmp_path, capsys):
    out = tmp_path / "succ.nf.json"
    code, _ = run_cli(capsys, "compile", "corpus:succ", "--backend", "nf",
                      "--out", str(out))
    assert code == 0
    doc = json.loads(out.read_text())
    assert set(doc) == {"m", "base", "gated", "layout", "outputs"}
    assert doc["m"] > 0


def test_compile_ode_has_clock_roles(tmp_path, capsys):
    out = tmp_path / "zero.ode.json"
    code, _ = run_cli(capsys, "compile", "corpus:zero", "--backend", "ode",
                      "--out", str(out))
    assert code == 0
    doc = json.loads(out.read_text())
    assert doc["roles"]["clock"] == [0, 1]


def test_compile_missing_file(capsys):
    with pytest.raises(SystemExit) as err:
        main(["compile", "nonexistent.loop", "--backend", "nf"])
    assert err.value.code == 2


def test_run_all_backends_agree(capsys):
    code, out = run_cli(capsys, "run", "corpus:add", "2", "3", "--backend", "all")
    assert code == 0
    assert out.count("[5]") == 6


def test_run_euler_with_s(capsys):
    code, out = run_cli(capsys, "run", "corpus:mul", "2", "2",
                        "--backend", "euler", "--s", "10", "--format", "json")
    assert code == 0
    doc = json.loads(out)
    assert doc["results"]["euler"]["outputs"] == [4]
    assert doc["results"]["euler"]["N"] > 0


def test_run_rho_logistic(capsys):
    code, out = run_cli(capsys, "run", "corpus:succ", "3", "--backend", "rho",
                        "--activation", "logistic:64", "--format", "json")
    assert code == 0
    doc = json.loads(out)
    assert doc["results"]["rho"]["outputs"] == [4]


def test_verify_small_suite(capsys):
    code, out = run_cli(capsys, "verify", "--programs", "zero,succ",
                        "--grid-max", "2")
    assert code == 0
    assert out.strip().endswith("verdict: PASS")


def test_verify_fault_injection(capsys):
    code, out = run_cli(capsys, "verify", "--programs", "zero",
                        "--grid-max", "1", "--inject-fault")
    assert code == 1
    assert "MISMATCH" in out or "FAIL" in out


def test_verify_empty_suite(capsys):
    code, out = run_cli(capsys, "verify", "--programs", "nosuch")
    assert code == 0
    assert "warning: empty suite" in out


def test_bounds(capsys):
    code, out = run_cli(capsys, "bounds", "corpus:succ", "2", "--empirical")
    assert code == 0
    doc = json.loads(out)
    for key in ("machine_steps", "T_nf", "s0", "tau", "B_tilde",
                "theoretical_S", "empirical_S"):
        assert key in doc
    assert int(doc["empirical_S"]) <= int(doc["theoretical_S_digits"]) * 10**9


def test_witness_rounder(capsys):
    code, out = run_cli(capsys, "witness", "rounder", "--coeffs", "0,1",
                        "--N", "1")
    assert code == 0
    doc = json.loads(out)
    assert doc["revalidates"] is True


def test_witness_selector(capsys):
    code, out = run_cli(capsys, "witness", "selector")
    assert code == 0
    assert json.loads(out)["revalidates"] is True
