import argparse
import json
import os
import subprocess
import sys

import pytest

from cgsnash.cli import delta_sequence, main, number


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def ex2_table(tmp_path_factory):
    out = tmp_path_factory.mktemp("solve")
    assert run("solve", "--game", "example2", "--control-points", 3, "--n", 16,
               "--grid", "-2:2:1/32", "--out", out) == 0
    return out / "table.json"


def test_number_parsing():
    assert number("1/256") == 1 / 256
    assert number("-0.5") == -0.5
    with pytest.raises(argparse.ArgumentTypeError):
        number("1/0")
    with pytest.raises(argparse.ArgumentTypeError):
        number("abc")


def test_delta_sequence():
    assert delta_sequence("1/32..1/256") == [1 / 32, 1 / 64, 1 / 128, 1 / 256]
    assert delta_sequence("1/64,1/128") == [1 / 64, 1 / 128]
    with pytest.raises(argparse.ArgumentTypeError):
        delta_sequence("1/32..1/48")


def test_solve_writes_table(ex2_table):
    doc = json.loads(ex2_table.read_text())
    assert doc["format"] == "cgsnash.value_table/1"
    assert doc["N"] == 16


def test_solve_is_bit_identical(ex2_table, tmp_path):
    assert run("solve", "--game", "example2", "--control-points", 3, "--n", 16,
               "--grid", "-2:2:1/32", "--out", tmp_path) == 0
    assert (tmp_path / "table.json").read_bytes() == ex2_table.read_bytes()
    assert not [p for p in os.listdir(tmp_path) if p.startswith(".tmp-")]


def test_check_s(ex2_table, tmp_path):
    assert run("check-s", "--table", ex2_table, "--out", tmp_path) == 0
    doc = json.loads((tmp_path / "check_s.json").read_text())
    assert doc["passed"] is True


def test_simulate_closed_form(tmp_path, capsys):
    assert run("simulate", "--game", "example1", "--delta", "1/64", "--x0", "0,0", "--out", tmp_path) == 0
    summary = json.loads((tmp_path / "simulation.json").read_text())
    assert summary["payoffs"][0] >= 1 - 2 / 64 - 1e-12
    assert (tmp_path / "trajectory.csv").exists()
    header = (tmp_path / "guide_trace.csv").read_text().splitlines()[0]
    assert header == "t,x1,x2,branch,d,Y1,Y2,control1,control2"
    assert "payoffs" in capsys.readouterr().out


def test_simulate_multivalued(ex2_table, tmp_path):
    assert run("simulate", "--game", "example2", "--control-points", 3, "--mode", "multivalued",
               "--table", ex2_table, "--rule", "max_J2", "--x0", "0", "--out", tmp_path) == 0
    summary = json.loads((tmp_path / "simulation.json").read_text())
    assert summary["delta"] == 1 / 16 and summary["envelope_ok"]


def test_deviate_small(tmp_path):
    assert run("deviate", "--game", "example1", "--deltas", "1/16..1/32", "--devs", "bang4:3,const",
               "--out", tmp_path) == 0
    doc = json.loads((tmp_path / "equilibrium.json").read_text())
    assert len(doc["rows"]) == 2 and doc["rows"][0]["runs"] == 1 + 2 * 8
    assert (tmp_path / "equilibrium.csv").read_text().startswith("delta,x0_1,x0_2")


def test_deviate_exit_code_follows_report(tmp_path):
    # a deviation that ends above the consistent payoff by less than the slack of the guide
    code = run("deviate", "--game", "example1", "--deltas", "1/8", "--devs", "const", "--tol", "1e-9",
               "--x0", "0.3,-0.2", "--out", tmp_path)
    doc = json.loads((tmp_path / "equilibrium.json").read_text())
    assert code == (0 if doc["passed"] else 1)


def test_check_f_exit_codes(tmp_path):
    assert run("check-f", "--game", "example1", "--candidate", "cstar", "--out", tmp_path) == 0
    assert run("check-f", "--game", "example1", "--candidate", "lagging", "--eps", "0.005",
               "--out", tmp_path) == 1
    doc = json.loads((tmp_path / "check_f.json").read_text())
    assert doc["passed"] is False


def test_hj_residual(tmp_path):
    assert run("hj-residual", "--game", "example1", "--candidate", "phi_alpha:0.5", "--out", tmp_path) == 0
    assert run("hj-residual", "--game", "example1", "--candidate", "phi_alpha:0.5", "--tie-break", "lowest",
               "--out", tmp_path) == 1
    assert run("hj-residual", "--game", "example1", "--candidate", "cstar", "--samples", 10,
               "--out", tmp_path) == 1


def test_lemma1(tmp_path):
    assert run("lemma1", "--game", "example1", "--trials", 50, "--out", tmp_path) == 0
    doc = json.loads((tmp_path / "lemma1.json").read_text())
    assert doc["parameters"]["trials"] == 50


def test_game_file(tmp_path):
    config = tmp_path / "game.toml"
    config.write_text(
        '[game]\nname = "line"\nkind = "affine"\nn = 1\ncontrol_points = 3\nbox_lo = [-0.5]\nbox_hi = [0.5]\n'
        "[dynamics]\nB = [1.0]\nC = [1.0]\nP_lo = [-1.0]\nP_hi = [1.0]\nQ_lo = [-1.0]\nQ_hi = [1.0]\n"
        "[payoff1]\nc = [1.0]\n[payoff2]\nc = [-1.0]\n")
    assert run("lemma1", "--game", config, "--trials", 20, "--out", tmp_path) == 0
    bad = tmp_path / "bad.toml"
    bad.write_text('[game]\nname = "line"\nkind = "affine"\n')
    assert run("lemma1", "--game", bad, "--trials", 20, "--out", tmp_path) == 2


@pytest.mark.parametrize("argv", [
    ["solve", "--game", "nonesuch", "--n", "4", "--grid", "-1:1:0.5"],
    ["solve", "--game", "example1", "--n", "4"],
    ["solve", "--game", "example1", "--n", "4", "--grid", "-1:1:0.5", "--grid", "0:1:0.5", "--grid", "0:1:1"],
    ["solve", "--game", "example2", "--n", "4", "--grid", "-0.1:0.1:0.05"],
    ["simulate", "--game", "example1", "--x0", "0,0"],
    ["simulate", "--game", "example1", "--mode", "multivalued", "--x0", "0,0"],
    ["check-s", "--table", "missing.json"],
    ["check-f", "--game", "example1", "--candidate", "mystery"],
    ["solve", "--game", "example1"],
    ["simulate", "--game", "example1", "--delta", "1/0", "--x0", "0,0"],
])
def test_usage_errors_exit_2(argv, tmp_path):
    assert main(argv + ["--out", str(tmp_path)]) == 2
    assert not list(tmp_path.iterdir())


def test_console_script_entry():
    out = subprocess.run([sys.executable, "-m", "cgsnash.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for command in ("solve", "simulate", "deviate", "check-f", "check-s", "hj-residual", "lemma1"):
        assert command in out.stdout
