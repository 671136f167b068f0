import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cgsnash.conditions import (SampleSpec, TableSampleSpec, candidate, check_F, check_S, f4_surrogate,
                                fd_gradient, hamiltonian, hamiltonian_minmax, hj_residual, modulus_derivative)
from cgsnash.value_table import NoWitness, StateGrid, build_value_table, consistent_move, punish_move

SPEC = SampleSpec((-1.0, -1.0), (1.0, 1.0), points=9, t_points=7, delta=0.01, eps=0.02)


def test_hamiltonian_example1(ex1):
    assert hamiltonian(ex1, 0.0, [0, 0], [1, 0], 1) == -1
    assert hamiltonian(ex1, 0.0, [0, 0], [1, 0], 2) == 1
    assert hamiltonian(ex1, 0.3, [0.2, 0.1], [0, 0], 1) == 0


@settings(max_examples=50, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3))
def test_hamiltonian_closed_form(s1, s2):
    from cgsnash.game_model import builtin_game
    game = builtin_game("example1")
    h1 = hamiltonian(game, 0.0, [0, 0], [s1, s2], 1)
    h2 = hamiltonian(game, 0.0, [0, 0], [s1, s2], 2)
    assert h1 == pytest.approx(2 * abs(s2) - abs(s2 - s1), abs=1e-12)
    assert h2 == pytest.approx(-2 * abs(s2) + abs(s2 - s1), abs=1e-12)
    assert h1 == pytest.approx(hamiltonian_minmax(game, 0.0, [0, 0], [s1, s2], 1), abs=1e-12)
    assert h2 == pytest.approx(hamiltonian_minmax(game, 0.0, [0, 0], [s1, s2], 2), abs=1e-12)


def test_hamiltonian_example2(ex2):
    for s in (-2.0, -0.3, 0.0, 1.5):
        assert hamiltonian(ex2, 0.0, [0.1], [s], 1) == abs(s)


@pytest.mark.parametrize("alpha", [-1, -0.5, 0, 0.3, 1])
def test_phi_alpha_is_classical_solution(ex1, alpha):
    cand = candidate(f"phi_alpha:{alpha}")
    rng = np.random.default_rng(7)
    for _ in range(20):
        res = hj_residual(cand, ex1, rng.random(), rng.uniform(-1, 1, 2))
        assert abs(res.r1) <= 1e-9 and abs(res.r2) <= 1e-9


def test_lowest_tie_break_breaks_phi_alpha(ex1):
    res = hj_residual(candidate("phi_alpha:0.3"), ex1, 0.2, [0.1, 0.1], tie_break="lowest")
    assert res.r1 == 0 and res.r2 == pytest.approx(-2.6)


@pytest.mark.parametrize("tie_break", ["relaxed", "lowest"])
def test_cstar_residual(ex1, tie_break):
    res = hj_residual(candidate("cstar"), ex1, 0.4, [0.3, -0.2], tie_break)
    assert res.r1 == pytest.approx(-2.0, abs=1e-12)
    assert res.v_hat[0] == res.v_hat[1] == 4


def test_zero_gradient_residual_is_time_derivative(ex1):
    from cgsnash.conditions import CandidateValueFunction
    cand = CandidateValueFunction("clock", lambda t, x: 3 * np.asarray(t) + 0 * np.asarray(x)[..., 0],
                                  lambda t, x: -np.asarray(t) + 0 * np.asarray(x)[..., 0])
    res = hj_residual(cand, ex1, 0.5, [0.2, 0.2])
    assert res.r1 == pytest.approx(3.0, abs=1e-8) and res.r2 == pytest.approx(-1.0, abs=1e-8)


def test_residual_rejects_kink(ex2):
    with pytest.raises(ValueError):
        hj_residual(candidate("abs_branch:1"), ex2, 0.5, [0.0])


@pytest.mark.parametrize("name", ["cstar", "phi_alpha:0.3", "perturbed", "abs_branch:-1"])
def test_analytic_gradients_match_finite_differences(name):
    cand = candidate(name)
    rng = np.random.default_rng(1)
    n = 1 if name.startswith("abs") else 2
    for _ in range(10):
        t, x = rng.uniform(0.1, 0.9), rng.uniform(0.2, 1.0, n) * rng.choice([-1, 1], n)
        for i, c in ((1, cand.c1), (2, cand.c2)):
            dt, gx = cand.gradient(i, t, x)
            fdt, fgx = fd_gradient(c, t, x)
            assert np.allclose([dt, *gx], [fdt, *fgx], rtol=1e-6, atol=1e-6)


def test_check_F_cstar_passes(ex1):
    report = check_F(candidate("cstar"), ex1, SPEC)
    assert report.passed
    assert report.parameters["positions"] >= 500


def test_check_F_perturbed_fails_joint_motion(ex1):
    spec = SampleSpec((-1.0, -1.0), (1.0, 1.0), delta=0.01, eps=0.005)
    report = check_F(candidate("perturbed"), ex1, spec)
    assert report["F1"].passed and report["F2"].passed and report["F3"].passed
    assert not report["F4"].passed
    assert report["F4"].worst == pytest.approx(0.01)


def test_check_F_lagging_fails_F2(ex1):
    spec = SampleSpec((-1.0, -1.0), (1.0, 1.0), delta=0.01, eps=0.005)
    report = check_F(candidate("lagging"), ex1, spec)
    assert not report["F2"].passed
    assert report["F2"].worst == pytest.approx(0.01)


def test_check_F_boundary_exact(ex1):
    spec = SampleSpec((-1.0, -1.0), (1.0, 1.0), delta=0.01, eps=0.0)
    assert check_F(candidate("cstar"), ex1, spec)["F1"].passed


def test_report_serializes(ex1):
    doc = json.loads(check_F(candidate("cstar"), ex1, SPEC).to_json())
    assert [r["condition"] for r in doc["results"]] == ["F1", "F2", "F3", "F4"]
    assert doc["passed"] is True


def test_modulus_derivative_examples():
    cand = candidate("cstar")
    assert modulus_derivative(cand, 0.2, [0.1, 0.3], [1, 1], [0.1, 0.01]) == pytest.approx(0.0, abs=1e-12)
    assert modulus_derivative(cand, 0.2, [0.1, 0.3], [0, 0], [0.1, 0.01]) == pytest.approx(2.0)
    smooth = candidate("phi_alpha:0.3")
    w = np.array([0.4, -0.7])
    expected = abs(1 + w[0]) + abs(-1.6 + w[1])
    assert modulus_derivative(smooth, 0.5, [0.0, 0.0], w, [1e-3, 1e-5]) == pytest.approx(expected)
    with pytest.raises(ValueError):
        modulus_derivative(cand, 0.2, [0, 0], [1, 1], [0.1, -0.1])


def test_f4_agrees_with_modulus_derivative(ex1):
    cand = candidate("perturbed")
    rng = np.random.default_rng(2)
    delta = 0.01
    for _ in range(10):
        t, x = rng.uniform(0, 0.9), rng.uniform(-1, 1, 2)
        direct = min(modulus_derivative(cand, t, x, ex1.f(t, x, u) + ex1.g(t, x, v), [delta])
                     for u in ex1.control_grid_P for v in ex1.control_grid_Q)
        assert f4_surrogate(cand, ex1, t, x, delta) == pytest.approx(direct * delta, abs=1e-12)


def test_check_S_passes(ex2_table16):
    report = check_S(ex2_table16)
    assert report.passed
    assert report["S1"].worst == 0.0


def moves_report(table):
    """S2-S4 recomputed pair by pair through the move functions."""
    game = table.game
    worst2 = worst3 = -np.inf
    failures = 0
    for k in range(table.N):
        for node in range(table.grid.size):
            for J1, J2 in table.layer_set(k, node):
                for iu in range(len(game.control_grid_P)):
                    worst2 = max(worst2, punish_move(table, k, node, "I", iu).pair.J1 - J1)
                for iv in range(len(game.control_grid_Q)):
                    worst3 = max(worst3, punish_move(table, k, node, "II", iv).pair.J2 - J2)
                try:
                    consistent_move(table, k, node, (J1, J2))
                except NoWitness:
                    failures += 1
    return worst2, worst3, failures


@pytest.mark.parametrize("corrupt", [False, True])
def test_check_S_agrees_with_moves(ex2, corrupt):
    table = build_value_table(ex2, None, StateGrid.uniform(-1, 1, 0.25, 1), 6, 1e-3, check_cover=False)
    if corrupt:
        for node in (2, 4, 5):
            table.replace_layer_set(3, node, table.layer_set(3, node) + np.array([0.01, -0.02]))
    report = check_S(table)
    worst2, worst3, failures = moves_report(table)
    assert report["S2"].worst == pytest.approx(worst2, abs=1e-15)
    assert report["S3"].worst == pytest.approx(worst3, abs=1e-15)
    assert report["S4"].worst == failures
    assert (failures > 0) == corrupt


def test_check_S_sampled(ex1_small_table):
    assert check_S(ex1_small_table, spec=TableSampleSpec(samples=300, seed=3)).passed


def test_check_S_detects_missing_successor_pairs(ex2):
    table = build_value_table(ex2, None, StateGrid.uniform(-1, 1, 0.25, 1), 4, 1e-3, check_cover=False)
    k = 2
    for node in range(table.grid.size):
        table.replace_layer_set(k, node, table.layer_set(k, node) + 1.0)
    report = check_S(table)
    assert not report["S4"].passed
    # stored pairs at layer k - 1 lose their successors and the shifted pairs at k lose theirs
    assert report["S4"].worst == table.set_sizes(k - 1).sum() + table.set_sizes(k).sum()
    w = report["S4"].witness
    assert w["k"] == k - 1 and "error" in w
    with pytest.raises(NoWitness):
        consistent_move(table, w["k"], w["node"], w["pair"])


def test_check_S_detects_removed_pair(ex2):
    table = build_value_table(ex2, None, StateGrid.uniform(-1, 1, 0.25, 1), 4, 1e-3, check_cover=False)
    # the only way to match a stored pair is one of its successors; drop every match of one pair
    k, node = 1, 4
    J = table.layer_set(k, node)[0]
    for nxt in np.unique(table.successors(k, np.array([node])).ravel()):
        P = table.layer_set(k + 1, int(nxt))
        keep = np.max(np.abs(P - J), axis=1) > 2 * table.eps_payoff
        table.replace_layer_set(k + 1, int(nxt), P[keep] if keep.any() else P + 1.0)
    report = check_S(table)
    assert not report["S4"].passed


def test_unknown_candidate():
    with pytest.raises(ValueError):
        candidate("mystery")
    with pytest.raises(ValueError):
        candidate("phi_alpha")
