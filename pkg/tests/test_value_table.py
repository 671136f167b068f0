import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cgsnash.game_model import affine_game, builtin_game, estimate_constants, LinearPayoff
from cgsnash.value_table import (FILTER_SLACK, GridCoverageError, NoWitness, StateGrid, TableBudgetError,
                                 build_value_table, consistent_move, dedup_pairs, export_slice_csv, export_table,
                                 hausdorff, import_table, punish_move, query, refinement_report, rho, select,
                                 select_pair, sigma_min)
from oracles import brute_force_sets


def as_set(P):
    return {tuple(map(float, p)) for p in P}


# -- grid ---------------------------------------------------------------------


def test_grid_nodes_and_snap():
    grid = StateGrid.uniform(-1, 1, 0.5, 1)
    assert grid.nodes()[:, 0].tolist() == [-1, -0.5, 0, 0.5, 1]
    idx, clamped = grid.snap([[0.24], [0.25], [0.26], [-3.0], [7.0]])
    assert idx.tolist() == [2, 2, 3, 0, 4]
    assert clamped.tolist() == [False, False, False, True, True]


def test_grid_two_dimensional_order():
    grid = StateGrid((0.0, 0.0), (1.0, 2.0), (1.0, 1.0))
    assert grid.counts == (2, 3)
    assert grid.coords(4).tolist() == [1.0, 1.0]
    assert grid.node_of([1.0, 1.0]) == 4


@pytest.mark.parametrize("lo, hi, step", [(1, 0, 0.5), (0, 1, 0), (0, 1, 0.3)])
def test_grid_validation(lo, hi, step):
    with pytest.raises(ValueError):
        StateGrid.uniform(lo, hi, step, 1)


# -- the hand-enumerated N = 2 build -------------------------------------------


def test_terminal_layer(ex2_small):
    assert as_set(ex2_small.layer_set(2, 3)) == {(0.5, 0.5)}
    assert sigma_min(ex2_small, 2, 0, 1) == 1 and sigma_min(ex2_small, 2, 0, 2) == -1


def test_middle_layer_origin(ex2_small):
    assert as_set(ex2_small.layer_set(1, 2)) == {(0.5, -0.5), (0.5, 0.5)}
    assert sigma_min(ex2_small, 1, 2, 1) == 0.5 and sigma_min(ex2_small, 1, 2, 2) == -0.5
    assert rho(ex2_small, 1, 2, 1) == 0.5 and rho(ex2_small, 1, 2, 2) == -0.5


def test_query_time_rule(ex2_small):
    assert as_set(query(ex2_small, 1.0, [0.5]).pairs) == {(0.5, 0.5)}
    assert as_set(query(ex2_small, 0.25, [0.0]).pairs) == {(0.5, -0.5), (0.5, 0.5)}
    q = query(ex2_small, 0.5, [0.0])
    assert as_set(q.pairs) == {(0.5, -0.5), (0.5, 0.5), (0.0, 0.0)}
    assert q.layers == (1, 2) and not q.clamped
    assert query(ex2_small, 0.25, [3.0]).clamped


def test_select_rules(ex2_small):
    assert select(ex2_small, 0.25, [0.0], "max_sum").as_tuple() == (0.5, 0.5)
    assert select(ex2_small, 0.25, [0.0], "min_J2").as_tuple() == (0.5, -0.5)
    assert select(ex2_small, 1.0, [0.5], "max_J1").as_tuple() == (0.5, 0.5)
    with pytest.raises(ValueError):
        select(ex2_small, 0.25, [0.0], "best")


def test_select_tie_break():
    P = np.array([[0.0, 1.0], [1.0, 0.0], [0.5, 0.5], [1.0, -1.0]])
    assert select_pair(P, "max_sum").as_tuple() == (1.0, 0.0)
    assert select_pair(P, "max_J1").as_tuple() == (1.0, 0.0)
    assert select_pair(P, "min_J2").as_tuple() == (1.0, -1.0)


def test_consistent_moves(ex2_small):
    m = consistent_move(ex2_small, 1, 2, (0.5, 0.5))
    assert m.u.tolist() == [1.0] and m.next_node == 3 and m.pair.as_tuple() == (0.5, 0.5)
    m = consistent_move(ex2_small, 1, 2, (0.5, -0.5))
    assert m.u.tolist() == [-1.0] and m.next_node == 1
    with pytest.raises(NoWitness):
        consistent_move(ex2_small, 2, 2, (0.0, 0.0))
    with pytest.raises(NoWitness):
        consistent_move(ex2_small, 1, 2, (0.2, 0.2))


def test_punish_move_fictitious_player(ex2_small):
    for iu in range(3):
        m = punish_move(ex2_small, 1, 2, "I", iu)
        assert m.v.tolist() == [0.0]
        assert m.pair.J1 == sigma_min(ex2_small, 2, m.next_node, 1)


@pytest.fixture(scope="module")
def ex1_n4():
    game = builtin_game("example1")
    return build_value_table(game, None, StateGrid.uniform(-1, 1, 0.125, 2), 4, 1e-3, check_cover=False)


def test_example1_rho_and_punishment(ex1_n4):
    node = ex1_n4.grid.node_of([0.0, 0.0])
    assert rho(ex1_n4, 3, node, 1) == -0.25
    for u in (-1.0, 0.0, 1.0):
        assert punish_move(ex1_n4, 3, node, "I", [u]).v.tolist() == [1.0]
    for v in (-1.0, 0.5, 1.0):
        assert punish_move(ex1_n4, 3, node, "II", [v]).u.tolist() == [-1.0]


def test_static_game_rho_equals_sigma_min():
    game = affine_game("still", 1.0, np.zeros((1, 1)), [0.0], [[0.0]], [[0.0]], ([-1.0], [1.0]), ([-1.0], [1.0]),
                       LinearPayoff([1.0]), LinearPayoff([-2.0]), control_points=3)
    table = build_value_table(game, None, StateGrid.uniform(-1, 1, 0.5, 1), 3, 1e-3, check_cover=False)
    for k in range(3):
        for node in range(5):
            for i in (1, 2):
                assert rho(table, k, node, i) == sigma_min(table, k + 1, node, i)


# -- invariants on several builds ------------------------------------------------


def _builds():
    ex2 = builtin_game("example2", 3)
    ex1 = builtin_game("example1", 3)
    yield "ex2_small", build_value_table(ex2, None, StateGrid.uniform(-1, 1, 0.25, 1), 4, 1e-3, check_cover=False)
    yield "ex2_16", build_value_table(ex2, estimate_constants(ex2), StateGrid.uniform(-2, 2, 1 / 32, 1), 16)
    yield "ex1_4", build_value_table(ex1, None, StateGrid.uniform(-1, 1, 0.125, 2), 4, check_cover=False)
    aff = affine_game("aff", 1.0, [[0.13, -0.41], [0.27, 0.08]], [0.031, -0.017], [[0.71], [0.23]],
                      [[-0.19], [0.52]], ([-1.0], [1.0]), ([-1.0], [1.0]), LinearPayoff([0.6, -0.3], 0.1),
                      LinearPayoff([0.2, 0.9]), control_points=3)
    yield "affine", build_value_table(aff, None, StateGrid.uniform(-1, 1, 0.25, 2), 3, 0.01, check_cover=False)


BUILDS = dict(_builds())


@pytest.mark.parametrize("name", list(BUILDS))
def test_table_invariants(name):
    table = BUILDS[name]
    game = table.game
    X = table.grid.nodes()
    s1, s2 = game.payoffs_batch(X)
    assert np.all(table.set_sizes(table.N) == 1)
    assert np.array_equal(table.pairs[table.N], np.stack([s1, s2], axis=1))
    eps = table.eps_payoff
    for k in range(table.N):
        assert np.all(table.set_sizes(k) >= 1)
        succ = table.successors(k)
        for node in range(table.grid.size):
            P = table.layer_set(k, node)
            r1, r2 = rho(table, k, node, 1), rho(table, k, node, 2)
            assert np.all(P[:, 0] >= r1 - FILTER_SLACK * eps)
            assert np.all(P[:, 1] >= r2 - FILTER_SLACK * eps)
            W = np.vstack([table.layer_set(k + 1, s) for s in np.unique(succ[node])])
            for pair in P:
                assert np.abs(W - pair).max(axis=1).min() <= eps
                consistent_move(table, k, node, pair)
            keys = np.round(P / eps)
            assert len(np.unique(keys, axis=0)) == len(P)
    assert table.fallback_count == 0


ORACLE_CASES = {
    "example2": (builtin_game("example2", 3), StateGrid.uniform(-1, 1, 0.25, 1), 1e-3),
    "affine": (affine_game("aff", 1.0, [[0.13, -0.41], [0.27, 0.08]], [0.031, -0.017], [[0.71], [0.23]],
                           [[-0.19], [0.52]], ([-1.0], [1.0]), ([-1.0], [1.0]), LinearPayoff([0.6, -0.3], 0.1),
                           LinearPayoff([0.2, 0.9]), control_points=3),
               StateGrid.uniform(-1, 1, 1.0, 2), 0.01),
    "affine_1d": (affine_game("aff1", 1.0, [[0.37]], [0.11], [[0.83]], [[-0.29]], ([-1.0], [1.0]), ([-1.0], [1.0]),
                              LinearPayoff([0.7], 0.05), LinearPayoff([-1.3]), control_points=3),
                  StateGrid.uniform(-1, 1, 0.25, 1), 0.005),
}


@pytest.mark.parametrize("case", list(ORACLE_CASES))
@pytest.mark.parametrize("N", [1, 2, 3])
def test_brute_force_oracle(case, N):
    game, grid, eps = ORACLE_CASES[case]
    assert grid.size <= 9
    table = build_value_table(game, None, grid, N, eps, check_cover=False)
    oracle = brute_force_sets(game, list(grid.nodes()), N, eps)
    for k in range(N + 1):
        for node in range(grid.size):
            assert as_set(table.layer_set(k, node)) == set(oracle[k][node]), (k, node)


# -- errors and budgets --------------------------------------------------------


def test_coverage_check(ex2, ex2_constants):
    with pytest.raises(GridCoverageError):
        build_value_table(ex2, ex2_constants, StateGrid.uniform(-1, 1, 0.5, 1), 2)
    with pytest.raises(GridCoverageError):
        build_value_table(ex2, None, StateGrid.uniform(-1, 1, 0.5, 1), 2)


def test_budget_cap(ex2):
    with pytest.raises(TableBudgetError):
        build_value_table(ex2, None, StateGrid.uniform(-2, 2, 1 / 32, 1), 16, max_pairs=200, check_cover=False)


def test_bad_arguments(ex2):
    grid = StateGrid.uniform(-1, 1, 0.5, 1)
    with pytest.raises(ValueError):
        build_value_table(ex2, None, grid, 0, check_cover=False)
    with pytest.raises(ValueError):
        build_value_table(ex2, None, grid, 2, -1.0, check_cover=False)


def test_default_eps(ex2_table16):
    assert ex2_table16.eps_payoff == pytest.approx(4e-3)


# -- serialization ---------------------------------------------------------------


def test_export_round_trip(tmp_path, ex2_table16):
    path = tmp_path / "t.json"
    export_table(ex2_table16, path)
    doc = json.loads(path.read_text())
    assert doc["N"] == 16 and doc["game"]["name"] == "example2"
    back = import_table(path)
    assert back.N == ex2_table16.N and back.eps_payoff == ex2_table16.eps_payoff
    for k in range(back.N + 1):
        assert np.array_equal(back.pairs[k], ex2_table16.pairs[k])
        assert np.array_equal(back.offsets[k], ex2_table16.offsets[k])
    export_table(back, tmp_path / "again.json")
    assert (tmp_path / "again.json").read_bytes() == path.read_bytes()


def test_import_checks_game(tmp_path, ex2_small):
    path = tmp_path / "t.json"
    export_table(ex2_small, path)
    with pytest.raises(ValueError):
        import_table(path, builtin_game("example2", 5))


def test_slice_csv(tmp_path, ex2_small):
    path = tmp_path / "slice.csv"
    export_slice_csv(ex2_small, path, layers=[1])
    lines = path.read_text().splitlines()
    assert lines[0] == "t,x1,J1,J2,set_size"
    assert len(lines) - 1 == len(ex2_small.pairs[1])


# -- helpers ----------------------------------------------------------------------


def test_hausdorff_and_refinement(ex2, ex2_constants):
    assert hausdorff([[0, 0]], [[0, 0], [0.5, 0]]) == 0.5
    coarse = build_value_table(ex2, ex2_constants, StateGrid.uniform(-2, 2, 1 / 16, 1), 8)
    fine = build_value_table(ex2, ex2_constants, StateGrid.uniform(-2, 2, 1 / 16, 1), 16)
    rows = refinement_report(coarse, fine, [(0.0, [0.0]), (0.5, [0.25])])
    assert len(rows) == 2 and all(r["hausdorff"] >= 0 for r in rows)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5)), min_size=1, max_size=30),
       st.sampled_from([1e-3, 0.01, 0.25]))
def test_dedup_separates_members(pairs, eps):
    P = dedup_pairs(pairs, eps)
    assert 1 <= len(P) <= len(pairs)
    if len(P) > 1:
        D = np.abs(P[:, None, :] - P[None, :, :]).max(axis=2) + np.eye(len(P)) * 1e9
        assert D.min() >= eps * (1 - 1e-9)
    for p in pairs:
        assert np.abs(P - p).max(axis=1).min() <= eps / 2 + 1e-12
