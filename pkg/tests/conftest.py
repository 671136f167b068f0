import pytest

from cgsnash.game_model import builtin_game, estimate_constants
from cgsnash.value_table import StateGrid, build_value_table


@pytest.fixture(scope="session")
def ex1():
    return builtin_game("example1")


@pytest.fixture(scope="session")
def ex2():
    return builtin_game("example2", control_points=3)


@pytest.fixture(scope="session")
def ex1_constants(ex1):
    return estimate_constants(ex1, ((0.0, 0.0), (0.0, 0.0)))


@pytest.fixture(scope="session")
def ex2_constants(ex2):
    return estimate_constants(ex2, ((-0.5,), (0.5,)))


@pytest.fixture(scope="session")
def ex2_small(ex2):
    """N = 2 on the nodes -1, -0.5, 0, 0.5, 1."""
    return build_value_table(ex2, None, StateGrid.uniform(-1, 1, 0.5, 1), 2, 1e-3, check_cover=False)


@pytest.fixture(scope="session")
def ex2_table16(ex2, ex2_constants):
    return build_value_table(ex2, ex2_constants, StateGrid.uniform(-2, 2, 1 / 32, 1), 16)


@pytest.fixture(scope="session")
def ex1_small_table():
    """Reduced two-dimensional build with three-point control grids."""
    game = builtin_game("example1", control_points=3)
    grid = StateGrid((-1.25, -3.5), (1.25, 3.5), (0.125, 0.125))
    constants = estimate_constants(game, ((0.0, 0.0), (0.0, 0.0)))
    return build_value_table(game, constants, grid, 8)
