"""Control-with-guide Nash equilibrium strategies for nonzero-sum differential games."""

from .game_model import (
    GameConfigError,
    GameDefinition,
    ShiftConstants,
    builtin_game,
    estimate_constants,
    load_game,
    rhs,
)

__version__ = "0.1.0"
