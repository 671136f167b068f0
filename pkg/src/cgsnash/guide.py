"""Control-with-guide strategies built on the extremal shift rule.

A guide is the quadruple ``(d, tau, w_a, w_c)``: accumulated squared error,
time of the last correction, punishment anchor and consistent anchor.  In
multivalued mode it also carries the expected payoff pair ``(Y1, Y2)``.

At each correction the player compares the distance to the consistent anchor
with the error the estimates allow; within the allowance it steers toward
``w_c``, otherwise toward ``w_a`` (punishment).  The control maximizes the
projection of its own velocity on the direction toward the anchor.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .game_model import GameDefinition, ShiftConstants
from .trajectory import euler_segment
from .value_table import ValueTable, consistent_move, punish_move, select, select_pair

CLOSED_FORM = "closed_form"
MULTIVALUED = "multivalued"
ROLES = ("I", "II")


@dataclass(frozen=True, eq=False)
class GuideState:
    d: float
    tau: float
    w_a: np.ndarray
    w_c: np.ndarray
    mode: str = CLOSED_FORM
    Y1: float | None = None
    Y2: float | None = None
    branch: str | None = None
    anchor: np.ndarray | None = None

    def __post_init__(self):
        if self.d < 0:
            raise ValueError("accumulated error d must be nonnegative")
        if self.mode == MULTIVALUED and (self.Y1 is None or self.Y2 is None):
            raise ValueError("multivalued guides carry expected payoffs")

    @property
    def payoffs(self):
        return (self.Y1, self.Y2)


class ConstantControlMotions:
    """Stable motions generated by holding fixed controls.

    ``consistent`` is the control pair of the consistent motion.  ``punish_u``
    is player I's reply to a fixed ``v`` (the motion that keeps player II's
    value from growing) and ``punish_v`` is player II's reply to a fixed ``u``.
    """

    def __init__(self, consistent, punish_u, punish_v, substeps: int = 16):
        self.u_c = np.atleast_1d(np.asarray(consistent[0], dtype=float))
        self.v_c = np.atleast_1d(np.asarray(consistent[1], dtype=float))
        self.punish_u = np.atleast_1d(np.asarray(punish_u, dtype=float))
        self.punish_v = np.atleast_1d(np.asarray(punish_v, dtype=float))
        self.substeps = substeps

    def _run(self, game, t, z, t_plus, u, v):
        return euler_segment(game, t, t_plus, z, lambda s: u, lambda s: v, self.substeps)

    def consistent(self, game, t, z, t_plus):
        return self._run(game, t, z, t_plus, self.u_c, self.v_c)

    def punish_by_I(self, game, t, z, t_plus, v):
        return self._run(game, t, z, t_plus, self.punish_u, np.atleast_1d(v))

    def punish_by_II(self, game, t, z, t_plus, u):
        return self._run(game, t, z, t_plus, np.atleast_1d(u), self.punish_v)


# u = 1, v = -1 moves along c* level sets; u = -1 holds x2 + (1 - t) down whatever v is,
# and v = 1 does the same for x1 + (1 - t) whatever u is.
MOTIONS = {
    "example1": ConstantControlMotions(consistent=([1.0], [-1.0]), punish_u=[-1.0], punish_v=[1.0]),
}


@dataclass(frozen=True, eq=False)
class StrategyHandle:
    role: str
    mode: str
    game: GameDefinition
    constants: ShiftConstants
    motions: ConstantControlMotions | None = None
    table: ValueTable | None = None
    rule: str | None = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}")
        if self.mode == CLOSED_FORM:
            if self.motions is None:
                raise ValueError("closed-form strategies need motion providers")
        elif self.mode == MULTIVALUED:
            if self.table is None or self.rule is None:
                raise ValueError("multivalued strategies need a value table and a selector rule")
            if self.table.game is not self.game and self.table.game.name != self.game.name:
                raise ValueError("table was built for a different game")
        else:
            raise ValueError(f"unknown mode {self.mode!r}")


def closed_form_strategy(game: GameDefinition, role: str, constants: ShiftConstants,
                         motions: ConstantControlMotions | None = None) -> StrategyHandle:
    if motions is None:
        if game.name not in MOTIONS:
            raise ValueError(f"no registered motions for game {game.name!r}")
        motions = MOTIONS[game.name]
    return StrategyHandle(role, CLOSED_FORM, game, constants, motions=motions)


def table_strategy(table: ValueTable, role: str, constants: ShiftConstants, rule: str) -> StrategyHandle:
    return StrategyHandle(role, MULTIVALUED, table.game, constants, table=table, rule=rule)


def init_guide(strategy: StrategyHandle, t0: float, x0) -> GuideState:
    """Fresh guide ``(0, t0, x0, x0)``; multivalued guides also pick the selector pair.

    At a table time the pair is taken from that layer alone, so the first
    consistent move has a successor layer to match against.
    """
    x0 = np.atleast_1d(np.array(x0, dtype=float))
    if strategy.mode == CLOSED_FORM:
        return GuideState(0.0, float(t0), x0.copy(), x0.copy())
    pair = select(strategy.table, t0, x0, strategy.rule, layer_only=True)
    return GuideState(0.0, float(t0), x0.copy(), x0.copy(), MULTIVALUED, pair.J1, pair.J2)


def anchor_bound(guide: GuideState, t: float, constants: ShiftConstants) -> float:
    """Squared distance allowed before the guide switches to punishment."""
    elapsed = t - guide.tau
    return guide.d * (1.0 + constants.beta * elapsed) + constants.phi(elapsed) * elapsed


def select_anchor(guide: GuideState, t: float, x, constants: ShiftConstants):
    """Return ``(z, branch)``: the consistent anchor when within the allowance, else the punishment anchor."""
    if t < guide.tau:
        raise ValueError("correction time precedes the guide's last update")
    gap = float(np.sum((guide.w_c - np.asarray(x, dtype=float)) ** 2))
    if gap <= anchor_bound(guide, t, constants):
        return guide.w_c, "c"
    return guide.w_a, "a"


def extremal_indices(game: GameDefinition, t: float, x, z, role: str):
    """Grid indices of the extremal control and the opponent witness (lowest index on ties)."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    s = np.atleast_1d(np.asarray(z, dtype=float)) - x
    fs = game.f_batch(t, x[None, :])[0] @ s
    gs = game.g_batch(t, x[None, :])[0] @ s
    if role == "I":
        return int(np.argmax(fs)), int(np.argmin(gs))
    if role == "II":
        return int(np.argmax(gs)), int(np.argmin(fs))
    raise ValueError(f"role must be one of {ROLES}")


def extremal_controls(game: GameDefinition, t: float, x, z, role: str):
    """``(own_control, opponent_witness)`` by the extremal shift rule."""
    own, other = extremal_indices(game, t, x, z, role)
    if role == "I":
        return game.control_grid_P[own], game.control_grid_Q[other]
    return game.control_grid_Q[own], game.control_grid_P[other]


def guide_step(strategy: StrategyHandle, guide: GuideState, t: float, x, t_plus: float):
    """One correction: returns the control to hold on ``[t, t_plus)`` and the updated guide."""
    if not t_plus > t:
        raise ValueError("t_plus must exceed t")
    game = strategy.game
    x = np.atleast_1d(np.asarray(x, dtype=float))
    z, branch = select_anchor(guide, t, x, strategy.constants)
    own_i, witness_i = extremal_indices(game, t, x, z, strategy.role)
    if strategy.role == "I":
        own, witness = game.control_grid_P[own_i], game.control_grid_Q[witness_i]
    else:
        own, witness = game.control_grid_Q[own_i], game.control_grid_P[witness_i]
    d_plus = float(np.sum((z - x) ** 2))

    if strategy.mode == CLOSED_FORM:
        m = strategy.motions
        w_c = m.consistent(game, t, z, t_plus)
        if strategy.role == "I":
            w_a = m.punish_by_I(game, t, z, t_plus, witness)
        else:
            w_a = m.punish_by_II(game, t, z, t_plus, witness)
        return own, GuideState(d_plus, float(t), w_a, w_c, CLOSED_FORM, branch=branch, anchor=z)

    table = strategy.table
    k = table.layer_index(t)
    if table.layer_index(t_plus) != k + 1:
        raise ValueError("multivalued guides step exactly one table layer at a time")
    node = table.grid.node_of(z)
    if branch == "c":
        pair = (guide.Y1, guide.Y2)
    else:
        # punishing: expect the deviator's worst pair at the punishment anchor
        reset = select_pair(table.layer_set(k, node), "min_J2" if strategy.role == "I" else "min_J1")
        pair = reset.as_tuple()
    cm = consistent_move(table, k, node, pair)
    pm = punish_move(table, k, node, "II" if strategy.role == "I" else "I", witness_i)
    new = GuideState(d_plus, float(t), table.grid.coords(pm.next_node), table.grid.coords(cm.next_node),
                     MULTIVALUED, cm.pair.J1, cm.pair.J2, branch=branch, anchor=z)
    return own, new


def with_payoffs(guide: GuideState, Y1: float, Y2: float) -> GuideState:
    return replace(guide, Y1=float(Y1), Y2=float(Y2))


@dataclass(frozen=True)
class TraceRow:
    t: float
    x: tuple
    branch: str
    d: float
    Y1: float | None
    Y2: float | None
    control: tuple


def write_guide_trace(path, rows) -> None:
    """CSV with columns ``t, x..., branch, d, Y1, Y2, control...``."""
    rows = list(rows)
    n = len(rows[0].x) if rows else 0
    m = len(rows[0].control) if rows else 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"x{i + 1}" for i in range(n)] + ["branch", "d", "Y1", "Y2"]
                   + [f"control{i + 1}" for i in range(m)])
        for r in rows:
            fmt = lambda a: "" if a is None else repr(float(a))
            w.writerow([repr(r.t)] + [repr(float(a)) for a in r.x] + [r.branch, repr(r.d), fmt(r.Y1), fmt(r.Y2)]
                       + [repr(float(a)) for a in r.control])
