"""Simulation harness: consistent and deviation runs, equilibrium sweeps and the
stochastic check of the extremal shift estimate.

Every run records the distance from the state to the anchor used at each
correction and compares it with the error envelope ``kappa(delta)`` of the
constants, together with the one-step estimates behind it.
"""

from __future__ import annotations

import bisect
import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .conditions import ConditionReport, ConditionResult
from .game_model import GameDefinition, ShiftConstants, payoff_modulus
from .guide import MULTIVALUED, StrategyHandle, TraceRow, guide_step, init_guide, select_anchor
from .trajectory import Partition, Trajectory, euler_segment

ABS_SLACK = 1e-12
WORKERS_ENV = "CGS_WORKERS"


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# deviations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DeviationControl:
    """Step-constant signal: ``values[j]`` holds from ``switch_times[j-1]`` to ``switch_times[j]``."""

    kind: str
    values: tuple
    switch_times: tuple = ()
    seed: int | None = None

    def __post_init__(self):
        if self.kind not in ("constant", "bang_bang", "random_piecewise"):
            raise ValueError(f"unknown deviation kind {self.kind!r}")
        if len(self.values) != len(self.switch_times) + 1:
            raise ValueError("one more value than switch times is required")
        if any(b <= a for a, b in zip(self.switch_times, self.switch_times[1:])):
            raise ValueError("switch times must be increasing")

    def at(self, t: float) -> np.ndarray:
        return np.asarray(self.values[bisect.bisect_right(self.switch_times, t)], dtype=float)

    @classmethod
    def constant(cls, value) -> "DeviationControl":
        return cls("constant", (tuple(np.atleast_1d(np.asarray(value, dtype=float)).tolist()),))

    @classmethod
    def bang_bang(cls, grid: np.ndarray, t0: float, T: float, max_switches: int, seed: int) -> "DeviationControl":
        """Alternates between the first and last grid controls at up to ``max_switches`` random times."""
        rng = np.random.default_rng(seed)
        k = int(rng.integers(0, max_switches + 1))
        times = tuple(float(s) for s in np.sort(rng.uniform(t0, T, k)))
        ends = (tuple(grid[0].tolist()), tuple(grid[-1].tolist()))
        start = int(rng.integers(0, 2))
        return cls("bang_bang", tuple(ends[(start + j) % 2] for j in range(k + 1)), times, seed)

    @classmethod
    def random_piecewise(cls, grid: np.ndarray, t0: float, T: float, max_pieces: int, seed: int) -> "DeviationControl":
        rng = np.random.default_rng(seed)
        k = int(rng.integers(1, max_pieces + 1))
        times = tuple(float(s) for s in np.sort(rng.uniform(t0, T, k - 1)))
        values = tuple(tuple(grid[int(i)].tolist()) for i in rng.integers(0, len(grid), k))
        return cls("random_piecewise", values, times, seed)


def deviation_family(spec: str, grid: np.ndarray, t0: float, T: float, seed: int = 0) -> list:
    """Parse ``bang<S>:<count>``, ``const[:<count>]`` or ``random<P>:<count>``.

    ``const`` without a count uses every grid control once; with a count the grid is
    cycled in order.
    """
    name, _, count = spec.partition(":")
    if name == "const":
        m = len(grid) if not count else int(count)
        return [DeviationControl.constant(grid[j % len(grid)]) for j in range(m)]
    m = int(count) if count else 10
    if name.startswith("bang"):
        switches = int(name[4:] or 8)
        return [DeviationControl.bang_bang(grid, t0, T, switches, seed * 100003 + j) for j in range(m)]
    if name.startswith("random"):
        pieces = int(name[6:] or 8)
        return [DeviationControl.random_piecewise(grid, t0, T, pieces, seed * 100003 + j) for j in range(m)]
    raise ValueError(f"unknown deviation family {spec!r}")


# ---------------------------------------------------------------------------
# runs
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    trajectory: Trajectory
    payoffs: tuple
    gaps: list
    kappa: list
    step_checks: list
    trace: list = field(default_factory=list)

    @property
    def envelope_ok(self) -> bool:
        return all(g <= k + ABS_SLACK for g, k in zip(self.gaps, self.kappa))

    @property
    def steps_ok(self) -> bool:
        return all(self.step_checks)

    @property
    def max_envelope_ratio(self) -> float:
        return max((g / k if k > 0 else (0.0 if g == 0 else np.inf)) for g, k in zip(self.gaps, self.kappa))


def _check_partition(strategy: StrategyHandle, partition: Partition):
    if partition.times[-1] != strategy.game.T and abs(partition.times[-1] - strategy.game.T) > 1e-12:
        raise ValueError("partition must end at the horizon T")
    if strategy.mode == MULTIVALUED:
        for t in partition.times:
            strategy.table.layer_index(t)


def _step_bound(d_plus, constants, dt):
    return d_plus * (1.0 + constants.beta * dt) + constants.phi(dt) * dt


def _envelope(constants, partition, t0, t):
    return constants.kappa(partition.diameter, t - t0)


def run_consistent(game: GameDefinition, U: StrategyHandle, V: StrategyHandle, partition: Partition, x0,
                   substeps: int = 16) -> RunResult:
    """Both players follow their guides; controls are held between corrections.

    ``step_checks`` records, per step, that both guides agree on the consistent
    anchor and that the state stays within the one-step allowance of it.
    """
    if U.role != "I" or V.role != "II" or U.mode != V.mode:
        raise ValueError("need player I and player II strategies of the same mode")
    _check_partition(U, partition)
    times = partition.times
    x = np.atleast_1d(np.array(x0, dtype=float))
    gU, gV = init_guide(U, times[0], x), init_guide(V, times[0], x)
    states, gaps, kappa, checks, trace = [x.copy()], [], [], [], []
    c = U.constants
    for t, t_plus in zip(times[:-1], times[1:]):
        u, gU = guide_step(U, gU, t, x, t_plus)
        v, gV = guide_step(V, gV, t, x, t_plus)
        gaps.append(float(np.linalg.norm(gU.anchor - x)))
        kappa.append(_envelope(c, partition, times[0], t))
        trace.append(TraceRow(float(t), tuple(x.tolist()), gU.branch, gU.d, gU.Y1, gU.Y2,
                              tuple(u.tolist()) + tuple(v.tolist())))
        x = euler_segment(game, t, t_plus, x, lambda s: u, lambda s: v, substeps, partition.step)
        states.append(x.copy())
        if gU.branch == "c" and gV.branch == "c":
            same = np.allclose(gU.w_c, gV.w_c, rtol=0.0, atol=1e-12)
            bound = _step_bound(gU.d, c, t_plus - t)
            checks.append(bool(same and np.sum((x - gU.w_c) ** 2) <= bound + ABS_SLACK))
    z, _ = select_anchor(gU, times[-1], x, c)
    gaps.append(float(np.linalg.norm(z - x)))
    kappa.append(_envelope(c, partition, times[0], times[-1]))
    s1, s2 = game.payoffs(x)
    return RunResult(Trajectory(np.array(times), np.array(states)), (s1, s2), gaps, kappa, checks, trace)


def run_deviation(game: GameDefinition, strategy: StrategyHandle, partition: Partition,
                  deviation: DeviationControl, x0, substeps: int = 16) -> RunResult:
    """The strategy's owner follows its guide while the other player plays ``deviation``.

    ``payoffs`` holds both terminal payoffs; the deviator's is ``payoffs[1]``
    when player I holds the strategy and ``payoffs[0]`` otherwise.  ``step_checks``
    records that the state stays within the one-step allowance of the new
    punishment anchor.
    """
    _check_partition(strategy, partition)
    times = partition.times
    x = np.atleast_1d(np.array(x0, dtype=float))
    g = init_guide(strategy, times[0], x)
    states, gaps, kappa, checks, trace = [x.copy()], [], [], [], []
    c = strategy.constants
    for t, t_plus in zip(times[:-1], times[1:]):
        own, g = guide_step(strategy, g, t, x, t_plus)
        gaps.append(float(np.linalg.norm(g.anchor - x)))
        kappa.append(_envelope(c, partition, times[0], t))
        trace.append(TraceRow(float(t), tuple(x.tolist()), g.branch, g.d, g.Y1, g.Y2, tuple(own.tolist())))
        if strategy.role == "I":
            x = euler_segment(game, t, t_plus, x, lambda s: own, deviation.at, substeps, partition.step)
        else:
            x = euler_segment(game, t, t_plus, x, deviation.at, lambda s: own, substeps, partition.step)
        states.append(x.copy())
        checks.append(bool(np.sum((x - g.w_a) ** 2) <= _step_bound(g.d, c, t_plus - t) + ABS_SLACK))
    z, _ = select_anchor(g, times[-1], x, c)
    gaps.append(float(np.linalg.norm(z - x)))
    kappa.append(_envelope(c, partition, times[0], times[-1]))
    s1, s2 = game.payoffs(x)
    return RunResult(Trajectory(np.array(times), np.array(states)), (s1, s2), gaps, kappa, checks, trace)


def deviator_payoff(strategy: StrategyHandle, result: RunResult) -> float:
    return result.payoffs[1] if strategy.role == "I" else result.payoffs[0]


# ---------------------------------------------------------------------------
# equilibrium sweep
# ---------------------------------------------------------------------------


@dataclass
class ReportRow:
    delta: float
    x0: list
    J1_cons: float
    J2_cons: float
    max_dev1: float | None
    max_dev2: float | None
    tolerance: float
    pass1: bool
    pass2: bool
    runs: int
    envelope_ok: bool
    steps_ok: bool


@dataclass
class EquilibriumReport:
    rows: list
    reference: tuple | None = None
    parameters: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(r.pass1 and r.pass2 for r in self.rows)

    def to_dict(self) -> dict:
        return {"parameters": self.parameters, "reference": self.reference, "passed": self.passed,
                "rows": [asdict(r) for r in self.rows]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def write_csv(self, path) -> None:
        n = len(self.rows[0].x0) if self.rows else 0
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["delta"] + [f"x0_{i + 1}" for i in range(n)]
                       + ["J1_cons", "J2_cons", "max_dev1", "max_dev2", "pass1", "pass2"])
            for r in self.rows:
                fmt = lambda a: "" if a is None else repr(float(a))
                w.writerow([repr(r.delta)] + [repr(float(a)) for a in r.x0]
                           + [repr(r.J1_cons), repr(r.J2_cons), fmt(r.max_dev1), fmt(r.max_dev2), r.pass1, r.pass2])


def default_tolerance(game: GameDefinition, constants: ShiftConstants, floor: float = 0.05):
    """``delta -> max(floor, modulus of the payoffs at kappa(delta))``."""
    def rule(delta: float) -> float:
        return max(floor, payoff_modulus(game, constants, constants.kappa(delta, game.T)))
    return rule


def _deviation_job(args):
    game, strategy, partition, deviation, x0, substeps = args
    res = run_deviation(game, strategy, partition, deviation, x0, substeps)
    return deviator_payoff(strategy, res), res.envelope_ok, res.steps_ok


def equilibrium_report(game: GameDefinition, strategies, x0_set, delta_seq, families: dict,
                       tolerance_rule=None, reference=None, substeps: int = 16,
                       workers: int | None = None) -> EquilibriumReport:
    """Consistent run plus every deviation in ``families`` for each ``delta`` and ``x0``.

    ``strategies`` is a pair ``(U, V)`` or a callable ``delta -> (U, V)``;
    ``families`` maps the deviating role (``"I"`` or ``"II"``) to a list of
    :class:`DeviationControl`.  Rows are ordered by (delta, x0); deviations
    are merged in their listed order.
    """
    deltas = [float(d) for d in delta_seq]
    if any(b >= a for a, b in zip(deltas, deltas[1:])):
        raise ValueError("delta sequence must be decreasing")
    workers = default_workers() if workers is None else workers
    pick = strategies if callable(strategies) else (lambda d: strategies)
    U0, _ = pick(deltas[0])
    if tolerance_rule is None:
        tolerance_rule = default_tolerance(game, U0.constants)
    rows = []
    pool = ProcessPoolExecutor(workers) if workers > 1 else None
    try:
        for delta in deltas:
            U, V = pick(delta)
            for x0 in x0_set:
                x0 = np.atleast_1d(np.asarray(x0, dtype=float))
                partition = Partition.with_diameter(0.0, game.T, delta)
                cons = run_consistent(game, U, V, partition, x0, substeps)
                jobs = [(game, V, partition, dev, x0, substeps) for dev in families.get("I", [])]
                jobs += [(game, U, partition, dev, x0, substeps) for dev in families.get("II", [])]
                out = list(pool.map(_deviation_job, jobs)) if pool else [_deviation_job(j) for j in jobs]
                n1 = len(families.get("I", []))
                dev1 = [o[0] for o in out[:n1]]
                dev2 = [o[0] for o in out[n1:]]
                tol = float(tolerance_rule(delta))
                m1 = max(dev1) if dev1 else None
                m2 = max(dev2) if dev2 else None
                rows.append(ReportRow(
                    delta, x0.tolist(), float(cons.payoffs[0]), float(cons.payoffs[1]), m1, m2, tol,
                    m1 is None or m1 <= cons.payoffs[0] + tol, m2 is None or m2 <= cons.payoffs[1] + tol,
                    1 + len(out), cons.envelope_ok and all(o[1] for o in out),
                    cons.steps_ok and all(o[2] for o in out)))
    finally:
        if pool:
            pool.shutdown()
    params = {"game": game.name, "deltas": deltas, "substeps": substeps,
              "families": {role: len(devs) for role, devs in families.items()}}
    return EquilibriumReport(rows, reference, params)


# ---------------------------------------------------------------------------
# stochastic check of the extremal shift estimate
# ---------------------------------------------------------------------------


def _random_signal(rng, grid, t0, t1, max_pieces=6):
    k = int(rng.integers(1, max_pieces + 1))
    times = np.sort(rng.uniform(t0, t1, k - 1))
    values = grid[rng.integers(0, len(grid), k)]
    return lambda t: values[int(np.searchsorted(times, t, side="right"))]


def lemma1_check(game: GameDefinition, constants: ShiftConstants, trials: int, seed: int = 0,
                 start_box=None, substeps: int = 32) -> ConditionReport:
    """Random trials of the squared-distance estimate for both control splits.

    Case (i): the first system holds player I's extremal ``u`` and player II's
    control is arbitrary; the second holds player II's extremal ``v``.  Case (ii):
    the first system holds the jointly extremal pair, the second is arbitrary.
    Start points are drawn from ``start_box`` (the game's default box when
    omitted) so that both motions stay in the working box.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if start_box is None:
        start_box = game.default_box or (constants.box_lo, constants.box_hi)
    lo = np.asarray(start_box[0], dtype=float)
    hi = np.asarray(start_box[1], dtype=float)
    P, Q = game.control_grid_P, game.control_grid_Q
    rng = np.random.default_rng(seed)
    results = []
    for case in ("i", "ii"):
        worst, witness = -np.inf, {}
        for trial in range(trials):
            s1 = rng.uniform(lo, hi)
            s2 = rng.uniform(lo, hi)
            t_star = float(rng.uniform(0.0, game.T))
            t_plus = float(rng.uniform(t_star, game.T))
            if t_plus <= t_star:
                continue
            s = s2 - s1
            F = game.f_batch(t_star, s1[None, :])[0] @ s
            G = game.g_batch(t_star, s1[None, :])[0] @ s
            if case == "i":
                u_star, v_star = P[int(np.argmax(F))], Q[int(np.argmin(G))]
                v_sig = _random_signal(rng, Q, t_star, t_plus)
                u_sig = _random_signal(rng, P, t_star, t_plus)
                e1 = euler_segment(game, t_star, t_plus, s1, lambda t: u_star, v_sig, substeps)
                e2 = euler_segment(game, t_star, t_plus, s2, u_sig, lambda t: v_star, substeps)
            else:
                joint = F[:, None] + G[None, :]
                iu, iv = np.unravel_index(int(np.argmax(joint)), joint.shape)
                u_sig = _random_signal(rng, P, t_star, t_plus)
                v_sig = _random_signal(rng, Q, t_star, t_plus)
                e1 = euler_segment(game, t_star, t_plus, s1, lambda t: P[iu], lambda t: Q[iv], substeps)
                e2 = euler_segment(game, t_star, t_plus, s2, u_sig, v_sig, substeps)
            dt = t_plus - t_star
            lhs = float(np.sum((e2 - e1) ** 2))
            rhs = float(np.sum(s ** 2)) * (1.0 + constants.beta * dt) + constants.phi(dt) * dt
            if lhs - rhs > worst:
                worst = lhs - rhs
                witness = {"trial": trial, "s1": s1.tolist(), "s2": s2.tolist(), "t_star": t_star,
                           "t_plus": t_plus, "lhs": lhs, "rhs": rhs}
        results.append(ConditionResult(f"lemma1_case_{case}", worst <= ABS_SLACK, float(worst), ABS_SLACK,
                                       trials, witness))
    params = {"game": game.name, "trials": trials, "seed": seed, "substeps": substeps,
              "start_box": [lo.tolist(), hi.tolist()]}
    return ConditionReport(results, params)
