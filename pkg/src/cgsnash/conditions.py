"""Checks of value-function conditions on closed-form candidates and on tables.

Closed-form pairs ``(c1, c2)`` are tested through one-step surrogates of the
stability conditions (F1)-(F4), Hamilton-Jacobi residuals and the modulus
derivative.  Tables are tested through their punishment and consistent moves,
the discrete analogues of (S1)-(S4).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .game_model import GameDefinition
from .value_table import FILTER_SLACK, ValueTable

H_FD = 1e-5
TIE_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class CandidateValueFunction:
    """Pair of functions ``c_i(t, x)`` evaluated on arrays ``t`` (...), ``x`` (..., n).

    ``grad1``/``grad2`` return ``(dc/dt, grad_x c)`` when registered; otherwise
    central finite differences with step ``h_fd`` are used.  ``kink`` flags
    positions where the pair is not differentiable.
    """

    name: str
    c1: Callable
    c2: Callable
    grad1: Callable | None = None
    grad2: Callable | None = None
    kink: Callable | None = None
    h_fd: float = H_FD

    def values(self, t, x):
        return self.c1(t, x), self.c2(t, x)

    def is_smooth_at(self, t, x) -> bool:
        return self.kink is None or not bool(self.kink(t, np.asarray(x, dtype=float)))

    def gradient(self, i: int, t: float, x):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        analytic = self.grad1 if i == 1 else self.grad2
        if analytic is not None:
            dt, gx = analytic(t, x)
            return float(dt), np.asarray(gx, dtype=float)
        return fd_gradient(self.c1 if i == 1 else self.c2, t, x, self.h_fd)


def fd_gradient(c, t: float, x, h: float = H_FD):
    """Central differences of ``c`` in ``t`` and each coordinate of ``x``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    dt = (float(c(t + h, x)) - float(c(t - h, x))) / (2 * h)
    gx = np.empty_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        gx[j] = (float(c(t, x + e)) - float(c(t, x - e))) / (2 * h)
    return dt, gx


def _linear_candidate(name, a1, a2, w1, w2):
    """``c_i = <w_i, x> + a_i (1 - t)``."""
    w1 = np.asarray(w1, dtype=float)
    w2 = np.asarray(w2, dtype=float)
    return CandidateValueFunction(
        name,
        c1=lambda t, x: np.asarray(x, dtype=float) @ w1 + a1 * (1.0 - np.asarray(t, dtype=float)),
        c2=lambda t, x: np.asarray(x, dtype=float) @ w2 + a2 * (1.0 - np.asarray(t, dtype=float)),
        grad1=lambda t, x: (-a1, w1),
        grad2=lambda t, x: (-a2, w2),
    )


def candidate(spec: str) -> CandidateValueFunction:
    """Registered candidates for the two-dimensional example.

    ``cstar``: ``(x1 + (1-t), x2 + (1-t))``; ``phi_alpha:A``: ``(x1 - (1-t), x2 + (1+2A)(1-t))``;
    ``perturbed``: ``(x1 + 2(1-t), x2 + (1-t))``; ``lagging``: ``(x1 - 2(1-t), x2 + (1-t))``;
    ``abs_branch:s``: one-dimensional ``(|x| + (1-t), s x + (1-t))`` with a kink at ``x = 0``.
    """
    name, _, arg = spec.partition(":")
    e1, e2 = (1.0, 0.0), (0.0, 1.0)
    if name == "cstar":
        return _linear_candidate(spec, 1.0, 1.0, e1, e2)
    if name == "phi_alpha":
        if not arg:
            raise ValueError("phi_alpha needs a parameter, e.g. phi_alpha:0.3")
        alpha = float(arg)
        return _linear_candidate(spec, -1.0, 1.0 + 2.0 * alpha, e1, e2)
    if name == "perturbed":
        return _linear_candidate(spec, 2.0, 1.0, e1, e2)
    if name == "lagging":
        return _linear_candidate(spec, -2.0, 1.0, e1, e2)
    if name == "abs_branch":
        sign = float(arg or 1.0)
        return CandidateValueFunction(
            spec,
            c1=lambda t, x: np.abs(np.asarray(x, dtype=float)[..., 0]) + (1.0 - np.asarray(t, dtype=float)),
            c2=lambda t, x: sign * np.asarray(x, dtype=float)[..., 0] + (1.0 - np.asarray(t, dtype=float)),
            grad1=lambda t, x: (-1.0, np.sign(x)),
            grad2=lambda t, x: (-1.0, np.array([sign])),
            kink=lambda t, x: np.abs(x[..., 0]) < 1e-9,
        )
    raise ValueError(f"unknown candidate {spec!r}")


@dataclass
class ConditionResult:
    condition: str
    passed: bool
    worst: float
    tolerance: float
    samples: int
    witness: dict = field(default_factory=dict)


@dataclass
class ConditionReport:
    results: list
    parameters: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def __getitem__(self, condition: str) -> ConditionResult:
        for r in self.results:
            if r.condition == condition:
                return r
        raise KeyError(condition)

    def to_dict(self) -> dict:
        return {"parameters": self.parameters, "passed": self.passed,
                "results": [asdict(r) for r in self.results]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, default=_jsonable)


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _result(condition, values, tol, samples, witness_of):
    """Pass iff every value is at most ``tol``; the witness is the worst sample."""
    values = np.asarray(values, dtype=float)
    j = int(np.argmax(values))
    worst = float(values.flat[j])
    return ConditionResult(condition, worst <= tol, worst, tol, int(samples), witness_of(j))


# ---------------------------------------------------------------------------
# Hamiltonians and residuals
# ---------------------------------------------------------------------------


def _projections(game, t, x, s):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    s = np.atleast_1d(np.asarray(s, dtype=float))
    F = game.f_batch(t, x[None, :])[0]
    G = game.g_batch(t, x[None, :])[0]
    return F, G, F @ s, G @ s


def hamiltonian(game: GameDefinition, t: float, x, s, i: int) -> float:
    """Max-min of ``<s, f + g>`` over the control grids: player I maximizes for ``i = 1``, player II for ``i = 2``."""
    _, _, fs, gs = _projections(game, t, x, s)
    if i == 1:
        return float(fs.max() + gs.min())
    if i == 2:
        return float(gs.max() + fs.min())
    raise ValueError("player index must be 1 or 2")


def hamiltonian_minmax(game: GameDefinition, t: float, x, s, i: int) -> float:
    """Min-max counterpart of :func:`hamiltonian`, enumerated over all control pairs."""
    _, _, fs, gs = _projections(game, t, x, s)
    table = fs[:, None] + gs[None, :]
    if i == 1:
        return float(table.max(axis=0).min())
    return float(table.max(axis=1).min())


@dataclass(frozen=True)
class Residual:
    r1: float
    r2: float
    u_hat: tuple
    v_hat: tuple
    tie_break: str

    def __iter__(self):
        yield self.r1
        yield self.r2


def _tied(values):
    top = values.max()
    return np.flatnonzero(values >= top - TIE_TOL * (1.0 + abs(top)))


def _relaxed_choice(tied, own_proj_other, base):
    """Weights on two tied controls whose convex combination brings ``base + proj`` closest to 0."""
    vals = own_proj_other[tied]
    lo, hi = int(tied[np.argmin(vals)]), int(tied[np.argmax(vals)])
    a, b = own_proj_other[lo], own_proj_other[hi]
    target = -base
    if b - a <= 0:
        return (lo, hi, 0.0), a
    lam = float(np.clip((target - a) / (b - a), 0.0, 1.0))
    return (lo, hi, lam), a + lam * (b - a)


def hj_residual(cand: CandidateValueFunction, game: GameDefinition, t: float, x, tie_break: str = "relaxed") -> Residual:
    """Residuals ``r_i = dc_i/dt + <grad c_i, f(u_hat) + g(v_hat)>``.

    ``u_hat`` maximizes ``<grad c1, f>`` and ``v_hat`` maximizes ``<grad c2, g>``.
    When several grid controls tie, ``"lowest"`` takes the first one, while
    ``"relaxed"`` (default) takes the convex combination of the tied
    velocities that makes the other player's residual smallest in magnitude.
    Ties do not move the player's own residual, so the two choices decouple.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if not cand.is_smooth_at(t, x):
        raise ValueError(f"candidate {cand.name} is not differentiable at (t={t}, x={x.tolist()})")
    dt1, p1 = cand.gradient(1, t, x)
    dt2, p2 = cand.gradient(2, t, x)
    F, G, f1, _ = _projections(game, t, x, p1)
    g2 = G @ p2
    tu, tv = _tied(f1), _tied(g2)
    if tie_break == "lowest":
        iu, iv = int(tu[0]), int(tv[0])
        w = F[iu] + G[iv]
        return Residual(float(dt1 + p1 @ w), float(dt2 + p2 @ w), (iu, iu, 0.0), (iv, iv, 0.0), tie_break)
    if tie_break != "relaxed":
        raise ValueError("tie_break must be 'relaxed' or 'lowest'")
    fp2 = F @ p2
    gp1 = G @ p1
    # r2 = dt2 + <p2, F> + <p2, G>, where <p2, G> is constant over the tied v's
    u_hat, f_part = _relaxed_choice(tu, fp2, dt2 + g2[tv[0]])
    v_hat, g_part = _relaxed_choice(tv, gp1, dt1 + f1[tu[0]])
    r1 = dt1 + f1[tu[0]] + g_part
    r2 = dt2 + f_part + g2[tv[0]]
    return Residual(float(r1), float(r2), u_hat, v_hat, tie_break)


def modulus_derivative(cand: CandidateValueFunction, t: float, x, w, delta_seq) -> float:
    """``min_delta (|c1(t+delta, x+delta w) - c1(t,x)| + |c2(...) - c2(t,x)|) / delta``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    w = np.atleast_1d(np.asarray(w, dtype=float))
    deltas = np.asarray(list(delta_seq), dtype=float)
    if np.any(deltas <= 0):
        raise ValueError("steps must be positive")
    c1, c2 = cand.values(t, x)
    best = np.inf
    for d in deltas:
        n1, n2 = cand.values(t + d, x + d * w)
        best = min(best, (abs(float(n1) - float(c1)) + abs(float(n2) - float(c2))) / d)
    return float(best)


# ---------------------------------------------------------------------------
# (F1)-(F4) surrogates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SampleSpec:
    """Positions ``(t, x)``: a per-axis grid of ``points`` over ``[lo, hi]`` times ``t_points`` times in ``[0, T - delta]``."""

    lo: tuple
    hi: tuple
    points: int = 9
    t_points: int = 7
    delta: float = 0.01
    eps: float = 0.02

    def __post_init__(self):
        if not (self.delta > 0 and self.eps >= 0):
            raise ValueError("delta must be positive and eps nonnegative")

    def states(self) -> np.ndarray:
        axes = [np.linspace(a, b, self.points) for a, b in zip(self.lo, self.hi)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def positions(self, T: float):
        times = np.linspace(0.0, T - self.delta, self.t_points)
        X = self.states()
        return np.repeat(times, len(X)), np.tile(X, (len(times), 1))


def _one_step(game, cand, t, X, delta):
    """Increments of both candidates over one Euler step for every control pair: shape (m, |P|, |Q|)."""
    out1 = np.empty((len(X), game.control_grid_P.shape[0], game.control_grid_Q.shape[0]))
    out2 = np.empty_like(out1)
    for tk in np.unique(t):
        rows = np.flatnonzero(t == tk)
        Xk = X[rows]
        F = game.f_batch(tk, Xk)
        G = game.g_batch(tk, Xk)
        nxt = Xk[:, None, None, :] + delta * (F[:, :, None, :] + G[:, None, :, :])
        c1, c2 = cand.values(tk, Xk)
        n1, n2 = cand.values(tk + delta, nxt)
        out1[rows] = n1 - np.asarray(c1)[:, None, None]
        out2[rows] = n2 - np.asarray(c2)[:, None, None]
    return out1, out2


def check_F(cand: CandidateValueFunction, game: GameDefinition, spec: SampleSpec) -> ConditionReport:
    """One-step surrogates of (F1)-(F4) at the sampled positions.

    F1: ``|c_i(T, x) - sigma_i(x)| <= eps``.  F2: for each ``u`` some ``v`` keeps
    ``c1`` from rising by more than ``eps``; F3 likewise for ``c2`` with roles
    swapped.  F4: some control pair changes both values by at most ``eps`` in total.
    """
    eps, delta = spec.eps, spec.delta
    XT = spec.states()
    s1, s2 = game.payoffs_batch(XT)
    c1T, c2T = cand.values(game.T, XT)
    f1 = np.maximum(np.abs(c1T - s1), np.abs(c2T - s2))
    results = [_result("F1", f1, eps, len(XT), lambda j: {"t": game.T, "x": XT[j].tolist()})]

    t, X = spec.positions(game.T)
    d1, d2 = _one_step(game, cand, t, X, delta)
    P, Q = game.control_grid_P, game.control_grid_Q

    f2 = d1.min(axis=2)                     # (m, |P|): best v against each u
    j2 = np.unravel_index(int(np.argmax(f2)), f2.shape)
    results.append(ConditionResult("F2", float(f2.max()) <= eps, float(f2.max()), eps, f2.size,
                                   {"t": float(t[j2[0]]), "x": X[j2[0]].tolist(), "u": P[j2[1]].tolist()}))
    f3 = d2.min(axis=1)                     # (m, |Q|): best u against each v
    j3 = np.unravel_index(int(np.argmax(f3)), f3.shape)
    results.append(ConditionResult("F3", float(f3.max()) <= eps, float(f3.max()), eps, f3.size,
                                   {"t": float(t[j3[0]]), "x": X[j3[0]].tolist(), "v": Q[j3[1]].tolist()}))
    both = np.abs(d1) + np.abs(d2)
    flat = both.reshape(len(X), -1)
    f4 = flat.min(axis=1)
    j4 = int(np.argmax(f4))
    iu, iv = np.unravel_index(int(flat[j4].argmin()), both.shape[1:])
    results.append(ConditionResult("F4", float(f4.max()) <= eps, float(f4.max()), eps, len(X),
                                   {"t": float(t[j4]), "x": X[j4].tolist(), "u": P[iu].tolist(), "v": Q[iv].tolist()}))
    params = {"candidate": cand.name, "game": game.name, "delta": delta, "eps": eps,
              "positions": int(len(X)), "box": [list(spec.lo), list(spec.hi)]}
    return ConditionReport(results, params)


def f4_surrogate(cand: CandidateValueFunction, game: GameDefinition, t: float, x, delta: float) -> float:
    """Smallest total one-step change of ``(c1, c2)`` over control pairs at one position."""
    d1, d2 = _one_step(game, cand, np.array([t]), np.atleast_2d(np.asarray(x, dtype=float)), delta)
    return float((np.abs(d1) + np.abs(d2)).min())


# ---------------------------------------------------------------------------
# (S1)-(S4) on tables
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TableSampleSpec:
    """``samples=None`` checks every stored pair; otherwise draws that many (layer, node, pair) triples."""

    samples: int | None = None
    seed: int = 0


def _table_triples(table: ValueTable, spec: TableSampleSpec):
    rows = []
    for k in range(table.N):
        off = table.offsets[k]
        nodes = np.repeat(np.arange(table.grid.size), np.diff(off))
        rows.append(np.column_stack([np.full(len(nodes), k), nodes, np.arange(len(nodes))]))
    triples = np.vstack(rows)
    if spec.samples is not None and spec.samples < len(triples):
        rng = np.random.default_rng(spec.seed)
        triples = triples[np.sort(rng.choice(len(triples), spec.samples, replace=False))]
    return triples


CHUNK = 1 << 21  # distance-matrix entries per block in the S4 search


def _nearest_distance(P, Q):
    """Max-norm distance from each row of ``P`` to its nearest row of ``Q``."""
    rows = max(1, CHUNK // max(1, len(Q)))
    out = np.empty(len(P))
    for a in range(0, len(P), rows):
        block = P[a:a + rows]
        out[a:a + rows] = np.abs(block[:, None, :] - Q[None, :, :]).max(axis=2).min(axis=1)
    return out


def check_S(table: ValueTable, game: GameDefinition | None = None, spec: TableSampleSpec = TableSampleSpec()) -> ConditionReport:
    """Discrete (S1)-(S4): exact terminal layer, punishment moves that do not raise the
    fixed player's payoff by more than ``eps_payoff``, and consistent moves for stored pairs.

    The punishment excess of a stored pair depends on its node only through the
    guaranteed successor minimum, so (S2)/(S3) are evaluated per layer; (S4)
    looks for each pair among the pooled successor sets of its node, which is
    the search :func:`consistent_move` performs.
    """
    game = table.game if game is None else game
    eps = table.eps_payoff
    X = table.grid.nodes()
    s1, s2 = game.payoffs_batch(X)
    P_N = table.pairs[table.N]
    sizes = table.set_sizes(table.N)
    singleton = bool(np.all(sizes == 1))
    if singleton:
        err = np.maximum(np.abs(P_N[:, 0] - s1), np.abs(P_N[:, 1] - s2))
        s1_res = _result("S1", err, 0.0, len(err), lambda j: {"node": j, "x": X[j].tolist()})
    else:
        j = int(np.flatnonzero(sizes != 1)[0])
        s1_res = ConditionResult("S1", False, float("inf"), 0.0, len(sizes), {"node": j, "set_size": int(sizes[j])})

    triples = _table_triples(table, spec)
    tol = FILTER_SLACK * eps
    move_tol = 2.0 * eps
    worst2 = worst3 = -np.inf
    wit2 = wit3 = wit4 = {}
    failures4 = 0
    for k in np.unique(triples[:, 0]):
        k = int(k)
        sel = triples[triples[:, 0] == k]
        nodes, rows = sel[:, 1], sel[:, 2]
        J = table.pairs[k][rows]
        succ = table.successors(k)
        m1, m2 = table.minima(k + 1)
        by_u = m1[succ].min(axis=2)  # player I fixes u, v holds J1 down
        by_v = m2[succ].min(axis=1)  # player II fixes v, u holds J2 down
        ex2 = by_u.max(axis=1)[nodes] - J[:, 0]
        ex3 = by_v.max(axis=1)[nodes] - J[:, 1]
        j2, j3 = int(ex2.argmax()), int(ex3.argmax())
        if ex2[j2] > worst2:
            n = int(nodes[j2])
            worst2, wit2 = float(ex2[j2]), {"k": k, "node": n, "pair": J[j2].tolist(),
                                             "u": game.control_grid_P[int(by_u[n].argmax())].tolist()}
        if ex3[j3] > worst3:
            n = int(nodes[j3])
            worst3, wit3 = float(ex3[j3]), {"k": k, "node": n, "pair": J[j3].tolist(),
                                             "v": game.control_grid_Q[int(by_v[n].argmax())].tolist()}
        for node in np.unique(nodes):
            mask = nodes == node
            pool = np.vstack([table.layer_set(k + 1, int(s)) for s in np.unique(succ[node])])
            miss = _nearest_distance(J[mask], pool) > move_tol
            if miss.any():
                failures4 += int(miss.sum())
                if not wit4:
                    pair = J[mask][int(np.flatnonzero(miss)[0])]
                    wit4 = {"k": k, "node": int(node), "pair": pair.tolist(),
                            "error": f"no successor of node {int(node)} at layer {k} carries {tuple(pair.tolist())}"}
    n = len(triples)
    results = [
        s1_res,
        ConditionResult("S2", bool(worst2 <= tol), float(worst2), tol, n, wit2),
        ConditionResult("S3", bool(worst3 <= tol), float(worst3), tol, n, wit3),
        ConditionResult("S4", failures4 == 0, float(failures4), 0.0, n, wit4),
    ]
    params = {"game": game.name, "N": table.N, "eps_payoff": eps, "grid": table.grid.spec(),
              "samples": spec.samples, "seed": spec.seed}
    return ConditionReport(results, params)
