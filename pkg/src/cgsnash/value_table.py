"""Multivalued value function of the discrete-time game on a state grid.

Layer ``k`` of a :class:`ValueTable` stores, for every grid node ``z``, the
finite set ``Z(t_k, z)`` of payoff pairs supportable from ``(t_k, z)``.  The
table is filled by backward induction: the candidate set at ``z`` is the
union of the successor sets over all control pairs, filtered from below by
the guaranteed (max-min) values of both players.

Each layer is kept in compressed form: ``pairs[k]`` is an ``(M, 2)`` array and
``offsets[k]`` gives the slice of rows that belongs to each node.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .game_model import GameDefinition, ShiftConstants, builtin_game, load_game

TIME_TOL = 1e-12
# filter slack in units of eps_payoff; the excess over 1 only absorbs float rounding
FILTER_SLACK = 1.0 + 1e-9
RULES = ("max_sum", "max_J1", "max_J2", "min_J2", "min_J1")


class NoWitness(RuntimeError):
    """No successor carries the requested payoff pair."""


class GridCoverageError(ValueError):
    """The state grid does not contain the working box of the constants."""


class TableBudgetError(MemoryError):
    """The table would exceed its configured pair budget."""


@dataclass(frozen=True)
class PayoffPair:
    J1: float
    J2: float

    def __iter__(self):
        yield self.J1
        yield self.J2

    def as_tuple(self):
        return (self.J1, self.J2)


def lattice_keys(pairs: np.ndarray, eps: float) -> np.ndarray:
    return np.round(np.asarray(pairs, dtype=float) / eps).astype(np.int64)


def dedup_pairs(pairs, eps: float) -> np.ndarray:
    """Round both components to multiples of ``eps`` and drop duplicates (sorted output)."""
    pairs = np.asarray(pairs, dtype=float).reshape(-1, 2)
    if len(pairs) == 0:
        return pairs
    keys = np.unique(lattice_keys(pairs, eps), axis=0)
    return keys * eps


@dataclass(frozen=True, eq=False)
class PayoffSet:
    """Finite set of payoff pairs, one row per pair."""

    pairs: np.ndarray
    clamped: bool = False
    layers: tuple = ()

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        for J1, J2 in self.pairs:
            yield PayoffPair(float(J1), float(J2))

    def min(self, i: int) -> float:
        return float(self.pairs[:, i - 1].min())

    def distance(self, pair) -> float:
        """Max-norm distance from ``pair`` to the nearest member."""
        return float(np.abs(self.pairs - np.asarray(tuple(pair), dtype=float)).max(axis=1).min())

    def contains(self, pair, tol: float) -> bool:
        return self.distance(pair) <= tol


@dataclass(frozen=True)
class StateGrid:
    """Regular grid; node coordinates along axis ``j`` are ``lo[j] + i * step[j]``."""

    lo: tuple
    hi: tuple
    step: tuple

    def __post_init__(self):
        if not (len(self.lo) == len(self.hi) == len(self.step)):
            raise ValueError("grid bounds and steps must have equal length")
        for a, b, h in zip(self.lo, self.hi, self.step):
            if not a < b:
                raise ValueError(f"grid needs lo < hi, got {a} >= {b}")
            if not h > 0:
                raise ValueError("grid step must be positive")
            cells = (b - a) / h
            if abs(cells - round(cells)) > 1e-9 * max(1.0, cells):
                raise ValueError(f"(hi - lo) = {b - a} is not a multiple of step {h}")

    @classmethod
    def uniform(cls, lo, hi, step, n: int = 1) -> "StateGrid":
        lo = np.broadcast_to(np.asarray(lo, dtype=float), (n,))
        hi = np.broadcast_to(np.asarray(hi, dtype=float), (n,))
        step = np.broadcast_to(np.asarray(step, dtype=float), (n,))
        return cls(tuple(map(float, lo)), tuple(map(float, hi)), tuple(map(float, step)))

    @property
    def n(self) -> int:
        return len(self.lo)

    @property
    def counts(self) -> tuple:
        return tuple(int(round((b - a) / h)) + 1 for a, b, h in zip(self.lo, self.hi, self.step))

    @property
    def size(self) -> int:
        return int(np.prod(self.counts))

    def nodes(self) -> np.ndarray:
        axes = [a + h * np.arange(c) for a, h, c in zip(self.lo, self.step, self.counts)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def coords(self, index: int) -> np.ndarray:
        multi = np.unravel_index(int(index), self.counts)
        return np.array([a + h * i for a, h, i in zip(self.lo, self.step, multi)])

    def snap(self, X):
        """Nearest node indices (ties to the lower node) and a per-row clamping flag."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        lo = np.asarray(self.lo)
        step = np.asarray(self.step)
        counts = np.asarray(self.counts)
        r = np.ceil((X - lo) / step - 0.5).astype(np.int64)
        clipped = np.clip(r, 0, counts - 1)
        clamped = np.any(clipped != r, axis=1)
        flat = np.ravel_multi_index(tuple(clipped.T), self.counts)
        return flat, clamped

    def node_of(self, x) -> int:
        return int(self.snap(x)[0][0])

    def covers(self, constants: ShiftConstants) -> bool:
        return constants.contains(self.lo, self.hi)

    def spec(self) -> dict:
        return {"lo": list(self.lo), "hi": list(self.hi), "step": list(self.step)}


@dataclass(eq=False)
class ValueTable:
    """Payoff-pair sets for every time layer ``k = 0..N`` and grid node."""

    game: GameDefinition
    N: int
    grid: StateGrid
    eps_payoff: float
    offsets: list
    pairs: list
    fallback_count: int = 0
    _minima: dict = field(default_factory=dict, repr=False)

    @property
    def delta(self) -> float:
        return self.game.T / self.N

    def time(self, k: int) -> float:
        return self.game.T * k / self.N

    def layer_index(self, t: float) -> int:
        """Index ``k`` with ``t == t_k`` (within 1e-12); raises otherwise."""
        k = int(round(t / self.delta))
        if abs(t - self.time(k)) > TIME_TOL * max(1.0, self.game.T) or not 0 <= k <= self.N:
            raise ValueError(f"time {t} is not on the table's time grid")
        return k

    def layer_set(self, k: int, node: int) -> np.ndarray:
        off = self.offsets[k]
        return self.pairs[k][off[node]:off[node + 1]]

    def set_sizes(self, k: int) -> np.ndarray:
        return np.diff(self.offsets[k])

    def total_pairs(self) -> int:
        return int(sum(len(p) for p in self.pairs))

    def minima(self, k: int) -> tuple:
        """Per-node minima of J1 and J2 in layer ``k``."""
        if k not in self._minima:
            off = self.offsets[k]
            P = self.pairs[k]
            self._minima[k] = (np.minimum.reduceat(P[:, 0], off[:-1]), np.minimum.reduceat(P[:, 1], off[:-1]))
        return self._minima[k]

    def successors(self, k: int, nodes=None) -> np.ndarray:
        """Snapped successor node of every node for every control pair: shape (m, |P|, |Q|)."""
        return _successors(self.game, self.grid, self.time(k), self.delta, nodes)

    def replace_layer_set(self, k: int, node: int, new_pairs) -> None:
        """Overwrite one stored set (used to model corrupted or externally edited tables)."""
        new_pairs = np.asarray(new_pairs, dtype=float).reshape(-1, 2)
        off = self.offsets[k]
        P = self.pairs[k]
        self.pairs[k] = np.vstack([P[:off[node]], new_pairs, P[off[node + 1]:]])
        sizes = np.diff(off)
        sizes[node] = len(new_pairs)
        self.offsets[k] = np.concatenate([[0], np.cumsum(sizes)])
        self._minima.pop(k, None)


def _successors(game, grid, t, delta, nodes=None):
    X = grid.nodes()
    if nodes is not None:
        X = X[np.atleast_1d(nodes)]
    F = game.f_batch(t, X)
    G = game.g_batch(t, X)
    nxt = X[:, None, None, :] + delta * (F[:, :, None, :] + G[:, None, :, :])
    flat, _ = grid.snap(nxt.reshape(-1, game.n))
    return flat.reshape(X.shape[0], F.shape[1], G.shape[1])


def default_eps(game: GameDefinition, grid: StateGrid) -> float:
    s1, s2 = game.payoffs_batch(grid.nodes())
    spread = max(float(s1.max() - s1.min()), float(s2.max() - s2.min()))
    return 1e-3 * spread if spread > 0 else 1e-3


def _gather(offsets, owners, sources):
    """Row indices of the sets of ``sources`` and the owner of every gathered row."""
    sizes = offsets[sources + 1] - offsets[sources]
    total = int(sizes.sum())
    starts = np.repeat(offsets[sources], sizes)
    within = np.arange(total) - np.repeat(np.cumsum(sizes) - sizes, sizes)
    return starts + within, np.repeat(owners, sizes)


_BITS = 21


def _unique_rows(keys: np.ndarray) -> np.ndarray:
    """Sorted unique rows of an ``(m, 3)`` integer array (node, k1, k2)."""
    half = 1 << (_BITS - 1)
    if len(keys) and keys[:, 0].max() < (1 << _BITS) and np.abs(keys[:, 1:]).max() < half:
        packed = (keys[:, 0] << (2 * _BITS)) | ((keys[:, 1] + half) << _BITS) | (keys[:, 2] + half)
        packed = np.unique(packed)
        mask = (1 << _BITS) - 1
        return np.column_stack([packed >> (2 * _BITS), ((packed >> _BITS) & mask) - half, (packed & mask) - half])
    return np.unique(keys, axis=0)


def build_value_table(game: GameDefinition, constants: ShiftConstants | None, grid: StateGrid, N: int,
                      eps_payoff: float | None = None, max_pairs: int = 50_000_000,
                      check_cover: bool = True) -> ValueTable:
    """Fill the table by backward induction from the terminal payoffs.

    Candidate pairs at a node are the members of all successor sets, rounded
    to the ``eps_payoff`` lattice; a pair is kept when each component is at
    least that player's max-min guaranteed value minus ``eps_payoff``.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    if grid.n != game.n:
        raise ValueError("grid dimension differs from the game's state dimension")
    if check_cover:
        if constants is None:
            raise GridCoverageError("coverage check needs the shift constants")
        if not grid.covers(constants):
            raise GridCoverageError(
                f"grid [{grid.lo}, {grid.hi}] does not cover the working box "
                f"[{constants.box_lo}, {constants.box_hi}]")
    if eps_payoff is None:
        eps_payoff = default_eps(game, grid)
    if not eps_payoff > 0:
        raise ValueError("eps_payoff must be positive")

    S = grid.size
    s1, s2 = game.payoffs_batch(grid.nodes())
    pairs = [None] * (N + 1)
    offsets = [None] * (N + 1)
    pairs[N] = np.stack([s1, s2], axis=1)
    offsets[N] = np.arange(S + 1)
    table = ValueTable(game, N, grid, float(eps_payoff), offsets, pairs)
    total = S
    delta = game.T / N
    all_nodes = np.arange(S)

    for k in range(N - 1, -1, -1):
        succ = _successors(game, grid, k * delta, delta)
        m1, m2 = table.minima(k + 1)
        inner1 = m1[succ].min(axis=2)          # (S, |P|): worst case over v for each u
        inner2 = m2[succ].min(axis=1)          # (S, |Q|): worst case over u for each v
        rho1 = inner1.max(axis=1)
        rho2 = inner2.max(axis=1)

        flat = np.sort(succ.reshape(S, -1), axis=1)
        first = np.ones_like(flat, dtype=bool)
        first[:, 1:] = flat[:, 1:] != flat[:, :-1]
        owners = np.repeat(all_nodes, first.sum(axis=1))
        rows, owner = _gather(offsets[k + 1], owners, flat[first])
        if len(rows) > max_pairs:
            raise TableBudgetError(f"layer {k} gathers {len(rows)} candidate pairs (budget {max_pairs})")
        ckeys = lattice_keys(pairs[k + 1][rows], eps_payoff)
        cand = ckeys * eps_payoff
        slack = FILTER_SLACK * eps_payoff
        keep = (cand[:, 0] >= rho1[owner] - slack) & (cand[:, 1] >= rho2[owner] - slack)
        keys = np.column_stack([owner[keep], ckeys[keep]])

        empty = np.setdiff1d(all_nodes, keys[:, 0]) if len(keys) else all_nodes
        if len(empty):
            # maximin witnesses: any pair of their successor passes the exact filter
            ustar = inner1[empty].argmax(axis=1)
            vstar = inner2[empty].argmax(axis=1)
            src = succ[empty, ustar, vstar]
            fb = pairs[k + 1][offsets[k + 1][src]]
            keys = np.vstack([keys, np.column_stack([empty, lattice_keys(fb, eps_payoff)])])
            table.fallback_count += len(empty)

        keys = _unique_rows(keys)
        total += len(keys)
        if total > max_pairs:
            raise TableBudgetError(f"table exceeds the pair budget of {max_pairs}")
        pairs[k] = keys[:, 1:] * eps_payoff
        offsets[k] = np.concatenate([[0], np.cumsum(np.bincount(keys[:, 0], minlength=S))])
    return table


# ---------------------------------------------------------------------------
# queries on a finished table
# ---------------------------------------------------------------------------


def sigma_min(table: ValueTable, k: int, node: int, i: int) -> float:
    """Smallest payoff of player ``i`` over the set stored at ``(k, node)``."""
    return float(table.layer_set(k, node)[:, i - 1].min())


def rho(table: ValueTable, k: int, node: int, i: int) -> float:
    """Guaranteed value of player ``i`` at ``(k, node)``: max over own control of min over the other's."""
    if k >= table.N:
        raise ValueError("rho is defined for k < N")
    succ = table.successors(k, [node])[0]
    m = table.minima(k + 1)[i - 1][succ]
    if i == 1:
        return float(m.min(axis=1).max())
    return float(m.min(axis=0).max())


def _layers_at(table: ValueTable, t: float) -> tuple:
    T = table.game.T
    kf = t / table.delta
    k = int(round(kf))
    if abs(t - table.time(k)) <= TIME_TOL * max(1.0, T):
        k = min(max(k, 0), table.N)
        return (k,) if k == table.N else (k, k + 1)
    return (min(max(int(math.ceil(kf)), 1), table.N),)


def query(table: ValueTable, t: float, x) -> PayoffSet:
    """Payoff set at ``(t, x)``: ``x`` snaps to the nearest node; exact grid times take
    the union of the layer at ``t`` and the next one."""
    if not -TIME_TOL <= t <= table.game.T + TIME_TOL:
        raise ValueError(f"time {t} outside [0, T]")
    idx, clamped = table.grid.snap(x)
    node = int(idx[0])
    layers = _layers_at(table, t)
    if len(layers) == 1:
        P = table.layer_set(layers[0], node)
    else:
        P = dedup_pairs(np.vstack([table.layer_set(k, node) for k in layers]), table.eps_payoff)
    return PayoffSet(P, clamped=bool(clamped[0]), layers=layers)


def select_pair(pairs: np.ndarray, rule: str, eps: float = 0.0) -> PayoffPair:
    """Extremal pair under ``rule``; near-ties (within eps/2) go to larger J1, then larger J2."""
    P = np.asarray(pairs, dtype=float).reshape(-1, 2)
    if rule == "max_sum":
        score = P.sum(axis=1)
    elif rule == "max_J1":
        score = P[:, 0]
    elif rule == "max_J2":
        score = P[:, 1]
    elif rule == "min_J2":
        score = -P[:, 1]
    elif rule == "min_J1":
        score = -P[:, 0]
    else:
        raise ValueError(f"unknown selector rule {rule!r}; expected one of {RULES}")
    best = P[score >= score.max() - eps / 2]
    order = np.lexsort((best[:, 1], best[:, 0]))
    J1, J2 = best[order[-1]]
    return PayoffPair(float(J1), float(J2))


def select(table: ValueTable, t0: float, x0, rule: str, layer_only: bool = False) -> PayoffPair:
    """Selector value at ``(t0, x0)``; ``layer_only`` restricts exact grid times to the layer at ``t0``."""
    if layer_only:
        P = table.layer_set(table.layer_index(t0), table.grid.node_of(x0))
    else:
        P = query(table, t0, x0).pairs
    return select_pair(P, rule, table.eps_payoff)


def _control_index(grid: np.ndarray, control) -> int:
    if isinstance(control, (int, np.integer)):
        return int(control)
    c = np.atleast_1d(np.asarray(control, dtype=float))
    return int(np.abs(grid - c).max(axis=1).argmin())


@dataclass(frozen=True)
class Move:
    u: np.ndarray
    v: np.ndarray
    next_node: int
    pair: PayoffPair
    u_index: int
    v_index: int


def consistent_move(table: ValueTable, k: int, node: int, pair, tol: float | None = None) -> Move:
    """Control pair whose successor set carries ``pair`` (within ``2 * eps_payoff``)."""
    if k >= table.N:
        raise NoWitness(f"layer {k} has no successor layer")
    tol = 2.0 * table.eps_payoff if tol is None else tol
    target = np.asarray(tuple(pair), dtype=float)
    succ = table.successors(k, [node])[0]
    best = None
    for iu in range(succ.shape[0]):
        for iv in range(succ.shape[1]):
            P = table.layer_set(k + 1, succ[iu, iv])
            d = np.abs(P - target).max(axis=1)
            j = int(d.argmin())
            if d[j] <= tol and (best is None or d[j] < best[0]):
                best = (float(d[j]), iu, iv, j)
    if best is None:
        raise NoWitness(f"no successor of node {node} at layer {k} carries {tuple(target)}")
    _, iu, iv, j = best
    nxt = int(succ[iu, iv])
    J1, J2 = table.layer_set(k + 1, nxt)[j]
    return Move(table.game.control_grid_P[iu], table.game.control_grid_Q[iv], nxt,
                PayoffPair(float(J1), float(J2)), iu, iv)


def punish_move(table: ValueTable, k: int, node: int, fixed_role: str, fixed_control) -> Move:
    """Response that holds the fixed player's guaranteed payoff down.

    ``fixed_role="I"``: player I's ``u`` is fixed and ``v`` minimizes the successor's
    smallest J1.  ``fixed_role="II"``: ``v`` is fixed and ``u`` minimizes the smallest J2.
    The returned pair attains that minimum (ties as in :func:`select_pair`).
    """
    if k >= table.N:
        raise NoWitness(f"layer {k} has no successor layer")
    game = table.game
    succ = table.successors(k, [node])[0]
    m1, m2 = table.minima(k + 1)
    if fixed_role == "I":
        iu = _control_index(game.control_grid_P, fixed_control)
        iv = int(m1[succ[iu, :]].argmin())
        i = 0
    elif fixed_role == "II":
        iv = _control_index(game.control_grid_Q, fixed_control)
        iu = int(m2[succ[:, iv]].argmin())
        i = 1
    else:
        raise ValueError("fixed_role must be 'I' or 'II'")
    nxt = int(succ[iu, iv])
    pair = select_pair(table.layer_set(k + 1, nxt), "min_J1" if i == 0 else "min_J2")
    return Move(game.control_grid_P[iu], game.control_grid_Q[iv], nxt, pair, iu, iv)


# ---------------------------------------------------------------------------
# serialization and reports
# ---------------------------------------------------------------------------

FORMAT = "cgsnash.value_table/1"


def table_to_dict(table: ValueTable) -> dict:
    game = table.game
    layers = []
    for k in range(table.N + 1):
        off = table.offsets[k]
        P = table.pairs[k]
        records = [[node, P[off[node]:off[node + 1]].tolist()] for node in range(table.grid.size)]
        layers.append({"k": k, "records": records})
    return {
        "format": FORMAT,
        "game": {"name": game.name, "source": game.source, "control_points": int(game.control_grid_P.shape[0])},
        "control_grid_P": game.control_grid_P.tolist(),
        "control_grid_Q": game.control_grid_Q.tolist(),
        "N": table.N,
        "grid": table.grid.spec(),
        "eps_payoff": table.eps_payoff,
        "fallback_count": table.fallback_count,
        "layers": layers,
    }


def export_table(table: ValueTable, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(table_to_dict(table), fh)


def table_from_dict(doc: dict, game: GameDefinition | None = None) -> ValueTable:
    if doc.get("format") != FORMAT:
        raise ValueError(f"unsupported table format {doc.get('format')!r}")
    if game is None:
        meta = doc["game"]
        points = max(_points_per_axis(doc["control_grid_P"]), _points_per_axis(doc["control_grid_Q"]))
        if meta.get("source"):
            game = load_game(meta["source"], points)
        else:
            game = builtin_game(meta["name"], points)
    if (not np.array_equal(game.control_grid_P, np.asarray(doc["control_grid_P"], dtype=float))
            or not np.array_equal(game.control_grid_Q, np.asarray(doc["control_grid_Q"], dtype=float))):
        raise ValueError("control grids of the game differ from the stored table")
    g = doc["grid"]
    grid = StateGrid(tuple(g["lo"]), tuple(g["hi"]), tuple(g["step"]))
    pairs, offsets = [], []
    for layer in doc["layers"]:
        sets = [np.asarray(rec[1], dtype=float).reshape(-1, 2) for rec in layer["records"]]
        pairs.append(np.vstack(sets))
        offsets.append(np.concatenate([[0], np.cumsum([len(s) for s in sets])]))
    return ValueTable(game, int(doc["N"]), grid, float(doc["eps_payoff"]), offsets, pairs,
                      fallback_count=int(doc.get("fallback_count", 0)))


def _points_per_axis(grid_rows) -> int:
    G = np.asarray(grid_rows, dtype=float)
    return max(len(np.unique(G[:, j])) for j in range(G.shape[1]))


def import_table(path, game: GameDefinition | None = None) -> ValueTable:
    with open(path, encoding="utf-8") as fh:
        return table_from_dict(json.load(fh), game)


def export_slice_csv(table: ValueTable, path, layers=None) -> None:
    """Rows ``t, x..., J1, J2, set_size`` for every stored pair of the chosen layers."""
    layers = range(table.N + 1) if layers is None else layers
    X = table.grid.nodes()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"x{i + 1}" for i in range(table.grid.n)] + ["J1", "J2", "set_size"])
        for k in layers:
            t = table.time(k)
            for node in range(table.grid.size):
                P = table.layer_set(k, node)
                for J1, J2 in P:
                    w.writerow([repr(t)] + [repr(float(a)) for a in X[node]] + [repr(float(J1)), repr(float(J2)), len(P)])


def hausdorff(A, B) -> float:
    """Hausdorff distance between finite pair sets in the max-norm."""
    A = np.asarray(A, dtype=float).reshape(-1, 2)
    B = np.asarray(B, dtype=float).reshape(-1, 2)
    D = np.abs(A[:, None, :] - B[None, :, :]).max(axis=2)
    return float(max(D.min(axis=1).max(), D.min(axis=0).max()))


def refinement_report(coarse: ValueTable, fine: ValueTable, probes) -> list:
    """Hausdorff distance between the queries of two tables at each probe ``(t, x)``."""
    return [{"t": float(t), "x": list(np.atleast_1d(x)),
             "hausdorff": hausdorff(query(coarse, t, x).pairs, query(fine, t, x).pairs)}
            for t, x in probes]
