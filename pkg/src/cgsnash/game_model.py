"""Game definitions, configuration loading and extremal-shift constants.

A game is ``x' = f(t, x, u) + g(t, x, v)`` on ``[0, T]`` with terminal payoffs
``sigma1``, ``sigma2``.  The compact control sets are represented by finite
grids, so every max/min over controls is an exact enumeration.
"""

from __future__ import annotations

import itertools
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib


class GameConfigError(ValueError):
    """Raised for malformed or inconsistent game configuration."""


# ---------------------------------------------------------------------------
# dynamics and payoff building blocks
# ---------------------------------------------------------------------------


class AffineDrift:
    """``(t, x, w) -> A x + b + B w``; time invariant."""

    def __init__(self, A, b, B):
        self.A = np.asarray(A, dtype=float)
        self.b = np.asarray(b, dtype=float)
        self.B = np.asarray(B, dtype=float)

    def __call__(self, t, x, w):
        return self.A @ np.asarray(x, dtype=float) + self.b + self.B @ np.asarray(w, dtype=float)

    def batch(self, t, X, W):
        """Evaluate at every state row of ``X`` and control row of ``W``: shape (m, k, n)."""
        drift = X @ self.A.T + self.b
        return drift[:, None, :] + (W @ self.B.T)[None, :, :]


class LinearPayoff:
    """``x -> c.x + d``."""

    kind = "linear"

    def __init__(self, c, d=0.0):
        self.c = np.asarray(c, dtype=float)
        self.d = float(d)

    def __call__(self, x):
        return float(self.c @ np.asarray(x, dtype=float) + self.d)

    def batch(self, X):
        return X @ self.c + self.d

    def lipschitz(self):
        return float(np.linalg.norm(self.c))


class AbsLinearPayoff(LinearPayoff):
    """``x -> |c.x| + d``."""

    kind = "abs_linear"

    def __call__(self, x):
        return float(abs(self.c @ np.asarray(x, dtype=float)) + self.d)

    def batch(self, X):
        return np.abs(X @ self.c) + self.d


def _batch_dynamics(fn, t, X, W):
    if hasattr(fn, "batch"):
        return fn.batch(t, X, W)
    out = np.empty((X.shape[0], W.shape[0], X.shape[1]))
    for i, x in enumerate(X):
        for j, w in enumerate(W):
            out[i, j] = fn(t, x, w)
    return out


def _batch_payoff(fn, X):
    if hasattr(fn, "batch"):
        return np.asarray(fn.batch(X), dtype=float)
    return np.array([fn(x) for x in X], dtype=float)


# ---------------------------------------------------------------------------
# game definition
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GameDefinition:
    """Two-player game with separated dynamics and terminal payoffs.

    ``control_grid_P`` / ``control_grid_Q`` are 2-d arrays, one control vector
    per row.  ``f_eval`` and ``g_eval`` take ``(t, x, control)``; they may
    expose a ``batch(t, X, W)`` method for vectorized evaluation.
    """

    name: str
    n: int
    T: float
    control_grid_P: np.ndarray
    control_grid_Q: np.ndarray
    f_eval: Callable
    g_eval: Callable
    sigma1: Callable
    sigma2: Callable
    time_invariant: bool = False
    default_box: tuple | None = None
    source: str | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.n < 1:
            raise GameConfigError("state dimension must be >= 1")
        if not self.T > 0:
            raise GameConfigError(f"horizon must be positive, got {self.T}")
        for label, grid in (("P", self.control_grid_P), ("Q", self.control_grid_Q)):
            if grid.ndim != 2 or grid.shape[0] == 0:
                raise GameConfigError(f"control grid {label} must be a nonempty 2-d array")

    def f(self, t, x, u):
        return np.asarray(self.f_eval(t, np.asarray(x, dtype=float), np.asarray(u, dtype=float)), dtype=float)

    def g(self, t, x, v):
        return np.asarray(self.g_eval(t, np.asarray(x, dtype=float), np.asarray(v, dtype=float)), dtype=float)

    def f_batch(self, t, X):
        """``f`` at every row of ``X`` for every P-grid control: shape (m, |P|, n)."""
        return _batch_dynamics(self.f_eval, t, np.atleast_2d(np.asarray(X, dtype=float)), self.control_grid_P)

    def g_batch(self, t, X):
        """``g`` at every row of ``X`` for every Q-grid control: shape (m, |Q|, n)."""
        return _batch_dynamics(self.g_eval, t, np.atleast_2d(np.asarray(X, dtype=float)), self.control_grid_Q)

    def payoffs(self, x):
        return float(self.sigma1(np.asarray(x, dtype=float))), float(self.sigma2(np.asarray(x, dtype=float)))

    def payoffs_batch(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return _batch_payoff(self.sigma1, X), _batch_payoff(self.sigma2, X)


def rhs(game: GameDefinition, t, x, u, v) -> np.ndarray:
    """Velocity ``f(t, x, u) + g(t, x, v)``."""
    return game.f(t, x, u) + game.g(t, x, v)


def box_grid(lo, hi, points: int) -> np.ndarray:
    """Product grid over a box with ``points`` per non-degenerate axis, endpoints included."""
    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    hi = np.atleast_1d(np.asarray(hi, dtype=float))
    if lo.shape != hi.shape:
        raise GameConfigError("control box bounds have different lengths")
    if np.any(hi < lo):
        raise GameConfigError("control box has hi < lo")
    axes = []
    for a, b in zip(lo, hi):
        if a == b:
            axes.append(np.array([a]))
        else:
            if points < 2:
                raise GameConfigError("control grid resolution must be >= 2 on a non-degenerate axis")
            axes.append(np.linspace(a, b, points))
    return np.array(list(itertools.product(*axes)), dtype=float)


def affine_game(name, T, A, b, B, C, P_box, Q_box, payoff1, payoff2, control_points=5,
                default_box=None, source=None) -> GameDefinition:
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    B = np.asarray(B, dtype=float).reshape(n, -1)
    C = np.asarray(C, dtype=float).reshape(n, -1)
    P = box_grid(*P_box, control_points)
    Q = box_grid(*Q_box, control_points)
    if P.shape[1] != B.shape[1] or Q.shape[1] != C.shape[1]:
        raise GameConfigError("control box dimension does not match B/C columns")
    return GameDefinition(
        name=name, n=n, T=float(T), control_grid_P=P, control_grid_Q=Q,
        f_eval=AffineDrift(A, b, B), g_eval=AffineDrift(np.zeros((n, n)), np.zeros(n), C),
        sigma1=payoff1, sigma2=payoff2, time_invariant=True,
        default_box=default_box, source=source,
    )


def example1(control_points: int = 5) -> GameDefinition:
    """x1' = -v, x2' = 2u + v on [0, 1], u, v in [-1, 1]; player i maximizes x_i(1)."""
    return affine_game(
        "example1", 1.0,
        A=np.zeros((2, 2)), b=np.zeros(2), B=[[0.0], [2.0]], C=[[-1.0], [1.0]],
        P_box=([-1.0], [1.0]), Q_box=([-1.0], [1.0]),
        payoff1=LinearPayoff([1.0, 0.0]), payoff2=LinearPayoff([0.0, 1.0]),
        control_points=control_points, default_box=((-1.0, -1.0), (1.0, 1.0)),
    )


def example2(control_points: int = 5) -> GameDefinition:
    """x' = u on [0, 1]; player I maximizes |x(1)|, the fictitious player II maximizes x(1)."""
    return affine_game(
        "example2", 1.0,
        A=np.zeros((1, 1)), b=np.zeros(1), B=[[1.0]], C=[[0.0]],
        P_box=([-1.0], [1.0]), Q_box=([0.0], [0.0]),
        payoff1=AbsLinearPayoff([1.0]), payoff2=LinearPayoff([1.0]),
        control_points=control_points, default_box=((-0.5,), (0.5,)),
    )


BUILTIN_GAMES = {"example1": example1, "example2": example2}


def builtin_game(name: str, control_points: int = 5) -> GameDefinition:
    try:
        factory = BUILTIN_GAMES[name]
    except KeyError:
        raise GameConfigError(f"unknown game {name!r}; known: {sorted(BUILTIN_GAMES)}") from None
    game = factory(control_points)
    return game


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

_GAME_KEYS = {"name", "kind", "T", "n", "control_points", "box_lo", "box_hi"}
_DYN_KEYS = {"A", "b", "B", "C", "P_lo", "P_hi", "Q_lo", "Q_hi"}
_PAYOFF_KEYS = {"kind", "c", "d"}
_PAYOFF_KINDS = {"linear": LinearPayoff, "abs_linear": AbsLinearPayoff}


def _check_keys(section, allowed, label):
    unknown = set(section) - allowed
    if unknown:
        raise GameConfigError(f"unknown keys in [{label}]: {sorted(unknown)}")


def _matrix(values, rows, cols, label):
    try:
        arr = np.asarray(values, dtype=float)
    except (TypeError, ValueError):
        raise GameConfigError(f"{label} must be a list of numbers") from None
    if arr.ndim != 1 or arr.size != rows * cols:
        raise GameConfigError(f"{label} must hold {rows}x{cols} numbers in row-major order, got {arr.size}")
    if not np.all(np.isfinite(arr)):
        raise GameConfigError(f"{label} has non-finite entries")
    return arr.reshape(rows, cols)


def _payoff(section, n, label):
    _check_keys(section, _PAYOFF_KEYS, label)
    kind = section.get("kind", "linear")
    if kind not in _PAYOFF_KINDS:
        raise GameConfigError(f"[{label}] kind must be one of {sorted(_PAYOFF_KINDS)}")
    if "c" not in section:
        raise GameConfigError(f"[{label}] needs coefficients c")
    c = _matrix(section["c"], 1, n, f"{label}.c")[0]
    return _PAYOFF_KINDS[kind](c, float(section.get("d", 0.0)))


def load_game(config_text: str, control_points: int | None = None) -> GameDefinition:
    """Parse a TOML game document.

    A document whose ``[game]`` section has no ``kind = "affine"`` must name a
    built-in game.  Affine games need ``[dynamics]``, ``[payoff1]`` and
    ``[payoff2]`` sections; matrices are row-major number lists.
    ``control_points`` overrides the document's grid resolution.
    """
    try:
        doc = tomllib.loads(config_text)
    except tomllib.TOMLDecodeError as exc:
        raise GameConfigError(f"cannot parse game config: {exc}") from None
    _check_keys(doc, {"game", "dynamics", "payoff1", "payoff2"}, "document")
    if "game" not in doc:
        raise GameConfigError("missing [game] section")
    head = doc["game"]
    _check_keys(head, _GAME_KEYS, "game")
    points = int(head.get("control_points", 5)) if control_points is None else int(control_points)
    kind = head.get("kind", "builtin")
    name = head.get("name")
    if not name:
        raise GameConfigError("[game] needs a name")

    if kind == "builtin":
        extra = set(doc) - {"game"}
        if extra:
            raise GameConfigError(f"built-in games take no sections besides [game], got {sorted(extra)}")
        return builtin_game(name, points)
    if kind != "affine":
        raise GameConfigError(f"unknown game kind {kind!r}")

    for sec in ("dynamics", "payoff1", "payoff2"):
        if sec not in doc:
            raise GameConfigError(f"affine game needs a [{sec}] section")
    T = float(head.get("T", 1.0))
    if not T > 0:
        raise GameConfigError(f"horizon must be positive, got {T}")
    if "n" not in head:
        raise GameConfigError("[game] needs the state dimension n")
    n = int(head["n"])
    if n < 1:
        raise GameConfigError("n must be >= 1")
    dyn = doc["dynamics"]
    _check_keys(dyn, _DYN_KEYS, "dynamics")
    for key in ("B", "C", "P_lo", "P_hi", "Q_lo", "Q_hi"):
        if key not in dyn:
            raise GameConfigError(f"[dynamics] needs {key}")
    p = len(dyn["P_lo"])
    q = len(dyn["Q_lo"])
    if len(dyn["P_hi"]) != p or len(dyn["Q_hi"]) != q:
        raise GameConfigError("control box bounds have different lengths")
    A = _matrix(dyn.get("A", [0.0] * n * n), n, n, "A")
    b = _matrix(dyn.get("b", [0.0] * n), 1, n, "b")[0]
    B = _matrix(dyn["B"], n, p, "B")
    C = _matrix(dyn["C"], n, q, "C")
    box = None
    if "box_lo" in head or "box_hi" in head:
        box = (tuple(_matrix(head["box_lo"], 1, n, "box_lo")[0]), tuple(_matrix(head["box_hi"], 1, n, "box_hi")[0]))
    return affine_game(
        name, T, A, b, B, C,
        (dyn["P_lo"], dyn["P_hi"]), (dyn["Q_lo"], dyn["Q_hi"]),
        _payoff(doc["payoff1"], n, "payoff1"), _payoff(doc["payoff2"], n, "payoff2"),
        control_points=points, default_box=box, source=config_text,
    )


def resolve_game(spec: str, control_points: int | None = None) -> GameDefinition:
    """A built-in name or a path to a TOML file."""
    if spec in BUILTIN_GAMES:
        return builtin_game(spec, 5 if control_points is None else control_points)
    if not os.path.isfile(spec):
        raise GameConfigError(f"unknown game {spec!r}: not a built-in name and no such file")
    with open(spec, encoding="utf-8") as fh:
        return load_game(fh.read(), control_points)


# ---------------------------------------------------------------------------
# constants
# ---------------------------------------------------------------------------

SPEED_SAFETY = 1.1
CONSTANT_SAFETY = 1.05


def _lookup_nondecreasing(grid, values, delta):
    # value at the smallest tabulated delta >= the query; conservative for a nondecreasing map
    if delta <= 0:
        return 0.0
    i = int(np.searchsorted(grid, delta, side="left"))
    if i >= len(grid):
        return float(values[-1])
    return float(values[i])


@dataclass(frozen=True)
class ShiftConstants:
    """Bounds used by the extremal shift estimates on the working box E.

    ``phi_star`` and ``phi_prime`` are tabulated on ``delta_grid`` (ascending,
    starting at 0) and read off conservatively between grid points.
    """

    box_lo: tuple
    box_hi: tuple
    K: float
    L: float
    beta: float
    R: float
    delta_grid: tuple
    phi_star_values: tuple
    K_prime: float
    L_prime: float
    phi_prime_values: tuple

    def phi_star(self, delta: float) -> float:
        return _lookup_nondecreasing(self.delta_grid, self.phi_star_values, delta)

    def phi(self, delta: float) -> float:
        delta = max(float(delta), 0.0)
        return 4.0 * self.phi_star(delta) * self.R + 4.0 * self.K ** 2 * delta

    def phi_prime(self, delta: float) -> float:
        return _lookup_nondecreasing(self.delta_grid, self.phi_prime_values, delta)

    def kappa(self, delta: float, elapsed: float) -> float:
        """Terminal envelope for ``||z - x||`` after ``elapsed`` time with diameter ``delta``."""
        return math.sqrt((1.0 + elapsed) * self.phi(delta) * math.exp(self.beta * elapsed))

    def contains(self, lo, hi) -> bool:
        return bool(np.all(np.asarray(self.box_lo) >= np.asarray(lo) - 1e-12)
                    and np.all(np.asarray(self.box_hi) <= np.asarray(hi) + 1e-12))


def _sample_box(rng, lo, hi, count):
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    pts = [lo + (hi - lo) * rng.random((count, lo.size))]
    if lo.size <= 10:
        corners = np.array(list(itertools.product(*zip(lo, hi))), dtype=float)
        pts.append(corners)
    pts.append(((lo + hi) / 2)[None, :])
    return np.vstack(pts)


def _velocities(game, t, X):
    """All velocities f+g at the rows of X: shape (m, |P|, |Q|, n)."""
    F = game.f_batch(t, X)
    G = game.g_batch(t, X)
    V = F[:, :, None, :] + G[:, None, :, :]
    if not np.all(np.isfinite(V)):
        raise GameConfigError(f"non-finite dynamics sample at t={t}")
    return V


def _max_speed(game, rng, lo, hi, count):
    X = _sample_box(rng, lo, hi, count)
    speed = 0.0
    per_coord = np.zeros(game.n)
    for t in _sample_times(rng, game.T, 8):
        V = _velocities(game, t, X)
        speed = max(speed, float(np.linalg.norm(V, axis=-1).max()))
        per_coord = np.maximum(per_coord, np.abs(V).reshape(-1, game.n).max(axis=0))
    return speed, per_coord


def _sample_times(rng, T, count):
    return np.concatenate([[0.0, T], rng.random(count) * T])


def _unit_vectors(rng, count, n):
    d = rng.standard_normal((count, n))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return np.vstack([d, np.eye(n), -np.eye(n)])


def estimate_constants(game: GameDefinition, initial_box=None, sample_count: int = 400,
                       seed: int = 0, delta_levels: int = 12) -> ShiftConstants:
    """Sample the constants K, L, phi*, K', L', phi' over an inflated working box.

    The working box is ``initial_box`` grown per coordinate by ``1.1 * max|x_j'| * T``,
    the speed bound being resampled once on the first inflated box.
    """
    if initial_box is None:
        initial_box = game.default_box
    if initial_box is None:
        raise GameConfigError("no initial box given and the game has no default")
    lo0 = np.asarray(initial_box[0], dtype=float).reshape(-1)
    hi0 = np.asarray(initial_box[1], dtype=float).reshape(-1)
    if lo0.size != game.n or hi0.size != game.n or np.any(hi0 < lo0):
        raise GameConfigError("initial box is empty or has the wrong dimension")
    if sample_count < 1:
        raise GameConfigError("sample_count must be >= 1")
    rng = np.random.default_rng(seed)

    _, per_coord = _max_speed(game, rng, lo0, hi0, sample_count)
    lo1, hi1 = lo0 - SPEED_SAFETY * per_coord * game.T, hi0 + SPEED_SAFETY * per_coord * game.T
    _, per_coord = _max_speed(game, rng, lo1, hi1, sample_count)
    lo, hi = lo0 - SPEED_SAFETY * per_coord * game.T, hi0 + SPEED_SAFETY * per_coord * game.T

    speed, _ = _max_speed(game, rng, lo, hi, sample_count)
    K = CONSTANT_SAFETY * speed
    R = float(np.linalg.norm(hi - lo))

    # Lipschitz constant of f+g in x, from difference quotients at several scales
    X1 = _sample_box(rng, lo, hi, sample_count)
    dirs = _unit_vectors(rng, X1.shape[0], game.n)[: X1.shape[0]]
    quotient = 0.0
    for scale in (1e-3, 1e-1, 1.0):
        X2 = X1 + scale * max(R, 1.0) * dirs
        gaps = np.linalg.norm(X2 - X1, axis=1)
        for t in _sample_times(rng, game.T, 2):
            num = np.linalg.norm(_velocities(game, t, X2) - _velocities(game, t, X1), axis=-1).max(axis=(1, 2))
            quotient = max(quotient, float((num / gaps).max()))
    L = CONSTANT_SAFETY * quotient

    delta_grid = np.concatenate([[0.0], game.T * 2.0 ** -np.arange(delta_levels, -1, -1)])
    phi_star = [0.0]
    phi_prime = [0.0]
    Xs = _sample_box(rng, lo, hi, sample_count)
    dirs = _unit_vectors(rng, Xs.shape[0], game.n)[: Xs.shape[0]]
    for delta in delta_grid[1:]:
        star = prime = 0.0
        for t1 in rng.random(4) * max(game.T - delta, 0.0):
            t2 = t1 + delta
            if not game.time_invariant:
                dv = _velocities(game, t2, Xs) - _velocities(game, t1, Xs)
                star = max(star, float(np.linalg.norm(dv, axis=-1).max()))
            Xd = Xs + K * delta * dirs
            dF = np.linalg.norm(game.f_batch(t2, Xd) - game.f_batch(t1, Xs), axis=-1).max(axis=1)
            dG = np.linalg.norm(game.g_batch(t2, Xd) - game.g_batch(t1, Xs), axis=-1).max(axis=1)
            prime = max(prime, float((dF + dG).max()))
        phi_star.append(CONSTANT_SAFETY * star)
        phi_prime.append(CONSTANT_SAFETY * prime)

    return ShiftConstants(
        box_lo=tuple(float(a) for a in lo), box_hi=tuple(float(a) for a in hi),
        K=K, L=L, beta=2.0 * L, R=R,
        delta_grid=tuple(float(d) for d in delta_grid),
        phi_star_values=tuple(np.maximum.accumulate(phi_star).tolist()),
        K_prime=K, L_prime=L,
        phi_prime_values=tuple(np.maximum.accumulate(phi_prime).tolist()),
    )


def affine_operator_norm(A, directions=4096, seed=0) -> float:
    """Largest ``||A d||`` over sampled unit directions."""
    A = np.asarray(A, dtype=float)
    rng = np.random.default_rng(seed)
    d = _unit_vectors(rng, directions, A.shape[1])
    return float(np.linalg.norm(d @ A.T, axis=1).max())


def random_affine_game(seed: int, n: int = 2, scale: float = 0.5, control_points: int = 5,
                       name: str | None = None) -> GameDefinition:
    """Random affine game with box controls in [-1, 1] and linear payoffs (test fixture)."""
    rng = np.random.default_rng(seed)
    A = scale * rng.uniform(-1, 1, (n, n))
    b = 0.2 * rng.uniform(-1, 1, n)
    B = rng.uniform(-1, 1, (n, 1))
    C = rng.uniform(-1, 1, (n, 1))
    c1 = rng.uniform(-1, 1, n)
    c2 = rng.uniform(-1, 1, n)
    return affine_game(
        name or f"affine_{seed}", 1.0, A, b, B, C, ([-1.0], [1.0]), ([-1.0], [1.0]),
        LinearPayoff(c1), LinearPayoff(c2), control_points=control_points,
        default_box=(tuple([-0.5] * n), tuple([0.5] * n)),
    )


def payoff_modulus(game: GameDefinition, constants: ShiftConstants, gamma: float,
                   sample_count: int = 400, seed: int = 0) -> float:
    """Sampled modulus of continuity of the payoffs on the working box at radius ``gamma``."""
    known = [getattr(s, "lipschitz", None) for s in (game.sigma1, game.sigma2)]
    if all(k is not None for k in known):
        return max(k() for k in known) * gamma
    rng = np.random.default_rng(seed)
    X = _sample_box(rng, constants.box_lo, constants.box_hi, sample_count)
    D = _unit_vectors(rng, X.shape[0], game.n)[: X.shape[0]] * gamma
    s1, s2 = game.payoffs_batch(X)
    t1, t2 = game.payoffs_batch(X + D)
    return CONSTANT_SAFETY * float(max(np.abs(t1 - s1).max(), np.abs(t2 - s2).max()))


__all__ = [
    "AbsLinearPayoff", "AffineDrift", "GameConfigError", "GameDefinition", "LinearPayoff",
    "ShiftConstants", "affine_game", "affine_operator_norm", "box_grid", "builtin_game",
    "estimate_constants", "example1", "example2", "load_game", "payoff_modulus",
    "random_affine_game", "resolve_game", "rhs",
]
