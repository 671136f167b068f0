"""Step-constant integration of the controlled system and its Euler discretization."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .game_model import GameDefinition, ShiftConstants


@dataclass(frozen=True)
class Partition:
    """Correction times ``t_0 < t_1 < ... < t_r``."""

    times: tuple
    step: float | None = None  # exact spacing of uniform partitions

    def __post_init__(self):
        ts = np.asarray(self.times, dtype=float)
        if ts.ndim != 1 or ts.size < 2:
            raise ValueError("a partition needs at least two times")
        if np.any(np.diff(ts) <= 0):
            raise ValueError("partition times must be strictly increasing")

    @classmethod
    def uniform(cls, t0: float, T: float, steps: int) -> "Partition":
        if steps < 1:
            raise ValueError("steps must be >= 1")
        ts = [t0 + (T - t0) * k / steps for k in range(steps)] + [T]
        return cls(tuple(float(t) for t in ts), (T - t0) / steps)

    @classmethod
    def with_diameter(cls, t0: float, T: float, delta: float) -> "Partition":
        return cls.uniform(t0, T, max(1, math.ceil((T - t0) / delta - 1e-9)))

    @property
    def diameter(self) -> float:
        return float(np.max(np.diff(self.times)))

    def __len__(self):
        return len(self.times)


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        if len(self.times) != len(self.states):
            raise ValueError("times and states differ in length")

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def to_csv(self, path):
        write_trajectory_csv(path, self.times, self.states)


@dataclass(frozen=True)
class DiscreteTrajectory:
    """Euler states at ``t_k = k T / N`` for ``k = k_start .. N``."""

    N: int
    k_start: int
    states: np.ndarray
    T: float

    def __post_init__(self):
        if len(self.states) != self.N - self.k_start + 1:
            raise ValueError("discrete trajectory length must be N - k_start + 1")

    @property
    def times(self) -> np.ndarray:
        return np.array([self.T * k / self.N for k in range(self.k_start, self.N + 1)])

    def to_csv(self, path):
        write_trajectory_csv(path, self.times, self.states)


def write_trajectory_csv(path, times, states):
    states = np.atleast_2d(np.asarray(states, dtype=float))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"x{i + 1}" for i in range(states.shape[1])])
        for t, x in zip(times, states):
            w.writerow([repr(float(t))] + [repr(float(a)) for a in x])


def read_trajectory_csv(path) -> Trajectory:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    data = np.array([[float(a) for a in row] for row in rows[1:]])
    return Trajectory(times=data[:, 0], states=data[:, 1:])


def euler_segment(game: GameDefinition, t0: float, t1: float, x0, u_of_t: Callable, v_of_t: Callable,
                  substeps: int, length: float | None = None) -> np.ndarray:
    """Explicit Euler over ``[t0, t1]``; controls are read at each substep's left end.

    ``length`` overrides ``t1 - t0`` as the segment length (uniform grids pass
    their exact step).
    """
    x = np.array(x0, dtype=float)
    h = ((t1 - t0) if length is None else length) / substeps
    for j in range(substeps):
        t = t0 + j * h
        x = x + h * (game.f(t, x, u_of_t(t)) + game.g(t, x, v_of_t(t)))
    return x


def integrate(game: GameDefinition, t0: float, x0, u_signal: Sequence, v_signal: Sequence,
              partition: Partition, substeps: int = 64) -> Trajectory:
    """Integrate under controls held constant on each partition interval.

    With ``substeps=1`` on the uniform grid this is exactly the discrete
    Euler system.
    """
    times = partition.times
    if abs(times[0] - t0) > 1e-12:
        raise ValueError("t0 must equal the first partition time")
    if len(u_signal) != len(times) - 1 or len(v_signal) != len(times) - 1:
        raise ValueError("control signals must have one value per partition interval")
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    states = [np.array(x0, dtype=float)]
    for k in range(len(times) - 1):
        u = np.atleast_1d(np.asarray(u_signal[k], dtype=float))
        v = np.atleast_1d(np.asarray(v_signal[k], dtype=float))
        states.append(euler_segment(game, times[k], times[k + 1], states[-1], lambda t: u, lambda t: v, substeps,
                                    partition.step))
    return Trajectory(times=np.array(times, dtype=float), states=np.array(states))


def discrete_traj(game: GameDefinition, N: int, k_start: int, xi_start, u_seq: Sequence,
                  v_seq: Sequence | None = None) -> DiscreteTrajectory:
    """Discrete-time system ``xi_{k+1} = xi_k + (T/N) [f + g](t_k, xi_k, u_k, v_k)``."""
    steps = N - k_start
    if steps < 0:
        raise ValueError("k_start must not exceed N")
    if v_seq is None:
        v_seq = [game.control_grid_Q[0]] * steps
    if len(u_seq) != steps or len(v_seq) != steps:
        raise ValueError(f"control sequences must have length N - k_start = {steps}")
    delta = game.T / N
    xs = [np.atleast_1d(np.array(xi_start, dtype=float))]
    for j in range(steps):
        t = (k_start + j) * delta
        u = np.atleast_1d(np.asarray(u_seq[j], dtype=float))
        v = np.atleast_1d(np.asarray(v_seq[j], dtype=float))
        xs.append(xs[-1] + delta * (game.f(t, xs[-1], u) + game.g(t, xs[-1], v)))
    return DiscreteTrajectory(N=N, k_start=k_start, states=np.array(xs), T=game.T)


def euler_error_bound(constants: ShiftConstants, initial_gap: float, elapsed: float, deltaN: float) -> float:
    """Distance bound between the continuous motion and the Euler system after ``elapsed``."""
    Lp = constants.L_prime
    return initial_gap * math.exp(2.0 * Lp * elapsed) + constants.phi_prime(deltaN) * math.exp(Lp * elapsed)
