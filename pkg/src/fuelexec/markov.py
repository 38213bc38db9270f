"""Finite-state Markov chains on a uniform time grid.

The one-particle motion is represented by a family of row-stochastic
matrices ``P_j`` acting between consecutive grid nodes. Between nodes the
chain does not move, so the embedded process is a cadlag pure-jump process
whose expectation operator is an exact matrix product.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ROW_SUM_TOL = 1e-12


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t0 = t_0 < ... < t_n = T``."""

    t0: float
    T: float
    n_steps: int

    def __post_init__(self):
        if int(self.n_steps) != self.n_steps or self.n_steps < 2:
            raise ValueError(f"n_steps must be an integer >= 2, got {self.n_steps}")
        if not self.T > self.t0:
            raise ValueError(f"horizon T={self.T} must exceed t0={self.t0}")
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.n_steps

    @property
    def nodes(self) -> np.ndarray:
        t = self.t0 + self.dt * np.arange(self.n_steps + 1)
        t[-1] = self.T
        return t

    @property
    def remaining(self) -> np.ndarray:
        """Time to maturity ``T - t_j`` at each node (exactly 0 at the end)."""
        return self.dt * np.arange(self.n_steps, -1, -1, dtype=float)

    def index_of(self, t: float) -> int:
        """Grid index of time ``t``; raises if ``t`` is not a node."""
        j = int(round((t - self.t0) / self.dt))
        if j < 0 or j > self.n_steps or not np.isclose(self.nodes[j], t, rtol=0, atol=1e-9 * max(1.0, abs(self.T))):
            raise ValueError(f"time {t} is not a node of {self}")
        return j


@dataclass(frozen=True)
class StateGrid:
    states: tuple

    def __post_init__(self):
        states = tuple(self.states)
        if len(states) < 1:
            raise ValueError("state grid must contain at least one state")
        if len(set(states)) != len(states):
            raise ValueError("state labels must be unique")
        object.__setattr__(self, "states", states)

    @property
    def m(self) -> int:
        return len(self.states)

    def __len__(self) -> int:
        return len(self.states)

    def coordinates(self) -> np.ndarray:
        return np.asarray(self.states, dtype=float)


@dataclass(frozen=True)
class MarkovModel:
    """Time grid, state grid and per-step transition matrices.

    ``kernel`` is either a single ``(m, m)`` matrix used at every step or an
    ``(n_steps, m, m)`` stack with ``kernel[j]`` mapping ``t_{j+1}`` back to
    ``t_j``.
    """

    time_grid: TimeGrid
    state_grid: StateGrid
    kernel: np.ndarray = field(repr=False)

    def __post_init__(self):
        P = np.array(self.kernel, dtype=float)
        m = self.state_grid.m
        if P.ndim == 2:
            if P.shape != (m, m):
                raise ValueError(f"kernel shape {P.shape} does not match {m} states")
        elif P.ndim == 3:
            if P.shape != (self.time_grid.n_steps, m, m):
                raise ValueError(
                    f"kernel stack shape {P.shape} must be ({self.time_grid.n_steps}, {m}, {m})"
                )
        else:
            raise ValueError("kernel must be a matrix or a stack of matrices")
        if not np.all(np.isfinite(P)) or np.any(P < 0):
            raise ValueError("kernel entries must be finite and nonnegative")
        err = np.max(np.abs(P.sum(axis=-1) - 1.0))
        if err > ROW_SUM_TOL:
            raise ValueError(f"kernel rows must sum to 1 (max deviation {err:.3e})")
        P.setflags(write=False)
        object.__setattr__(self, "kernel", P)

    @property
    def m(self) -> int:
        return self.state_grid.m

    @property
    def n_steps(self) -> int:
        return self.time_grid.n_steps

    @property
    def is_homogeneous(self) -> bool:
        return self.kernel.ndim == 2

    def step_matrix(self, j: int) -> np.ndarray:
        if not 0 <= j < self.n_steps:
            raise IndexError(f"step index {j} out of range [0, {self.n_steps})")
        return self.kernel if self.kernel.ndim == 2 else self.kernel[j]

    def apply(self, j: int, f: np.ndarray) -> np.ndarray:
        """One step of conditional expectation, ``P_j f``.

        Handles ``+inf`` entries of ``f`` without producing NaN: a state
        that reaches an infinite entry with positive probability maps to
        ``+inf``.
        """
        P = self.step_matrix(j)
        f = np.asarray(f, dtype=float)
        inf = np.isinf(f)
        if not inf.any():
            return P @ f
        out = P @ np.where(inf, 0.0, f)
        out[(P[:, inf] > 0).any(axis=1)] = np.inf
        return out

    def with_time_grid(self, time_grid: TimeGrid) -> "MarkovModel":
        if not self.is_homogeneous:
            raise ValueError("only homogeneous kernels can be moved to another grid")
        return MarkovModel(time_grid, self.state_grid, self.kernel)


def semigroup_expect(model: MarkovModel, j_from: int, j_to: int, f) -> np.ndarray:
    """Return ``E_{t_{j_from}, z}[f(Z_{t_{j_to}})]`` for every state ``z``."""
    n = model.n_steps
    if not (0 <= j_from <= j_to <= n):
        raise IndexError(f"need 0 <= j_from <= j_to <= {n}, got ({j_from}, {j_to})")
    g = np.array(f, dtype=float)
    if g.shape != (model.m,):
        raise ValueError(f"f must have length {model.m}")
    if not np.all(np.isfinite(g)):
        raise ValueError("f must be finite")
    for j in range(j_to - 1, j_from - 1, -1):
        g = model.step_matrix(j) @ g
    return g


def build_one_state(time_grid: TimeGrid, label=0) -> MarkovModel:
    return MarkovModel(time_grid, StateGrid((label,)), np.ones((1, 1)))


def build_two_state(rate_up: float, rate_down: float, time_grid: TimeGrid) -> MarkovModel:
    """Two-state chain switching 0->1 at ``rate_up`` and 1->0 at ``rate_down``."""
    dt = time_grid.dt
    if rate_up < 0 or rate_down < 0:
        raise ValueError("rates must be nonnegative")
    pu, pd = rate_up * dt, rate_down * dt
    if pu > 1 or pd > 1:
        raise ValueError(f"rate*dt must not exceed 1 (got {pu:.4g}, {pd:.4g})")
    P = np.array([[1.0 - pu, pu], [pd, 1.0 - pd]])
    return MarkovModel(time_grid, StateGrid((0, 1)), P)


def build_random_walk(
    volatility: float,
    state_grid: StateGrid,
    time_grid: TimeGrid,
    boundary: str = "reflect",
) -> MarkovModel:
    """Trinomial chain matching the first two moments of ``dZ = sigma dW``.

    Up and down probabilities are ``sigma^2 dt / (2 dz^2)`` each. With
    ``boundary="reflect"`` the outward move at an edge is mirrored back
    inward; with ``"absorb"`` the edge states are absorbing.
    """
    if boundary not in ("reflect", "absorb"):
        raise ValueError(f"unknown boundary {boundary!r}")
    z = state_grid.coordinates()
    m = len(z)
    P = np.eye(m)
    if volatility == 0 or m == 1:
        return MarkovModel(time_grid, state_grid, P)
    dz = np.diff(z)
    if np.any(dz <= 0) or not np.allclose(dz, dz[0], rtol=1e-9):
        raise ValueError("random walk needs an increasing uniform state grid")
    ratio = volatility**2 * time_grid.dt / dz[0] ** 2
    if ratio > 1 + 1e-12:
        raise ValueError(f"sigma^2 dt / dz^2 = {ratio:.4g} exceeds 1")
    p = 0.5 * min(ratio, 1.0)
    P = np.zeros((m, m))
    for i in range(1, m - 1):
        P[i, i - 1] = P[i, i + 1] = p
        P[i, i] = 1.0 - 2 * p
    for edge, inner in ((0, 1), (m - 1, m - 2)):
        if boundary == "absorb":
            P[edge, edge] = 1.0
        else:
            P[edge, inner] = 2 * p
            P[edge, edge] = 1.0 - 2 * p
    return MarkovModel(time_grid, state_grid, P)


def uniform_states(z_min: float, z_max: float, n_states: int) -> StateGrid:
    return StateGrid(tuple(float(x) for x in np.linspace(z_min, z_max, n_states)))


def stationary_distribution(P: np.ndarray) -> np.ndarray:
    w, vecs = np.linalg.eig(np.asarray(P).T)
    v = np.real(vecs[:, np.argmin(np.abs(w - 1.0))])
    return v / v.sum()


def as_state_function(values, m: int, name: str = "f") -> np.ndarray:
    if np.isscalar(values):
        out = np.full(m, float(values))
    else:
        out = np.array(values, dtype=float)
    if out.shape != (m,):
        raise ValueError(f"{name} must be a scalar or have length {m}")
    if not np.all(np.isfinite(out)):
        raise ValueError(f"{name} must be finite")
    return out


__all__ = [
    "TimeGrid",
    "StateGrid",
    "MarkovModel",
    "semigroup_expect",
    "build_one_state",
    "build_two_state",
    "build_random_walk",
    "uniform_states",
    "stationary_distribution",
    "as_state_function",
]
