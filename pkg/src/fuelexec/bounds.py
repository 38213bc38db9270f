"""Closed-form estimates for log-Laplace value fields.

All bounds take an optional ``gamma``. The default ``gamma = 1/beta`` is
the execution normalization; any other positive value is handled by
rescaling ``eta`` by ``(gamma*beta)^{-1/beta}``, which leaves the
harmonic-ratio constants unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .functional import AdditiveFunctional, ProblemSpec, trapezoid_weights
from .markov import MarkovModel, TimeGrid, as_state_function, build_one_state


def _gb(gamma: Optional[float], beta: float) -> float:
    return 1.0 if gamma is None else gamma * beta


def nonlinear_semigroup(y, t, gamma: float, beta: float):
    """``V_t y = y / (1 + gamma*beta*t*y^beta)^{1/beta}``; accepts ``y = inf``."""
    y = np.asarray(y, dtype=float)
    t = np.asarray(t, dtype=float)
    if np.any(y < 0) or np.any(t < 0):
        raise ValueError("y and t must be nonnegative")
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        finite = y / (1.0 + gamma * beta * t * y**beta) ** (1.0 / beta)
        limit = (gamma * beta * t) ** (-1.0 / beta)
    out = np.where(np.isinf(y), limit, finite)
    out = np.where(t == 0, y, out)
    return out[()] if out.ndim == 0 else out


def upper_bound_k(EA_tail, k, gamma, beta, remaining):
    """``E[A[r,T]] + k / (1 + gamma*beta*(T-r)*k^beta)^{1/beta}``."""
    return EA_tail + nonlinear_semigroup(k, remaining, gamma, beta)


def upper_bound_singular(EA_tail, gamma, beta, remaining):
    """``E[A[r,T]] + (gamma*beta*(T-r))^{-1/beta}``; undefined at maturity."""
    remaining = np.asarray(remaining, dtype=float)
    if np.any(remaining <= 0):
        raise ValueError("remaining time must be positive for the singular bound")
    out = EA_tail + (gamma * beta * remaining) ** (-1.0 / beta)
    return out[()] if np.ndim(out) == 0 else out


def upper_bound_eta(EA_tail, h_rz, k_or_inf, c_T, beta, remaining, gamma=None):
    """Upper bound for state-dependent branching.

    For finite ``k`` (terminal penalty ``k * eta``) this is
    ``E[A] + h k / (1 + c_T^{-beta} (T-r) k^beta)^{1/beta}``; for
    ``k = inf`` it is ``E[A] + c_T h / (T-r)^{1/beta}``.
    """
    gb = _gb(gamma, beta)
    remaining = np.asarray(remaining, dtype=float)
    if np.isinf(k_or_inf):
        if np.any(remaining <= 0):
            raise ValueError("remaining time must be positive for k = inf")
        out = EA_tail + c_T * h_rz / (gb * remaining) ** (1.0 / beta)
    else:
        k = float(k_or_inf)
        out = EA_tail + h_rz * k / (1.0 + c_T ** (-beta) * gb * remaining * k**beta) ** (1.0 / beta)
    return out[()] if np.ndim(out) == 0 else out


def lower_bound_extinction(h_rz, c_rT, beta, remaining, gamma=None):
    """``h(r,z) / (c_{r,T} (T-r)^{1/beta})``, a lower bound on ``-log P[X_T = 0]``."""
    remaining = np.asarray(remaining, dtype=float)
    if np.any(remaining <= 0):
        raise ValueError("remaining time must be positive")
    out = h_rz / (c_rT * (_gb(gamma, beta) * remaining) ** (1.0 / beta))
    return out[()] if np.ndim(out) == 0 else out


def gronwall_bound(a_fn, k: float, gamma: float, beta: float, time_grid: TimeGrid) -> Callable:
    """Return ``t -> a(t) + V_{T-t}(k)``.

    ``a_fn`` is a callable of time or an array of values on the grid nodes.
    """
    if callable(a_fn):
        a = a_fn
    else:
        values = np.asarray(a_fn, dtype=float)
        nodes = time_grid.nodes
        if values.shape != nodes.shape:
            raise ValueError("a must have one value per grid node")
        a = lambda t: np.interp(t, nodes, values)  # noqa: E731

    def bound(t):
        rem = np.maximum(time_grid.T - np.asarray(t, dtype=float), 0.0)
        return a(t) + nonlinear_semigroup(k, rem, gamma, beta)

    return bound


@dataclass(frozen=True)
class HField:
    """``h(t_j, z) = E_{t_j, z}[eta(Z_T)]`` and the constants derived from it.

    ``c_T`` is the smallest constant with
    ``eta/c <= E_{r,z}[eta(Z_t)] <= c eta`` over all grid pairs ``r <= t``;
    ``c_rT[j]`` and ``cbar_rT[j]`` are the max and min of ``h/eta`` over
    nodes ``>= j``; ``C_rT = cbar_rT / c_rT``.
    """

    h: np.ndarray = field(repr=False)
    eta: np.ndarray = field(repr=False)
    c_T: float
    c_rT: np.ndarray = field(repr=False)
    cbar_rT: np.ndarray = field(repr=False)

    @property
    def C_rT(self) -> np.ndarray:
        return self.cbar_rT / self.c_rT

    def ratio(self) -> np.ndarray:
        return self.h / self.eta


def _harmonic_ratio_extremes(model: MarkovModel, eta: np.ndarray) -> tuple[float, float]:
    n = model.n_steps
    lo, hi = 1.0, 1.0
    if model.is_homogeneous:
        g = eta.copy()
        for _ in range(n):
            g = model.kernel @ g
            r = g / eta
            lo, hi = min(lo, r.min()), max(hi, r.max())
        return lo, hi
    for l in range(1, n + 1):
        g = eta.copy()
        for j in range(l - 1, -1, -1):
            g = model.step_matrix(j) @ g
            r = g / eta
            lo, hi = min(lo, r.min()), max(hi, r.max())
    return lo, hi


def compute_h(model: MarkovModel, eta) -> HField:
    eta = as_state_function(eta, model.m, "eta")
    if np.any(eta <= 0):
        raise ValueError("eta must be strictly positive")
    n = model.n_steps
    h = np.empty((n + 1, model.m))
    h[n] = eta
    for j in range(n - 1, -1, -1):
        h[j] = model.step_matrix(j) @ h[j + 1]
    ratio = h / eta
    c_rT = np.maximum.accumulate(ratio.max(axis=1)[::-1])[::-1]
    cbar_rT = np.minimum.accumulate(ratio.min(axis=1)[::-1])[::-1]
    lo, hi = _harmonic_ratio_extremes(model, eta)
    return HField(h=h, eta=eta, c_T=float(max(hi, 1.0 / lo)), c_rT=c_rT, cbar_rT=cbar_rT)


@dataclass(frozen=True)
class AlphaMeasure:
    """Deterministic measure ``alpha_{r,z}(ds) = E_{r,z}[A(ds)]`` on the grid.

    ``density[j]`` is the expected density at node ``j`` and
    ``atom_mass[j]`` the expected atom mass there; both vanish before the
    anchor index.
    """

    time_grid: TimeGrid
    anchor: int
    density: np.ndarray = field(repr=False)
    atom_mass: np.ndarray = field(repr=False)

    def total_mass(self) -> float:
        w = trapezoid_weights(self.time_grid.n_steps, self.time_grid.dt)
        w = w.copy()
        w[self.anchor] = 0.5 * self.time_grid.dt
        return float(np.sum(w[self.anchor:] * self.density[self.anchor:]) + self.atom_mass.sum())

    def as_functional(self) -> tuple[MarkovModel, AdditiveFunctional]:
        """The measure as a functional of the trivial one-state chain."""
        model = build_one_state(self.time_grid)
        atoms = tuple((j, np.array([m])) for j, m in enumerate(self.atom_mass) if m > 0)
        return model, AdditiveFunctional(self.density[:, None].copy(), atoms)


def alpha_measure(spec: ProblemSpec, r: int, z: int) -> AlphaMeasure:
    if not spec.is_homogeneous:
        raise ValueError("the alpha measure is defined for homogeneous branching (constant eta)")
    model = spec.model
    n = model.n_steps
    if not 0 <= r <= n or not 0 <= z < model.m:
        raise IndexError("anchor (r, z) outside the grid")
    atoms = spec.A.atom_table()
    density = np.zeros(n + 1)
    atom_mass = np.zeros(n + 1)
    dist = np.zeros(model.m)
    dist[z] = 1.0
    for j in range(r, n + 1):
        density[j] = dist @ spec.A.density[j]
        atom_mass[j] = dist @ atoms[j]
        if j < n:
            dist = dist @ model.step_matrix(j)
    return AlphaMeasure(model.time_grid, r, density, atom_mass)


def propagators_to_T(model: MarkovModel) -> np.ndarray:
    """Stack of matrices ``Q_j = P_j ... P_{n-1}`` with ``Q_n = I``."""
    n, m = model.n_steps, model.m
    Q = np.empty((n + 1, m, m))
    Q[n] = np.eye(m)
    for j in range(n - 1, -1, -1):
        Q[j] = model.step_matrix(j) @ Q[j + 1]
    return Q


def sandwich_bounds(model: MarkovModel, f, gamma: float, beta: float) -> tuple[np.ndarray, np.ndarray]:
    """Lower ``E[V_{T-r} f(Z_T)]`` and upper ``V_{T-r} E[f(Z_T)]`` on every node."""
    f = as_state_function(f, model.m, "f")
    if np.any(f < 0):
        raise ValueError("f must be nonnegative")
    Q = propagators_to_T(model)
    rem = model.time_grid.remaining
    lower = np.empty((model.n_steps + 1, model.m))
    upper = np.empty_like(lower)
    for j in range(model.n_steps + 1):
        lower[j] = Q[j] @ nonlinear_semigroup(f, rem[j], gamma, beta)
        upper[j] = nonlinear_semigroup(Q[j] @ f, rem[j], gamma, beta)
    return lower, upper
