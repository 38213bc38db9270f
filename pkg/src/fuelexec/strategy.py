"""Liquidation strategies, their costs and the optimality gap.

Strategies are piecewise linear between grid nodes: on ``[t_j, t_{j+1})``
the position moves at constant rate ``xdot_j`` while the chain sits in
``Z_{t_j}``. The position ``x_{j+1}`` is chosen at ``t_j`` (before the
next jump), so every strategy here is adapted.

Costs use the same quadrature as the value-field recursion: impact
``sum eta(Z_j)|xdot_j|^p dt``, trapezoidal risk
``dt/2 (a_j|x_j|^p + a_{j+1}|x_{j+1}|^p)``, atoms at their nodes and the
terminal penalty. With that choice the cost of any strategy equals
``|x_0|^p v(0, z_0)`` plus a nonnegative per-step gap plus a
mean-zero martingale, exactly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .functional import ProblemSpec
from .loglaplace import ValueField, _exact_sink, fmt

MONOTONE_TOL = 1e-12
LINEAR_BOUND_TOL = 1e-9


@dataclass(frozen=True)
class CostBreakdown:
    impact: float
    risk: float
    terminal: float

    @property
    def total(self) -> float:
        return self.impact + self.risk + self.terminal


@dataclass(frozen=True)
class Trajectory:
    """One sampled path of ``Z`` with a strategy along it."""

    times: np.ndarray = field(repr=False)
    states: np.ndarray = field(repr=False)
    x: np.ndarray = field(repr=False)
    xdot: np.ndarray = field(repr=False)
    cost: CostBreakdown
    running_cost: np.ndarray = field(repr=False)
    v: Optional[np.ndarray] = field(default=None, repr=False)
    name: str = ""

    @property
    def x0(self) -> float:
        return float(self.x[0])

    def is_monotone(self, tol: float = MONOTONE_TOL) -> bool:
        a = np.abs(self.x)
        return bool(np.all(a[1:] <= a[:-1] + tol * max(1.0, a[0])) and np.all(self.x * self.x[0] >= -tol))

    def to_csv(self, path) -> None:
        v = self.v if self.v is not None else np.full(len(self.x), np.nan)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "state", "x", "xdot", "v", "running_cost"])
            for j in range(len(self.x)):
                xd = fmt(self.xdot[j]) if j < len(self.xdot) else ""
                w.writerow([fmt(self.times[j]), int(self.states[j]), fmt(self.x[j]), xd, fmt(v[j]), fmt(self.running_cost[j])])


def _check_paths(spec: ProblemSpec, paths) -> np.ndarray:
    paths = np.atleast_2d(np.asarray(paths))
    n, m = spec.model.n_steps, spec.model.m
    if paths.shape[1] != n + 1:
        raise ValueError(f"paths must have {n + 1} nodes, got {paths.shape[1]}")
    if paths.min() < 0 or paths.max() >= m:
        raise ValueError("path contains an invalid state index")
    return paths.astype(np.intp)


def _check_field(field_: ValueField, spec: ProblemSpec) -> None:
    if not field_.matches(spec):
        raise ValueError("value field was solved for a different problem")
    if not spec.is_control_normalized:
        raise ValueError("strategies need gamma = 1/beta so that v prices the control problem")


def feedback_multipliers(field_: ValueField, spec: ProblemSpec, paths, multiplier: float = 1.0) -> np.ndarray:
    """Per-step position ratios ``x_{j+1}/x_j`` for every path.

    The optimal ratio is ``1 / (1 + dt (C_j/eta)^beta)`` with ``C_j`` the
    continuation value at the current state; ``multiplier`` scales the
    trading intensity ``(C_j/eta)^beta`` to produce suboptimal but still
    adapted and monotone alternatives. An infinite continuation (last step
    of a fuel-constrained problem) gives ratio 0.
    """
    _check_field(field_, spec)
    if not multiplier > 0:
        raise ValueError("multiplier must be positive")
    paths = _check_paths(spec, paths)
    n, dt = spec.model.n_steps, spec.time_grid.dt
    z = paths[:, :n]
    cont = field_.continuation[np.arange(n), z]
    eta = spec.eta[z]
    with np.errstate(over="ignore"):
        rate = (cont / eta) ** spec.beta
    return 1.0 / (1.0 + multiplier * dt * rate)


def positions_from_multipliers(x0: float, y: np.ndarray) -> np.ndarray:
    y = np.atleast_2d(y)
    x = np.empty((y.shape[0], y.shape[1] + 1))
    x[:, 0] = x0
    x[:, 1:] = x0 * np.cumprod(y, axis=1)
    return x


def path_costs(spec: ProblemSpec, paths, x) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Impact, risk and terminal cost for each row of ``paths`` and ``x``."""
    paths = _check_paths(spec, paths)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape != paths.shape:
        raise ValueError("positions and paths must have the same shape")
    n, dt, p = spec.model.n_steps, spec.time_grid.dt, spec.p
    idx = np.arange(n + 1)
    ax = np.abs(x) ** p
    xdot = np.diff(x, axis=1) / dt
    impact = np.sum(spec.eta[paths[:, :n]] * np.abs(xdot) ** p, axis=1) * dt
    a = spec.A.density[idx, paths]
    atoms = spec.A.atom_table()[idx, paths]
    risk_nodes = 0.5 * dt * a * ax
    risk_nodes[:, 1:-1] *= 2.0
    risk = np.sum(risk_nodes + atoms * ax, axis=1)
    term = spec.terminal.values(spec.model.m)[paths[:, n]]
    with np.errstate(invalid="ignore"):
        terminal = np.where(ax[:, n] == 0, 0.0, term * ax[:, n])
    return impact, risk, terminal


def _running_cost(spec: ProblemSpec, path: np.ndarray, x: np.ndarray) -> np.ndarray:
    n, dt, p = spec.model.n_steps, spec.time_grid.dt, spec.p
    idx = np.arange(n + 1)
    ax = np.abs(x) ** p
    a = spec.A.density[idx, path] * ax
    inc = np.zeros(n + 1)
    inc[1:] = spec.eta[path[:n]] * np.abs(np.diff(x) / dt) ** p * dt + 0.5 * dt * (a[:-1] + a[1:])
    inc += spec.A.atom_table()[idx, path] * ax
    term = spec.terminal.values(spec.model.m)[path[n]]
    inc[n] += 0.0 if ax[n] == 0 else term * ax[n]
    return np.cumsum(inc)


def trajectory_from_positions(spec: ProblemSpec, path, x, field_: Optional[ValueField] = None, name: str = "") -> Trajectory:
    path = _check_paths(spec, path)[0]
    x = np.asarray(x, dtype=float)
    if x.shape != path.shape:
        raise ValueError("positions must have one entry per node")
    impact, risk, terminal = path_costs(spec, path[None], x[None])
    v = None
    if field_ is not None:
        v = field_.values[np.arange(len(path)), path]
    return Trajectory(
        times=spec.time_grid.nodes,
        states=path,
        x=x,
        xdot=np.diff(x) / spec.time_grid.dt,
        cost=CostBreakdown(float(impact[0]), float(risk[0]), float(terminal[0])),
        running_cost=_running_cost(spec, path, x),
        v=v,
        name=name,
    )


def feedback_strategy(field_: ValueField, spec: ProblemSpec, path, multiplier: float = 1.0) -> Trajectory:
    """Optimal feedback liquidation along ``path``; ``multiplier != 1`` gives a perturbed strategy."""
    y = feedback_multipliers(field_, spec, path, multiplier)
    x = positions_from_multipliers(spec.x0, y)[0]
    name = "feedback" if multiplier == 1.0 else f"feedback_x{multiplier:g}"
    return trajectory_from_positions(spec, path, x, field_, name=name)


def scaled_feedback(field_: ValueField, spec: ProblemSpec, path, multiplier: float) -> Trajectory:
    return feedback_strategy(field_, spec, path, multiplier)


def twap_positions(spec: ProblemSpec) -> np.ndarray:
    return spec.x0 * spec.time_grid.remaining / (spec.time_grid.T - spec.time_grid.t0)


def twap_strategy(spec: ProblemSpec, path) -> Trajectory:
    return trajectory_from_positions(spec, path, twap_positions(spec), name="twap")


def cost(traj: Trajectory, spec: ProblemSpec) -> CostBreakdown:
    impact, risk, terminal = path_costs(spec, traj.states[None], traj.x[None])
    return CostBreakdown(float(impact[0]), float(risk[0]), float(terminal[0]))


def phi_p(xi, zeta, p: float):
    """``xi^p - p zeta^{p-1} xi + (p-1) zeta^p``; nonnegative, zero iff ``xi == zeta``."""
    xi = np.asarray(xi, dtype=float)
    zeta = np.asarray(zeta, dtype=float)
    if np.any(xi < 0) or np.any(zeta < 0):
        raise ValueError("phi_p needs nonnegative arguments")
    if p < 2:
        raise ValueError("p must be >= 2")
    out = xi**p - p * zeta ** (p - 1) * xi + (p - 1) * zeta**p
    out = np.maximum(out, 0.0)
    return out[()] if out.ndim == 0 else out


def step_gaps(field_: ValueField, spec: ProblemSpec, paths, x) -> np.ndarray:
    """Per-step Bellman residuals, shape ``(n_paths, n_steps)``.

    ``gap_j = eta|xdot_j|^p dt + |x_{j+1}|^p C_j - |x_j|^p S(C_j)`` where
    ``C_j`` is the continuation value and ``S`` the one-step sink flow.
    Each term is ``>= 0``, and ``cost = |x_0|^p v(0) + sum_j gap_j`` plus a
    term with zero conditional mean at every step.
    """
    _check_field(field_, spec)
    paths = _check_paths(spec, paths)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n, dt, p = spec.model.n_steps, spec.time_grid.dt, spec.p
    z = paths[:, :n]
    cont = field_.continuation[np.arange(n), z]
    eta = spec.eta[z]
    coef = spec.sink()[z]
    ax = np.abs(x) ** p
    impact = eta * np.abs(np.diff(x, axis=1) / dt) ** p * dt
    with np.errstate(invalid="ignore"):
        carried = np.where(ax[:, 1:] == 0, 0.0, ax[:, 1:] * cont)
    sink = _exact_sink(cont, coef, spec.beta, dt)
    return impact + carried - ax[:, :n] * sink


def verification_gap(traj: Trajectory, field_: ValueField, spec: ProblemSpec) -> float:
    """Total optimality gap of ``traj`` on its own path."""
    return float(np.sum(step_gaps(field_, spec, traj.states[None], traj.x[None])))


def phi_gap(traj: Trajectory, field_: ValueField, spec: ProblemSpec) -> float:
    """Left-endpoint quadrature of ``int eta phi_p(|xdot|, |x|(v/eta)^beta) dt``.

    A continuous-time diagnostic; it agrees with :func:`verification_gap`
    only up to ``O(dt)`` and is skipped on steps where ``v`` is infinite.
    """
    n, dt = spec.model.n_steps, spec.time_grid.dt
    z = traj.states[:n]
    v = field_.values[np.arange(n), z]
    eta = spec.eta[z]
    ok = np.isfinite(v)
    zeta = np.abs(traj.x[:n]) * (v / eta) ** spec.beta
    terms = eta[ok] * phi_p(np.abs(traj.xdot[ok]), zeta[ok], spec.p)
    return float(np.sum(terms) * dt)


def linear_bound_check(traj: Trajectory, x0: float, T: float, tol: float = LINEAR_BOUND_TOL) -> bool:
    """True iff ``|x(t)| <= |x0| (T - t)/T`` at every node, up to ``tol``."""
    t0 = traj.times[0]
    bound = abs(x0) * (T - traj.times) / (T - t0)
    return bool(np.all(np.abs(traj.x) <= bound + tol * max(1.0, abs(x0))))


def write_comparison_csv(path, rows) -> None:
    """``rows`` are ``(name, McEstimate)`` pairs."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["strategy_name", "mean_cost", "stderr"])
        for name, est in rows:
            w.writerow([name, fmt(est.mean), fmt(est.stderr)])
