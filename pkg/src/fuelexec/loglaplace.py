"""Backward solver for the log-Laplace value fields ``v_k``, ``v_rho``, ``v_inf``.

The field solves, on the grid,

    v(t_j) = A-atom(t_j) + h/2 a(t_j)
             + S_h( P_j [ h/2 a(t_{j+1}) + v(t_{j+1}) ] ),

where ``S_h`` is the sink step over one interval at a frozen state. With
``scheme="exact"`` (default) ``S_h`` is the exact flow of
``v' = gamma v^{1+beta} / eta^beta``, i.e. the nonlinear semigroup
``w -> (w^{-beta} + gamma*beta*h/eta^beta)^{-1/beta}``. This is the exact
log-Laplace recursion of the chain that jumps only at grid times, and also
the Bellman recursion of the execution problem with piecewise-linear
trading, so it accepts ``w = +inf`` and yields the singular field directly.
With ``scheme="implicit"`` ``S_h`` is a backward-Euler step solved by
safeguarded Newton; it only supports finite terminal data.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import bounds
from .errors import ConvergenceError, MonotonicityError
from .functional import ProblemSpec, TerminalCondition, expected_A_tail_field
from .markov import StateGrid, TimeGrid

NEWTON_TOL = 1e-12
NEWTON_MAXITER = 100
DEFAULT_K_SCHEDULE = tuple(4.0**m for m in range(13))
TOL_K = 1e-8
GUARD_STEPS = 5
TOL_SINGULAR = 1e-3
SCHEMES = ("exact", "implicit")


@dataclass(frozen=True)
class ValueField:
    """Grid values ``v(t_j, z_i)`` with the data needed to use them.

    ``continuation[j]`` is ``P_j[h/2 a(t_{j+1}) + v(t_{j+1})]``, the expected
    value carried into step ``j``; the feedback strategy reads it directly.
    For singular fields the terminal row is ``+inf``.
    """

    values: np.ndarray = field(repr=False)
    continuation: np.ndarray = field(repr=False)
    terminal: TerminalCondition
    gamma: float
    beta: float
    eta: np.ndarray = field(repr=False)
    time_grid: TimeGrid
    state_grid: StateGrid
    scheme: str = "exact"
    diagnostics: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def is_singular(self) -> bool:
        return self.terminal.is_singular

    @property
    def n_steps(self) -> int:
        return self.time_grid.n_steps

    def v0(self, z: int) -> float:
        return float(self.values[0, z])

    def matches(self, spec: ProblemSpec) -> bool:
        return (
            self.time_grid == spec.time_grid
            and self.state_grid == spec.model.state_grid
            and abs(self.beta - spec.beta) <= 1e-15
            and abs(self.gamma - spec.gamma) <= 1e-15
            and np.array_equal(self.eta, spec.eta)
        )

    def to_csv(self, path) -> None:
        t = self.time_grid.nodes
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "state_index", "state_label", "v"])
            for j in range(self.n_steps + 1):
                for i, label in enumerate(self.state_grid.states):
                    w.writerow([fmt(t[j]), i, label, fmt(self.values[j, i])])


def fmt(x: float) -> str:
    """Round-trip decimal representation with 17 significant digits."""
    x = float(x)
    if np.isinf(x):
        return "inf" if x > 0 else "-inf"
    return format(x, ".17g")


def _exact_sink(w: np.ndarray, coef: np.ndarray, beta: float, h: float) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return (w ** (-beta) + coef * beta * h) ** (-1.0 / beta)


def _implicit_sink(w: np.ndarray, coef: np.ndarray, beta: float, h: float, j: int) -> np.ndarray:
    """Solve ``v + h*coef*v^{1+beta} = w`` for ``v >= 0`` node-wise."""
    if np.any(np.isinf(w)):
        raise ValueError("the implicit scheme cannot take an infinite terminal condition")
    c = h * coef
    if beta == 1.0:
        return 2.0 * w / (1.0 + np.sqrt(1.0 + 4.0 * c * w))
    # g(v) = v + c v^{1+beta} is increasing and convex, so Newton started
    # above the root decreases monotonically onto it.
    with np.errstate(divide="ignore"):
        v = np.minimum(w, np.where(c > 0, (w / c) ** (1.0 / (1.0 + beta)), w))
    for _ in range(NEWTON_MAXITER):
        g = v + c * v ** (1.0 + beta) - w
        if np.all(np.abs(g) <= NEWTON_TOL * np.maximum(1.0, w)):
            return v
        dg = 1.0 + c * (1.0 + beta) * v**beta
        v = np.clip(v - g / dg, 0.0, w)
    bad = int(np.argmax(np.abs(v + c * v ** (1.0 + beta) - w)))
    raise ConvergenceError("Newton iteration did not converge", node=(j, bad))


def _backward(spec: ProblemSpec, terminal_values: np.ndarray, scheme: str) -> tuple[np.ndarray, np.ndarray]:
    if scheme not in SCHEMES:
        raise ValueError(f"scheme must be one of {SCHEMES}")
    model, A = spec.model, spec.A
    n, h = model.n_steps, model.time_grid.dt
    beta, coef = spec.beta, spec.sink()
    atoms = A.atom_table()
    half = 0.5 * h * A.density
    v = np.empty((n + 1, model.m))
    cont = np.empty((n, model.m))
    v[n] = terminal_values + atoms[n]
    for j in range(n - 1, -1, -1):
        cont[j] = model.apply(j, half[j + 1] + v[j + 1])
        if scheme == "exact":
            s = _exact_sink(cont[j], coef, beta, h)
        else:
            s = _implicit_sink(cont[j], coef, beta, h, j)
        v[j] = atoms[j] + half[j] + s
    return v, cont


def _field(spec, values, cont, terminal, scheme, diagnostics=None) -> ValueField:
    values.setflags(write=False)
    cont.setflags(write=False)
    return ValueField(
        values=values,
        continuation=cont,
        terminal=terminal,
        gamma=spec.gamma,
        beta=spec.beta,
        eta=spec.eta,
        time_grid=spec.time_grid,
        state_grid=spec.model.state_grid,
        scheme=scheme,
        diagnostics=diagnostics or {},
    )


def solve_backward(spec: ProblemSpec, scheme: str = "exact") -> ValueField:
    """Solve for a finite terminal condition (``penalty_k`` or ``penalty_rho``)."""
    if spec.terminal.is_singular:
        raise ValueError("use solve_singular for the singular terminal condition")
    values, cont = _backward(spec, spec.terminal.values(spec.model.m), scheme)
    return _field(spec, values, cont, spec.terminal, scheme)


def solve_singular(
    spec: ProblemSpec,
    k_schedule: Optional[Sequence[float]] = None,
    tol_k: float = TOL_K,
    guard_steps: int = GUARD_STEPS,
    threads: int = 1,
) -> ValueField:
    """Fuel-constrained field ``v_inf`` as the monotone limit of ``v_k``.

    The field is computed by seeding the recursion with ``+inf``, which is
    the exact ``k -> inf`` limit of the discrete fields because every step
    is continuous and monotone. The ``k_schedule`` fields are then solved to
    verify node-wise monotone increase towards it; the guarded-region gap
    ``sup (v_inf - v_k)`` for each ``k`` and the terminal-layer cross-check
    are stored in ``diagnostics``.
    """
    if not spec.terminal.is_singular:
        raise ValueError("spec must carry a singular terminal condition")
    ks = tuple(float(k) for k in (DEFAULT_K_SCHEDULE if k_schedule is None else k_schedule))
    if len(ks) < 2 or any(b <= a for a, b in zip(ks, ks[1:])) or ks[0] < 0:
        raise ValueError("k_schedule must be strictly increasing, nonnegative, length >= 2")
    m, n = spec.model.m, spec.model.n_steps
    if not 0 <= guard_steps < n:
        raise ValueError("guard band must be shorter than the grid")

    v_inf, cont = _backward(spec, np.full(m, np.inf), "exact")

    def solve_k(k):
        return _backward(spec, np.full(m, k), "exact")[0]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            fields = list(pool.map(solve_k, ks))
    else:
        fields = [solve_k(k) for k in ks]

    interior = slice(0, n)
    violations = 0
    prev = None
    for vk in fields:
        violations += int(np.count_nonzero(vk[interior] > v_inf[interior]))
        if prev is not None:
            violations += int(np.count_nonzero(vk[interior] < prev[interior]))
        prev = vk
    if violations:
        raise MonotonicityError(f"k-schedule fields violate monotonicity at {violations} nodes")

    guarded = slice(0, n - guard_steps + 1)
    gaps = [float(np.max(v_inf[guarded] - vk[guarded])) for vk in fields]
    if any(b > a for a, b in zip(gaps, gaps[1:])):
        raise ConvergenceError("guarded-region gap to the limit field is not decreasing in k")

    layer = _layer_check(spec, v_inf)
    if not layer["ok"]:
        raise ConvergenceError("terminal layer falls outside its analytic sandwich", node=(n - 1, layer["worst_state"]))

    diagnostics = {
        "k_schedule": list(ks),
        "guarded_gap": gaps,
        "tol_k": tol_k,
        "converged_to_tol_k": gaps[-1] <= tol_k,
        "monotone_violations": violations,
        "guard_steps": guard_steps,
        "layer": layer,
    }
    return _field(spec, v_inf, cont, spec.terminal, "exact", diagnostics)


def _layer_check(spec: ProblemSpec, v_inf: np.ndarray) -> dict:
    """Check the last interior row against the extinction lower bound and the
    state-dependent singular upper bound."""
    n, dt = spec.model.n_steps, spec.time_grid.dt
    hf = bounds.compute_h(spec.model, spec.eta)
    tail = expected_A_tail_field(spec.model, spec.A)
    row = v_inf[n - 1]
    lower = bounds.lower_bound_extinction(hf.h[n - 1], hf.c_rT[n - 1], spec.beta, dt, gamma=spec.gamma)
    upper = bounds.upper_bound_eta(tail[n - 1], hf.h[n - 1], np.inf, hf.c_T, spec.beta, dt, gamma=spec.gamma)
    slack = np.minimum(row - lower, upper - row) / np.maximum(row, 1.0)
    return {
        "ok": bool(np.all(slack >= -1e-12)),
        "worst_state": int(np.argmin(slack)),
        "lower": lower.tolist(),
        "upper": upper.tolist(),
        "value": row.tolist(),
    }


def closed_form_total_mass(lam: float, gamma: float, beta: float, elapsed: float) -> float:
    """``-log E[exp(-lam <1, X_t>)]`` for unit initial mass after ``elapsed`` time."""
    if lam < 0 or gamma < 0 or elapsed < 0:
        raise ValueError("arguments must be nonnegative")
    if not 0 < beta <= 1:
        raise ValueError("beta must lie in (0, 1]")
    return lam / (1.0 + gamma * beta * elapsed * lam**beta) ** (1.0 / beta)


@dataclass(frozen=True)
class ResidualReport:
    max_abs: float
    residual: np.ndarray = field(repr=False)
    worst_node: tuple

    def __str__(self):
        return f"max |residual| = {self.max_abs:.3e} at node {self.worst_node}"


def check_integral_residual(field_: ValueField, spec: ProblemSpec) -> ResidualReport:
    """Plug ``field_`` into the integral equation and report the mismatch.

    The right-hand side ``E[A-tail + terminal] - E[int gamma v^{1+beta}/eta^beta ds]``
    is accumulated backward with trapezoidal quadrature, using only linear
    expectations of the supplied values.
    """
    if field_.is_singular:
        raise ValueError("the residual check needs a finite terminal condition")
    model, A = spec.model, spec.A
    n, h = model.n_steps, model.time_grid.dt
    v = np.asarray(field_.values, dtype=float)
    g = A.density - spec.sink() * v ** (1.0 + spec.beta)
    atoms = A.atom_table()
    rhs = np.empty_like(v)
    rhs[n] = spec.terminal.values(model.m) + atoms[n]
    for j in range(n - 1, -1, -1):
        rhs[j] = atoms[j] + 0.5 * h * g[j] + model.apply(j, 0.5 * h * g[j + 1] + rhs[j + 1])
    res = v - rhs
    worst = np.unravel_index(int(np.argmax(np.abs(res))), res.shape)
    return ResidualReport(float(np.max(np.abs(res))), res, tuple(int(i) for i in worst))
