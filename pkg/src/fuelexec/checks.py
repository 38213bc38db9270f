"""Invariant suite and bound reports for a configured problem."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import bounds
from .functional import AdditiveFunctional, ProblemSpec, TerminalCondition, expected_A_tail_field
from .loglaplace import (
    GUARD_STEPS, ValueField, check_integral_residual, closed_form_total_mass, fmt, solve_backward, solve_singular,
)
from .markov import TimeGrid, build_one_state
from .mc import SeededRun, compare_strategies, simulate_paths
from .strategy import (
    feedback_strategy, linear_bound_check, positions_from_multipliers, step_gaps, trajectory_from_positions,
    twap_strategy, verification_gap,
)

SLACK_TOL = 1e-9
GAP_TOL = 1e-8


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    value: float
    tolerance: float
    detail: str = ""


def solve(spec: ProblemSpec, k_schedule=None, guard_steps: int = GUARD_STEPS, scheme: str = "exact", threads: int = 1) -> ValueField:
    if spec.terminal.is_singular:
        return solve_singular(spec, k_schedule=k_schedule, guard_steps=guard_steps, threads=threads)
    return solve_backward(spec, scheme=scheme)


def _solve_plain(spec: ProblemSpec) -> np.ndarray:
    # the singular solve's k-schedule checks are not needed for comparisons
    if spec.terminal.is_singular:
        return solve_singular(spec, k_schedule=(0.0, 1.0), guard_steps=0).values
    return solve_backward(spec).values


def _rel_relu(a, b):
    """Largest relative excess of ``a`` over ``b`` on finite entries."""
    ok = np.isfinite(a) & np.isfinite(b)
    if not ok.any():
        return 0.0
    return float(np.max((a[ok] - b[ok]) / np.maximum(1.0, np.abs(b[ok]))))


def effective_k(spec: ProblemSpec) -> float:
    """Smallest ``k`` with terminal data ``<= k * eta``."""
    if spec.terminal.is_singular:
        return np.inf
    return float(np.max(spec.terminal.values(spec.model.m) / spec.eta))


def bound_report(spec: ProblemSpec, field_: ValueField) -> dict:
    """Node-wise lower and upper estimates for ``field_``.

    Upper: the state-dependent blow-up bound with ``h``, ``c_T`` and the
    terminal data dominated by ``k * eta``. Lower: for the singular field,
    the extinction bound with ``c_{r,T}``; for finite terminal data, the
    lower sandwich term with the largest sink weight.
    """
    model, beta, gamma = spec.model, spec.beta, spec.gamma
    n = model.n_steps
    rem = spec.time_grid.remaining
    tail = expected_A_tail_field(model, spec.A)
    hf = bounds.compute_h(model, spec.eta)
    rows = slice(0, n) if spec.terminal.is_singular else slice(0, n + 1)
    r = rem[rows, None]
    k = effective_k(spec)
    upper = bounds.upper_bound_eta(tail[rows], hf.h[rows], k, hf.c_T, beta, r, gamma=gamma)
    if spec.terminal.is_singular:
        lower = bounds.lower_bound_extinction(hf.h[rows], hf.c_rT[rows, None], beta, r, gamma=gamma)
    else:
        f = spec.terminal.values(model.m) + spec.A.atom_at(n)
        g_hi = gamma * float(np.max(spec.eta ** (-beta)))
        lower = bounds.sandwich_bounds(model, f, g_hi, beta)[0][rows]
    v = field_.values[rows]
    return {
        "t": spec.time_grid.nodes[rows],
        "v": v,
        "lower": lower,
        "upper": upper,
        "slack_lower": v - lower,
        "slack_upper": upper - v,
    }


def write_bound_csv(path, spec: ProblemSpec, report: dict) -> None:
    labels = spec.model.state_grid.states
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "state", "v", "lower", "upper", "slack_lower", "slack_upper"])
        for j, t in enumerate(report["t"]):
            for i, lab in enumerate(labels):
                w.writerow([fmt(t), lab] + [fmt(report[c][j, i]) for c in ("v", "lower", "upper", "slack_lower", "slack_upper")])


def _guarded(spec: ProblemSpec, guard_steps: int) -> slice:
    n = spec.model.n_steps
    return slice(0, n - guard_steps + 1) if spec.terminal.is_singular else slice(0, n + 1)


def check_bounds(spec, field_, guard_steps=GUARD_STEPS) -> list[CheckResult]:
    rep = bound_report(spec, field_)
    g = _guarded(spec, guard_steps)
    scale = np.maximum(1.0, np.abs(rep["v"][g]))
    lo = float(np.min(rep["slack_lower"][g] / scale))
    up = float(np.min(rep["slack_upper"][g] / scale))
    return [
        CheckResult("lower_bound", lo >= -SLACK_TOL, lo, -SLACK_TOL, "min relative slack"),
        CheckResult("upper_bound", up >= -SLACK_TOL, up, -SLACK_TOL, "min relative slack"),
    ]


def check_sandwich(spec, field_) -> list[CheckResult]:
    """Sandwich for the problem reduced to its terminal data.

    With sink weights between ``g_lo`` and ``g_hi`` the field of a terminal
    function ``f`` lies between ``E[V^{g_hi}_{T-r} f(Z_T)]`` and
    ``V^{g_lo}_{T-r} E[f(Z_T)]``; for constant ``eta`` both weights agree.
    """
    if spec.terminal.is_singular:
        return []
    model, n, beta = spec.model, spec.model.n_steps, spec.beta
    f = spec.terminal.values(model.m) + spec.A.atom_at(n)
    reduced = spec.replace(A=AdditiveFunctional.zero(model), terminal=TerminalCondition.penalty_rho(f))
    v = solve_backward(reduced).values
    w = spec.eta ** (-beta)
    lower = bounds.sandwich_bounds(model, f, spec.gamma * float(w.max()), beta)[0]
    upper = bounds.sandwich_bounds(model, f, spec.gamma * float(w.min()), beta)[1]
    lo = _rel_relu(lower, v)
    up = _rel_relu(v, upper)
    return [
        CheckResult("sandwich_lower", lo <= SLACK_TOL, lo, SLACK_TOL, "max relative violation"),
        CheckResult("sandwich_upper", up <= SLACK_TOL, up, SLACK_TOL, "max relative violation"),
    ]


def check_comparison(spec, field_, rng) -> list[CheckResult]:
    model = spec.model
    v = field_.values
    bump = AdditiveFunctional.build(
        model, density=rng.uniform(0.0, 1.0, (model.n_steps + 1, model.m)),
        atoms=[(spec.time_grid.nodes[model.n_steps // 2], rng.uniform(0.0, 1.0, model.m))],
    )
    bigger_A = _solve_plain(spec.replace(A=spec.A + bump))
    lighter_sink = _solve_plain(spec.replace(eta=spec.eta * 1.5))
    out = []
    for name, w in (("comparison_A", bigger_A), ("comparison_sink", lighter_sink)):
        viol = int(np.count_nonzero(v > w))
        out.append(CheckResult(name, viol == 0, float(viol), 0.0, "nodes with v > v_tilde"))
    return out


def check_terminal_monotonicity(spec, field_) -> list[CheckResult]:
    v = field_.values
    n = spec.model.n_steps
    if spec.terminal.is_singular:
        viol = field_.diagnostics.get("monotone_violations", 0)
        return [CheckResult("k_schedule_monotone", viol == 0, float(viol), 0.0, "monotonicity violations")]
    t = spec.terminal
    halved = TerminalCondition.penalty_k(0.5 * t.k) if t.kind == "penalty_k" else TerminalCondition.penalty_rho(0.5 * t.rho)
    half = _solve_plain(spec.replace(terminal=halved))
    limit = _solve_plain(spec.replace(terminal=TerminalCondition.singular()))
    a = int(np.count_nonzero(half > v))
    b = int(np.count_nonzero(v[:n] > limit[:n]))
    return [
        CheckResult("terminal_monotone", a == 0, float(a), 0.0, "nodes with v(terminal/2) > v"),
        CheckResult("below_singular", b == 0, float(b), 0.0, "nodes with v > v_inf"),
    ]


def check_residual(spec, field_) -> list[CheckResult]:
    if field_.is_singular:
        layer = field_.diagnostics.get("layer", {})
        return [CheckResult("terminal_layer", bool(layer.get("ok", False)), 0.0, 0.0, "last row inside analytic sandwich")]
    rep = check_integral_residual(field_, spec)
    vmax = float(np.max(field_.values))
    tol = spec.time_grid.dt * spec.time_grid.T * (1.0 + vmax) ** (1.0 + 2.0 * spec.beta)
    return [CheckResult("integral_residual", rep.max_abs <= tol, rep.max_abs, tol, "O(dt) consistency")]


def alpha_problem(spec: ProblemSpec, z: int) -> ProblemSpec:
    """One-state problem driven by the deterministic measure ``E_{0,z}[A(ds)]``.

    Finite terminal data are folded into an atom at ``T`` so that they are
    averaged together with ``A``.
    """
    if spec.terminal.is_singular:
        base, terminal = spec, TerminalCondition.singular()
    else:
        n = spec.model.n_steps
        atom = spec.terminal.values(spec.model.m) + spec.A.atom_at(n)
        A = AdditiveFunctional(spec.A.density, tuple((j, f) for j, f in spec.A.atoms if j != n) + ((n, atom),))
        base = spec.replace(A=A, terminal=TerminalCondition.penalty_k(0.0))
        terminal = TerminalCondition.penalty_k(0.0)
    alpha = bounds.alpha_measure(base, 0, z)
    model1, A1 = alpha.as_functional()
    return ProblemSpec(model1, spec.p, float(spec.eta[0]), A1, terminal, x0=spec.x0, gamma=spec.gamma)


def check_jensen(spec, field_) -> list[CheckResult]:
    if not spec.is_homogeneous:
        return []
    va = field_.values[0, spec.z0]
    valpha = _solve_plain(alpha_problem(spec, spec.z0))[0, 0]
    excess = (va - valpha) / max(1.0, abs(valpha))
    return [CheckResult("jensen_alpha", excess <= 1e-12, float(excess), 1e-12, "relative v_A - v_alpha at (0, z0)")]


def check_strategies(spec, field_, seed: int) -> list[CheckResult]:
    if not spec.is_control_normalized:
        return []
    model, n = spec.model, spec.model.n_steps
    path = simulate_paths(model, SeededRun(seed, 2, chunk_size=2), spec.z0)[0]
    fb = feedback_strategy(field_, spec, path)
    out = [CheckResult("gap_feedback", verification_gap(fb, field_, spec) <= GAP_TOL, verification_gap(fb, field_, spec), GAP_TOL, "optimality gap of feedback")]
    rng = np.random.default_rng(seed)
    alts = [twap_strategy(spec, path)]
    for _ in range(5):
        y = rng.uniform(0.9, 1.0, n) ** rng.uniform(0.1, 3.0)
        if spec.terminal.is_singular:
            y[-1] = 0.0
        alts.append(trajectory_from_positions(spec, path, positions_from_multipliers(spec.x0, y)[0]))
    worst = min(float(np.min(step_gaps(field_, spec, path[None], t.x[None]))) for t in alts)
    out.append(CheckResult("gap_nonnegative", worst >= -GAP_TOL * max(1.0, abs(spec.x0)) ** spec.p, worst, -GAP_TOL, "smallest per-step gap"))
    if model.m == 1:
        base = abs(spec.x0) ** spec.p * field_.v0(0)
        err = max(abs(t.cost.total - base - verification_gap(t, field_, spec)) / max(1.0, t.cost.total) for t in alts + [fb])
        out.append(CheckResult("gap_identity", err <= 1e-6, err, 1e-6, "relative |cost - x0^p v0 - gap|"))
    if fb.is_monotone():
        out.append(CheckResult("feedback_monotone", True, 0.0, 0.0))
    else:
        out.append(CheckResult("feedback_monotone", False, 1.0, 0.0))
    if spec.terminal.is_singular:
        out.append(CheckResult("fuel_constraint", fb.x[-1] == 0.0, float(abs(fb.x[-1])), 0.0, "|x(T)|"))
        if spec.is_homogeneous:
            ok = linear_bound_check(fb, spec.x0, spec.time_grid.T)
            out.append(CheckResult("linear_bound", ok, 0.0, 1e-9))
    return out


def check_mc(spec, field_, seed: int, n_paths: int, threads: int, multipliers=(0.8, 1.25)) -> tuple[list[CheckResult], list]:
    if not spec.is_control_normalized or n_paths < 2:
        return [], []
    run = SeededRun(seed, n_paths, threads=threads)
    base, rows = compare_strategies(spec, field_, run, multipliers=multipliers)
    oracle = abs(spec.x0) ** spec.p * field_.v0(spec.z0)
    if base.stderr == 0.0:
        # deterministic model: the sample mean must reproduce the oracle
        err = abs(base.mean - oracle) / max(1.0, abs(oracle))
        out = [CheckResult("mc_feedback_cost", err <= 1e-9, err, 1e-9, "relative error, zero variance")]
    else:
        z = base.z_score(oracle)
        out = [CheckResult("mc_feedback_cost", abs(z) <= 3.0, z, 3.0, "z-score against x0^p v(0, z0)")]
    for r in rows:
        out.append(CheckResult(f"mc_excess_{r.name}", r.excess_z >= -3.0, r.excess_z, -3.0, "paired excess z-score"))
    return out, [("feedback", base)] + [(r.name, r.cost) for r in rows]


def closed_form_battery() -> list[CheckResult]:
    """Problem-independent oracles on the one-state model."""
    out = []
    tg = TimeGrid(0.0, 2.0, 400)
    model = build_one_state(tg)
    zero = AdditiveFunctional.zero(model)
    worst = 0.0
    for beta in (1.0, 0.5):
        for k in (0.5, 2.0, 10.0):
            spec = ProblemSpec(model, 1.0 + 1.0 / beta, 1.0, zero, TerminalCondition.penalty_k(k))
            v = solve_backward(spec).values[:, 0]
            exact = np.array([closed_form_total_mass(k, spec.gamma, beta, r) for r in tg.remaining])
            worst = max(worst, float(np.max(np.abs(v / exact - 1.0))))
    out.append(CheckResult("oracle_total_mass", worst <= 1e-4, worst, 1e-4, "relative error"))
    spec = ProblemSpec(model, 3.0, 1.0, zero, TerminalCondition.singular())
    v = solve_singular(spec).values[: tg.n_steps - GUARD_STEPS + 1, 0]
    exact = tg.remaining[: tg.n_steps - GUARD_STEPS + 1] ** (-2.0)
    err = float(np.max(np.abs(v / exact - 1.0)))
    out.append(CheckResult("oracle_singular", err <= 1e-3, err, 1e-3, "relative error on guarded region"))
    A = AdditiveFunctional.build(model, density=1.0)
    v = solve_backward(ProblemSpec(model, 2.0, 1.0, A, TerminalCondition.penalty_k(0.0))).values[:, 0]
    err = float(np.max(np.abs(v - np.tanh(tg.remaining))))
    out.append(CheckResult("oracle_tanh", err <= 1e-4, err, 1e-4, "absolute error, dt = 0.005"))
    return out


def run_suite(spec: ProblemSpec, field_: ValueField, seed: int, n_paths: int = 0, threads: int = 1, guard_steps: int = GUARD_STEPS):
    """All invariant checks for one configured problem.

    Returns the list of results and the strategy-cost rows of the MC part.
    """
    rng = np.random.default_rng(seed)
    results = []
    results += check_residual(spec, field_)
    results += check_bounds(spec, field_, guard_steps)
    results += check_sandwich(spec, field_)
    results += check_comparison(spec, field_, rng)
    results += check_terminal_monotonicity(spec, field_)
    results += check_jensen(spec, field_)
    results += check_strategies(spec, field_, seed)
    mc_results, mc_rows = check_mc(spec, field_, seed, n_paths, threads)
    results += mc_results
    results += closed_form_battery()
    return results, mc_rows


def write_checks_csv(path, results) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["check", "passed", "value", "tolerance", "detail"])
        for r in results:
            w.writerow([r.name, "true" if r.passed else "false", fmt(r.value), fmt(r.tolerance), r.detail])
