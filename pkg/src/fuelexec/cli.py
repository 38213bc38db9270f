"""Command-line front end.

    fuelexec solve    --config problem.ini [--out DIR]
    fuelexec strategy --config problem.ini
    fuelexec mc       --config problem.ini [--seed N] [--threads N]
    fuelexec bounds   --config problem.ini
    fuelexec verify   --config problem.ini

Exit codes: 0 success, 2 configuration error, 3 convergence failure,
4 verification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import checks
from .config import Config, load_config
from .errors import ConfigError, ConvergenceError, MonotonicityError
from .functional import AdditiveFunctional, ProblemSpec, TerminalCondition
from .loglaplace import GUARD_STEPS, ValueField, check_integral_residual, solve_backward
from .markov import TimeGrid, build_one_state
from .mc import (
    SeededRun, compare_strategies, estimate_j_functional_laplace, feller_extinction_oracle, feller_laplace_oracle,
    McEstimate, report_row, simulate_feller_mass, simulate_paths, write_report,
)
from .strategy import feedback_strategy, twap_strategy, write_comparison_csv

EXIT_OK, EXIT_CONFIG, EXIT_CONVERGENCE, EXIT_VERIFY = 0, 2, 3, 4
DEFAULT_SEED = 20240101
DEFAULT_MULTIPLIERS = (0.5, 0.8, 1.25, 2.0)


class Context:
    def __init__(self, cfg: Config, out: Path, seed: int, threads: int):
        self.cfg = cfg
        self.out = out
        self.seed = seed
        self.threads = threads
        self.spec: ProblemSpec = cfg.validate()
        self._field = None

    @property
    def field(self) -> ValueField:
        if self._field is None:
            self._field = checks.solve(
                self.spec,
                k_schedule=self.cfg.get("terminal", "k_schedule"),
                guard_steps=self.guard_steps,
                scheme=self.cfg.get("terminal", "scheme", "exact"),
                threads=self.threads,
            )
        return self._field

    @property
    def guard_steps(self) -> int:
        return self.cfg.get("terminal", "guard_steps", GUARD_STEPS)

    @property
    def n_paths(self) -> int:
        return self.cfg.get("run", "n_paths", 0)

    def path(self, name: str) -> Path:
        return self.out / name


def _dump_json(path: Path, obj) -> None:
    def clean(v):
        if isinstance(v, float) and not math.isfinite(v):
            return str(v)
        if isinstance(v, dict):
            return {k: clean(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [clean(x) for x in v]
        if isinstance(v, np.generic):
            return clean(v.item())
        return v

    with open(path, "w", encoding="utf-8") as fh:
        json.dump(clean(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_solve(ctx: Context) -> int:
    spec, f = ctx.spec, ctx.field
    f.to_csv(ctx.path("value_field.csv"))
    residual = None if f.is_singular else check_integral_residual(f, spec).max_abs
    tg = spec.time_grid
    summary = {
        "v0": f.v0(spec.z0),
        "z0": spec.z0,
        "terminal_kind": spec.terminal.kind,
        "grid": {"t0": tg.t0, "T": tg.T, "n_steps": tg.n_steps, "dt": tg.dt, "n_states": spec.model.m},
        "p": spec.p,
        "beta": spec.beta,
        "gamma": spec.gamma,
        "residual": residual,
        "scheme": f.scheme,
    }
    if f.is_singular:
        d = f.diagnostics
        summary["k_schedule"] = {
            "k_max": d["k_schedule"][-1],
            "guarded_gap_at_k_max": d["guarded_gap"][-1],
            "monotone_violations": d["monotone_violations"],
            "guard_steps": d["guard_steps"],
        }
    _dump_json(ctx.path("summary.json"), summary)
    print(f"v(0, z0) = {summary['v0']:.10g}")
    return EXIT_OK


def cmd_strategy(ctx: Context) -> int:
    spec, f = ctx.spec, ctx.field
    path = simulate_paths(spec.model, SeededRun(ctx.seed, 2, chunk_size=2), spec.z0)[0]
    traj = feedback_strategy(f, spec, path)
    traj.to_csv(ctx.path("trajectory.csv"))
    twap_strategy(spec, path).to_csv(ctx.path("trajectory_twap.csv"))
    if ctx.n_paths >= 2:
        run = SeededRun(ctx.seed, ctx.n_paths, threads=ctx.threads, chunk_size=ctx.cfg.get("run", "chunk_size", 4096))
        mults = ctx.cfg.get("run", "multipliers", DEFAULT_MULTIPLIERS)
        base, rows = compare_strategies(spec, f, run, multipliers=mults)
        write_comparison_csv(ctx.path("strategy_comparison.csv"), [("feedback", base)] + [(r.name, r.cost) for r in rows])
    print(f"feedback cost on sampled path = {traj.cost.total:.10g}")
    return EXIT_OK


def _feller_rows(ctx: Context) -> list:
    cfg, spec = ctx.cfg, ctx.spec
    if not cfg.get("run", "feller", False):
        return []
    if spec.beta != 1.0:
        raise ConfigError("Feller mass checks need p = 2")
    m0 = cfg.get("run", "feller_m0", 1.0)
    dt = cfg.get("run", "feller_dt", spec.time_grid.dt / 10.0)
    T = spec.time_grid.T - spec.time_grid.t0
    tg = TimeGrid(0.0, T, max(2, int(round(T / dt))))
    run = SeededRun(ctx.seed + 1, cfg.get("run", "feller_paths", max(ctx.n_paths, 2)), threads=ctx.threads)
    mass = simulate_feller_mass(spec.gamma, m0, tg, run)["mass"][:, 0]
    rows = [
        report_row("feller_mean", McEstimate.from_samples(mass), m0),
        report_row("extinction", McEstimate.from_samples(mass == 0.0), feller_extinction_oracle(spec.gamma, m0, T)),
    ]
    for lam in cfg.get("run", "feller_lambdas", (1.0,)):
        est = McEstimate.from_samples(np.exp(-lam * mass))
        rows.append(report_row(f"laplace_lambda_{lam:g}", est, feller_laplace_oracle(spec.gamma, m0, T, lam)))
    if spec.model.m == 1 and not spec.A.is_zero:
        # Laplace transform of the mass integrated against the problem's own A
        model1 = build_one_state(tg)
        density = np.interp(tg.nodes, spec.time_grid.nodes - spec.time_grid.t0, spec.A.density[:, 0])
        nu = AdditiveFunctional.build(model1, density=density[:, None])
        est = estimate_j_functional_laplace(spec.gamma, m0, nu, tg, run)
        oracle_spec = ProblemSpec(model1, 2.0, 1.0, nu, TerminalCondition.penalty_k(0.0), gamma=spec.gamma)
        rows.append(report_row("j_functional_laplace", est, math.exp(-m0 * solve_backward(oracle_spec).v0(0))))
    return rows


def cmd_mc(ctx: Context) -> int:
    spec, f = ctx.spec, ctx.field
    rows = []
    n_paths = max(ctx.n_paths, 2)
    if spec.is_control_normalized:
        run = SeededRun(ctx.seed, n_paths, threads=ctx.threads, chunk_size=ctx.cfg.get("run", "chunk_size", 4096))
        base, comps = compare_strategies(spec, f, run, multipliers=ctx.cfg.get("run", "multipliers", DEFAULT_MULTIPLIERS))
        rows.append(report_row("feedback_cost", base, abs(spec.x0) ** spec.p * f.v0(spec.z0)))
        for c in comps:
            rows.append(report_row(f"cost_{c.name}", c.cost, None))
            rows.append(report_row(f"excess_{c.name}", c.excess, None))
    rows += _feller_rows(ctx)
    write_report(rows, ctx.path("mc_report.csv"), ctx.path("mc_report.json"))
    for r in rows:
        print(f"{r['quantity']}: {r['mean']:.6g} +- {r['stderr']:.2g}")
    return EXIT_OK


def cmd_bounds(ctx: Context) -> int:
    rep = checks.bound_report(ctx.spec, ctx.field)
    checks.write_bound_csv(ctx.path("bounds.csv"), ctx.spec, rep)
    results = checks.check_bounds(ctx.spec, ctx.field, ctx.guard_steps) + checks.check_sandwich(ctx.spec, ctx.field)
    for r in results:
        print(f"{r.name}: {'ok' if r.passed else 'FAILED'} ({r.value:.3g})")
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


def cmd_verify(ctx: Context) -> int:
    results, mc_rows = checks.run_suite(ctx.spec, ctx.field, ctx.seed, ctx.n_paths, ctx.threads, ctx.guard_steps)
    checks.write_checks_csv(ctx.path("verify.csv"), results)
    if mc_rows:
        write_comparison_csv(ctx.path("strategy_comparison.csv"), mc_rows)
    failed = [r.name for r in results if not r.passed]
    _dump_json(ctx.path("verify.json"), {"n_checks": len(results), "failed": failed, "passed": not failed})
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}")
    return EXIT_OK if not failed else EXIT_VERIFY


COMMANDS = {
    "solve": cmd_solve,
    "strategy": cmd_strategy,
    "mc": cmd_mc,
    "bounds": cmd_bounds,
    "verify": cmd_verify,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fuelexec", description="Fuel-constrained execution solver")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="problem configuration file")
    parser.add_argument("--out", help="output directory (overrides run.output_dir)")
    parser.add_argument("--seed", type=int, help="master seed (overrides run.seed)")
    parser.add_argument("--threads", type=int, help="worker threads for MC and k-schedule solves")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        out = Path(args.out or cfg.get("run", "output_dir", "out"))
        seed = args.seed if args.seed is not None else cfg.get("run", "seed", DEFAULT_SEED)
        threads = args.threads if args.threads is not None else cfg.get("run", "threads", 1)
        if threads < 1:
            raise ConfigError("--threads must be positive")
        ctx = Context(cfg, out, seed, threads)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](ctx)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConvergenceError, MonotonicityError) as exc:
        print(f"convergence failure: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE


if __name__ == "__main__":
    sys.exit(main())
