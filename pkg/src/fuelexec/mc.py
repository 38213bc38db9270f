"""Seeded Monte Carlo: chain paths, strategy costs and Feller total mass.

Random numbers come from Philox keyed by ``(master_seed, chunk_index)``.
Paths are grouped into chunks of fixed size, each chunk is generated from
its own key, and results are concatenated in chunk order. The output
therefore depends only on ``(master_seed, n_paths, chunk_size)``, never on
the number of worker threads or on scheduling.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .functional import AdditiveFunctional, ProblemSpec
from .loglaplace import ValueField, fmt
from .markov import MarkovModel, TimeGrid
from .strategy import feedback_multipliers, path_costs, positions_from_multipliers, twap_positions

DEFAULT_CHUNK = 4096
MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class SeededRun:
    master_seed: int
    n_paths: int
    chunk_size: int = DEFAULT_CHUNK
    threads: int = 1

    def __post_init__(self):
        if self.n_paths < 1:
            raise ValueError("n_paths must be positive")
        if self.chunk_size < 1 or self.threads < 1:
            raise ValueError("chunk_size and threads must be positive")
        object.__setattr__(self, "master_seed", int(self.master_seed) & MASK64)

    def chunks(self) -> list[tuple[int, int, int]]:
        """``(chunk_index, start, stop)`` triples covering all paths."""
        out = []
        for c, start in enumerate(range(0, self.n_paths, self.chunk_size)):
            out.append((c, start, min(start + self.chunk_size, self.n_paths)))
        return out

    def generator(self, chunk_index: int) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=[self.master_seed, chunk_index]))

    def map_chunks(self, fn: Callable[[np.random.Generator, int], np.ndarray]) -> np.ndarray:
        """Run ``fn(rng, size)`` per chunk and stack results in chunk order."""
        jobs = self.chunks()

        def work(job):
            c, start, stop = job
            return fn(self.generator(c), stop - start)

        if self.threads > 1 and len(jobs) > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                parts = list(pool.map(work, jobs))
        else:
            parts = [work(j) for j in jobs]
        return np.concatenate(parts, axis=0)


@dataclass(frozen=True)
class McEstimate:
    mean: float
    stderr: float
    n: int

    @classmethod
    def from_samples(cls, x) -> "McEstimate":
        x = np.asarray(x, dtype=float)
        n = x.size
        if n < 2:
            raise ValueError("need at least two samples")
        if np.all(x == x.flat[0]):
            return cls(float(x.flat[0]), 0.0, int(n))
        return cls(float(np.mean(x)), float(np.std(x, ddof=1) / math.sqrt(n)), int(n))

    def z_score(self, oracle: float) -> float:
        diff = self.mean - oracle
        if self.stderr == 0:
            # zero variance: agreement up to roundoff counts as exact
            if abs(diff) <= 1e-12 * max(1.0, abs(oracle)):
                return 0.0
            return math.copysign(math.inf, diff)
        return diff / self.stderr

    def within(self, oracle: float, n_se: float = 3.0) -> bool:
        return abs(self.z_score(oracle)) <= n_se


def simulate_paths(model: MarkovModel, run: SeededRun, z0: int) -> np.ndarray:
    """``(n_paths, n_steps + 1)`` array of state indices started at ``z0``."""
    if not 0 <= z0 < model.m:
        raise ValueError(f"z0={z0} is not a state index")
    n = model.n_steps
    if model.is_homogeneous:
        cums = np.broadcast_to(np.cumsum(model.kernel, axis=1), (n, model.m, model.m))
    else:
        cums = np.cumsum(model.kernel, axis=2)

    def chunk(rng, size):
        u = rng.random((size, n))
        z = np.empty((size, n + 1), dtype=np.intp)
        z[:, 0] = z0
        for j in range(n):
            c = cums[j][z[:, j]]
            z[:, j + 1] = np.minimum((u[:, j, None] >= c).sum(axis=1), model.m - 1)
        return z

    return run.map_chunks(chunk)


def strategy_cost_samples(spec: ProblemSpec, paths, x) -> np.ndarray:
    impact, risk, terminal = path_costs(spec, paths, x)
    return impact + risk + terminal


def feedback_cost_samples(spec: ProblemSpec, field_: ValueField, paths, multiplier: float = 1.0) -> np.ndarray:
    y = feedback_multipliers(field_, spec, paths, multiplier)
    return strategy_cost_samples(spec, paths, positions_from_multipliers(spec.x0, y))


def estimate_strategy_cost(spec: ProblemSpec, field_: ValueField, run: SeededRun, paths=None) -> McEstimate:
    """Mean pathwise cost of the feedback strategy.

    Pass ``paths`` to reuse common random numbers across strategies.
    """
    if paths is None:
        paths = simulate_paths(spec.model, run, spec.z0)
    return McEstimate.from_samples(feedback_cost_samples(spec, field_, paths))


@dataclass(frozen=True)
class PairedComparison:
    name: str
    cost: McEstimate
    excess: McEstimate

    @property
    def excess_z(self) -> float:
        return self.excess.z_score(0.0)


def compare_strategies(
    spec: ProblemSpec,
    field_: ValueField,
    run: SeededRun,
    multipliers: Sequence[float] = (),
    include_twap: bool = True,
) -> tuple[McEstimate, list[PairedComparison]]:
    """Feedback cost and paired excess costs of alternatives on common paths."""
    paths = simulate_paths(spec.model, run, spec.z0)
    base = feedback_cost_samples(spec, field_, paths)
    rows = []
    if include_twap:
        x = np.broadcast_to(twap_positions(spec), paths.shape)
        c = strategy_cost_samples(spec, paths, x)
        rows.append(PairedComparison("twap", McEstimate.from_samples(c), McEstimate.from_samples(c - base)))
    for mult in multipliers:
        c = feedback_cost_samples(spec, field_, paths, mult)
        rows.append(
            PairedComparison(f"feedback_x{mult:g}", McEstimate.from_samples(c), McEstimate.from_samples(c - base))
        )
    return McEstimate.from_samples(base), rows


def simulate_feller_mass(
    gamma: float,
    m0: float,
    time_grid: TimeGrid,
    run: SeededRun,
    record: Optional[Sequence[float]] = None,
    integrand: Optional[np.ndarray] = None,
) -> dict:
    """Euler scheme for ``dM = sqrt(2 gamma M) dW`` with absorption at 0.

    Each step proposes ``M + sqrt(2 gamma M dt) N`` and clamps negative
    values to 0, which is absorbing. Returns a dict with ``"mass"`` of
    shape ``(n_paths, len(record))`` (``record`` defaults to ``[T]``) and,
    when ``integrand`` (node weights) is given, ``"integral"`` with
    ``sum_j integrand[j] M(t_j)`` per path.
    """
    if gamma < 0 or m0 < 0:
        raise ValueError("gamma and m0 must be nonnegative")
    dt, n = time_grid.dt, time_grid.n_steps
    if m0 > 0 and gamma * dt > 0.01 * m0:
        warnings.warn(f"time step too coarse for the mass scale: gamma*dt = {gamma * dt:.3g}", RuntimeWarning)
    rec_times = [time_grid.T] if record is None else list(record)
    rec_idx = [time_grid.index_of(t) for t in rec_times]
    w = None if integrand is None else np.asarray(integrand, dtype=float)
    if w is not None and w.shape != (n + 1,):
        raise ValueError("integrand must have one weight per node")
    scale = math.sqrt(2.0 * gamma * dt)

    def chunk(rng, size):
        M = np.full(size, float(m0))
        out = np.empty((size, len(rec_idx) + (w is not None)))
        acc = np.zeros(size) if w is None else w[0] * M
        slots = {j: i for i, j in enumerate(rec_idx)}
        if 0 in slots:
            out[:, slots[0]] = M
        for j in range(1, n + 1):
            noise = rng.standard_normal(size)
            M = np.maximum(M + scale * np.sqrt(M) * noise, 0.0)
            if w is not None:
                acc += w[j] * M
            if j in slots:
                out[:, slots[j]] = M
        if w is not None:
            out[:, -1] = acc
        return out

    data = run.map_chunks(chunk)
    result = {"times": rec_times, "mass": data[:, : len(rec_idx)]}
    if w is not None:
        result["integral"] = data[:, -1]
    return result


def estimate_extinction(gamma: float, m0: float, T: float, run: SeededRun, dt: float = 1e-3) -> McEstimate:
    tg = TimeGrid(0.0, T, max(2, int(round(T / dt))))
    mass = simulate_feller_mass(gamma, m0, tg, run)["mass"][:, 0]
    return McEstimate.from_samples(mass == 0.0)


def estimate_laplace(gamma: float, m0: float, T: float, lam: float, run: SeededRun, dt: float = 1e-3) -> McEstimate:
    tg = TimeGrid(0.0, T, max(2, int(round(T / dt))))
    mass = simulate_feller_mass(gamma, m0, tg, run)["mass"][:, 0]
    return McEstimate.from_samples(np.exp(-lam * mass))


def estimate_j_functional_laplace(gamma: float, m0: float, nu: AdditiveFunctional, time_grid: TimeGrid, run: SeededRun) -> McEstimate:
    """``E[exp(-int M_t nu(dt))]`` for a deterministic measure ``nu`` on the grid.

    ``nu`` lives on a one-state model over ``time_grid``; its density is
    integrated with the trapezoidal rule and atoms are taken at their nodes.
    """
    if nu.m != 1 or nu.n_nodes != time_grid.n_steps + 1:
        raise ValueError("nu must be a one-state functional on time_grid")
    dt = time_grid.dt
    w = nu.density[:, 0] * dt
    w[0] *= 0.5
    w[-1] *= 0.5
    w = w + nu.atom_table()[:, 0]
    if nu.is_zero:
        return McEstimate(1.0, 0.0, run.n_paths)
    integral = simulate_feller_mass(gamma, m0, time_grid, run, integrand=w)["integral"]
    return McEstimate.from_samples(np.exp(-integral))


def feller_laplace_oracle(gamma: float, m0: float, t: float, lam: float) -> float:
    return math.exp(-lam * m0 / (1.0 + gamma * t * lam))


def feller_extinction_oracle(gamma: float, m0: float, t: float) -> float:
    return math.exp(-m0 / (gamma * t)) if gamma * t > 0 else float(m0 == 0)


REPORT_COLUMNS = ["quantity", "mean", "stderr", "n", "oracle", "z_score"]


def report_row(quantity: str, est: McEstimate, oracle: Optional[float]) -> dict:
    return {
        "quantity": quantity,
        "mean": est.mean,
        "stderr": est.stderr,
        "n": est.n,
        "oracle": oracle,
        "z_score": None if oracle is None else est.z_score(oracle),
    }


def write_report(rows: list, csv_path=None, json_path=None) -> None:
    if csv_path is not None:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_COLUMNS)
            for r in rows:
                w.writerow(["" if r[c] is None else (r[c] if c in ("quantity", "n") else fmt(r[c])) for c in REPORT_COLUMNS])
    if json_path is not None:
        def clean(v):
            if isinstance(v, float) and not math.isfinite(v):
                return str(v)
            return v

        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump([{k: clean(v) for k, v in r.items()} for r in rows], fh, indent=2, sort_keys=True)
            fh.write("\n")
