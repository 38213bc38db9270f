"""Additive functionals, terminal conditions and the problem container.

An additive functional is stored as a nonnegative density ``a(t_j, z)``
(contributing ``a(Z_t) dt``) plus finitely many atoms ``(t_i, f_i)``
(contributing ``f_i(Z_{t_i})``). Densities are integrated with the
trapezoidal rule on the time grid; the same weights are used by the
value-field recursion and the cost evaluation, which keeps the discrete
cost identity exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .markov import MarkovModel, as_state_function

ETA_MIN = 1e-8
TERMINAL_KINDS = ("penalty_k", "penalty_rho", "singular")


@dataclass(frozen=True)
class AdditiveFunctional:
    """Density plus atoms on a given grid.

    ``density`` has shape ``(n_steps + 1, m)``; ``atoms`` maps a grid index to
    a state function. Use :meth:`build` to construct from times and
    broadcastable inputs.
    """

    density: np.ndarray = field(repr=False)
    atoms: tuple = ()

    def __post_init__(self):
        d = np.array(self.density, dtype=float)
        if d.ndim != 2:
            raise ValueError("density must be a (n_steps+1, m) array")
        if not np.all(np.isfinite(d)) or np.any(d < 0):
            raise ValueError("density must be finite and nonnegative")
        merged: dict[int, np.ndarray] = {}
        for j, f in self.atoms:
            f = np.array(f, dtype=float)
            if f.shape != (d.shape[1],):
                raise ValueError(f"atom at index {j} has wrong length")
            if not np.all(np.isfinite(f)) or np.any(f < 0):
                raise ValueError("atoms must be finite and nonnegative")
            if not 0 <= int(j) < d.shape[0]:
                raise ValueError(f"atom index {j} outside the grid")
            merged[int(j)] = merged.get(int(j), 0.0) + f
        d.setflags(write=False)
        object.__setattr__(self, "density", d)
        object.__setattr__(self, "atoms", tuple(sorted(merged.items())))

    @classmethod
    def zero(cls, model: MarkovModel) -> "AdditiveFunctional":
        return cls(np.zeros((model.n_steps + 1, model.m)))

    @classmethod
    def build(cls, model: MarkovModel, density=0.0, atoms=()) -> "AdditiveFunctional":
        """Create a functional on ``model``'s grids.

        ``density`` may be a scalar, a length-``m`` vector (constant in time)
        or a full ``(n_steps + 1, m)`` table. ``atoms`` is an iterable of
        ``(time, f)`` pairs with ``time`` a grid node.
        """
        n, m = model.n_steps, model.m
        d = np.asarray(density, dtype=float)
        if d.ndim == 0:
            d = np.full((n + 1, m), float(d))
        elif d.shape == (m,):
            d = np.tile(d, (n + 1, 1))
        elif d.shape != (n + 1, m):
            raise ValueError(f"density shape {d.shape} incompatible with grid ({n + 1}, {m})")
        resolved = [
            (model.time_grid.index_of(t), as_state_function(f, m, "atom")) for t, f in atoms
        ]
        return cls(d, tuple(resolved))

    @property
    def n_nodes(self) -> int:
        return self.density.shape[0]

    @property
    def m(self) -> int:
        return self.density.shape[1]

    def atom_at(self, j: int) -> np.ndarray:
        for i, f in self.atoms:
            if i == j:
                return f
        return np.zeros(self.m)

    def atom_table(self) -> np.ndarray:
        """Dense ``(n_steps + 1, m)`` array of atom values (zeros elsewhere)."""
        out = np.zeros_like(self.density)
        for j, f in self.atoms:
            out[j] += f
        return out

    @property
    def has_terminal_atom(self) -> bool:
        last = self.n_nodes - 1
        return any(j == last and np.any(f > 0) for j, f in self.atoms)

    @property
    def is_zero(self) -> bool:
        return not np.any(self.density) and not any(np.any(f) for _, f in self.atoms)

    def scaled(self, c: float) -> "AdditiveFunctional":
        return AdditiveFunctional(c * self.density, tuple((j, c * f) for j, f in self.atoms))

    def __add__(self, other: "AdditiveFunctional") -> "AdditiveFunctional":
        return AdditiveFunctional(self.density + other.density, self.atoms + other.atoms)

    def is_dominated_by(self, other: "AdditiveFunctional") -> bool:
        """Pathwise ``A[s, u] <= other[s, u]`` for node-local data."""
        return bool(
            np.all(self.density <= other.density) and np.all(self.atom_table() <= other.atom_table())
        )


def trapezoid_weights(n_steps: int, dt: float) -> np.ndarray:
    w = np.full(n_steps + 1, dt)
    w[0] = w[-1] = 0.5 * dt
    return w


@dataclass(frozen=True)
class TerminalCondition:
    kind: str
    k: Optional[float] = None
    rho: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in TERMINAL_KINDS:
            raise ValueError(f"terminal kind must be one of {TERMINAL_KINDS}, got {self.kind!r}")
        if self.kind == "penalty_k":
            if self.k is None or not np.isfinite(self.k) or self.k < 0:
                raise ValueError("penalty_k needs a finite k >= 0")
            object.__setattr__(self, "k", float(self.k))
        if self.kind == "penalty_rho":
            if self.rho is None:
                raise ValueError("penalty_rho needs rho")
            rho = np.array(self.rho, dtype=float)
            if rho.ndim != 1 or not np.all(np.isfinite(rho)) or np.any(rho < 0):
                raise ValueError("rho must be a finite nonnegative state function")
            rho.setflags(write=False)
            object.__setattr__(self, "rho", rho)

    @classmethod
    def penalty_k(cls, k: float) -> "TerminalCondition":
        return cls("penalty_k", k=k)

    @classmethod
    def penalty_rho(cls, rho) -> "TerminalCondition":
        return cls("penalty_rho", rho=rho)

    @classmethod
    def singular(cls) -> "TerminalCondition":
        return cls("singular")

    @property
    def is_singular(self) -> bool:
        return self.kind == "singular"

    def values(self, m: int) -> np.ndarray:
        """Terminal data as a state function (``+inf`` when singular)."""
        if self.kind == "penalty_k":
            return np.full(m, self.k)
        if self.kind == "penalty_rho":
            if self.rho.shape != (m,):
                raise ValueError(f"rho must have length {m}")
            return self.rho.copy()
        return np.full(m, np.inf)


@dataclass(frozen=True)
class ProblemSpec:
    """Everything needed to pose one execution problem.

    ``gamma`` is the branching constant of the log-Laplace equation; it
    defaults to ``1/beta``, the normalization under which the value field
    is the execution value function.
    """

    model: MarkovModel
    p: float
    eta: np.ndarray
    A: AdditiveFunctional
    terminal: TerminalCondition
    x0: float = 1.0
    z0: int = 0
    gamma: Optional[float] = None

    def __post_init__(self):
        if not self.p >= 2:
            raise ValueError(f"p must be >= 2, got {self.p}")
        m, n = self.model.m, self.model.n_steps
        eta = as_state_function(self.eta, m, "eta")
        if np.any(eta < ETA_MIN):
            raise ValueError(f"eta must be >= {ETA_MIN} everywhere")
        eta.setflags(write=False)
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "p", float(self.p))
        if self.A.density.shape != (n + 1, m):
            raise ValueError("additive functional does not live on the model's grid")
        if self.gamma is None:
            object.__setattr__(self, "gamma", 1.0 / self.beta)
        elif not self.gamma > 0:
            raise ValueError("gamma must be positive")
        object.__setattr__(self, "gamma", float(self.gamma))
        if not 0 <= int(self.z0) < m:
            raise ValueError(f"z0={self.z0} is not a state index")
        object.__setattr__(self, "z0", int(self.z0))
        if not np.isfinite(self.x0):
            raise ValueError("x0 must be finite")
        object.__setattr__(self, "x0", float(self.x0))
        if self.terminal.kind == "penalty_rho":
            self.terminal.values(m)
            if self.A.has_terminal_atom:
                raise ValueError("an atom at T is not allowed together with a rho penalty")

    @property
    def beta(self) -> float:
        return 1.0 / (self.p - 1.0)

    @property
    def q(self) -> float:
        return self.p / (self.p - 1.0)

    @property
    def time_grid(self):
        return self.model.time_grid

    @property
    def is_homogeneous(self) -> bool:
        return bool(np.all(self.eta == self.eta[0]))

    @property
    def is_control_normalized(self) -> bool:
        """True when ``gamma * beta == 1`` so the field prices the control problem."""
        return abs(self.gamma * self.beta - 1.0) <= 1e-12

    @property
    def c_rho(self) -> float:
        """Smallest ``c`` with ``rho <= c * eta`` (0 unless the terminal is a rho penalty)."""
        if self.terminal.kind != "penalty_rho":
            return 0.0
        return float(np.max(self.terminal.rho / self.eta))

    def sink(self) -> np.ndarray:
        """Per-state coefficient of ``v^{1+beta}`` in the log-Laplace equation."""
        return self.gamma / self.eta**self.beta

    def replace(self, **changes) -> "ProblemSpec":
        fields = dict(
            model=self.model, p=self.p, eta=self.eta, A=self.A, terminal=self.terminal,
            x0=self.x0, z0=self.z0, gamma=self.gamma,
        )
        fields.update(changes)
        return ProblemSpec(**fields)


def expected_A_tail_field(model: MarkovModel, A: AdditiveFunctional) -> np.ndarray:
    """Grid version of ``E_{t_j, z}[A[t_j, T]]`` for all nodes and states.

    Uses the same split convention as the value-field recursion: node
    ``t_j`` keeps half of its own density weight, the other half belongs to
    the interval ending at ``t_j``.
    """
    n, h = model.n_steps, model.time_grid.dt
    atoms = A.atom_table()
    out = np.empty((n + 1, model.m))
    out[n] = atoms[n]
    for j in range(n - 1, -1, -1):
        nxt = 0.5 * h * A.density[j + 1] + out[j + 1]
        out[j] = atoms[j] + 0.5 * h * A.density[j] + model.apply(j, nxt)
    return out


def expected_A_tail(spec: ProblemSpec, j: int, z: int) -> float:
    n = spec.model.n_steps
    if not 0 <= j <= n:
        raise IndexError(f"step index {j} out of range [0, {n}]")
    if not 0 <= z < spec.model.m:
        raise IndexError(f"state index {z} out of range")
    return float(expected_A_tail_field(spec.model, spec.A)[j, z])


def integrability_profile(spec: ProblemSpec) -> np.ndarray:
    """Surrogate integrand ``E_{0,z0}[eta(Z_t)^{1-q} E_{t,Z_t}[A[t,T]]^q]`` per node.

    The conditional tail replaces ``A[t,T]`` inside the ``q``-th power, so
    this is a lower surrogate for the integrand of the moment condition on
    ``A``. It is reported, not certified.
    """
    model = spec.model
    tail = expected_A_tail_field(model, spec.A)
    g = spec.eta ** (1.0 - spec.q) * tail**spec.q
    dist = np.zeros(model.m)
    dist[spec.z0] = 1.0
    out = np.empty(model.n_steps + 1)
    for j in range(model.n_steps + 1):
        out[j] = dist @ g[j]
        if j < model.n_steps:
            dist = dist @ model.step_matrix(j)
    return out
