"""Optimal liquidation under a fuel constraint via log-Laplace value fields."""

from .bounds import compute_h, nonlinear_semigroup, sandwich_bounds
from .errors import ConfigError, ConvergenceError, FuelexecError, MonotonicityError
from .functional import AdditiveFunctional, ProblemSpec, TerminalCondition, expected_A_tail
from .loglaplace import (
    ValueField, check_integral_residual, closed_form_total_mass, solve_backward, solve_singular,
)
from .markov import (
    MarkovModel, StateGrid, TimeGrid, build_one_state, build_random_walk, build_two_state, semigroup_expect,
)
from .mc import McEstimate, SeededRun, simulate_feller_mass, simulate_paths
from .strategy import Trajectory, cost, feedback_strategy, phi_p, twap_strategy, verification_gap

__version__ = "0.1.0"
