"""Regime-switching linear-quadratic Stackelberg games: Riccati solvers,
equilibrium construction and Monte Carlo verification."""

from .equilibrium import EquilibriumPolicy, solve_equilibrium, value_functions
from .errors import (BlowUpError, DecouplingError, DimensionError, GeneratorError,
                     ProblemFormatError, RegularityError, SolverError, StackelbergError,
                     UnsupportedError)
from .model import ProblemData, dump_problem, load_problem, probe_convexity, read_problem
from .riccati import (lambda_limit_study, solvability_certificate, solve_follower_cdre,
                      solve_leader_cdre)

__all__ = [
    "BlowUpError", "DecouplingError", "DimensionError", "EquilibriumPolicy", "GeneratorError",
    "ProblemData", "ProblemFormatError", "RegularityError", "SolverError", "StackelbergError",
    "UnsupportedError", "dump_problem", "example_path", "lambda_limit_study", "load_problem",
    "probe_convexity", "read_problem", "solvability_certificate", "solve_equilibrium",
    "solve_follower_cdre", "solve_leader_cdre", "value_functions",
]


def example_path(name: str):
    """Path of a bundled example problem, e.g. ``example_path("example1")``."""
    from importlib.resources import files

    return files(__name__) / "data" / f"{name}.prob"
