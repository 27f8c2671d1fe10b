"""Differentiable relaxed-LP solver for batches of linear (and auxiliary-variable nonlinear) ODEs."""

__version__ = "0.1.0"

from .assembly import ConstraintSystem, Layout, assemble
from .backward import GradientBundle, backward, gradcheck
from .basis import Monomial, Ratio, Tanh, builtin_basis, parse_basis
from .kkt import QpConfig, Solution, SolverError, solve, solve_batch
from .nonlinear import nonlinear_residual
from .ode_spec import GridParam, InitCondition, NonlinearTerm, OdeSpec, SpecError
from .oracle import IvpProblem, analytic, rk4
from .trainer import DiscoveryModel, TrainConfig, discover, fit, threshold

__all__ = [
    "ConstraintSystem", "Layout", "assemble", "GradientBundle", "backward", "gradcheck", "Monomial", "Ratio",
    "Tanh", "builtin_basis", "parse_basis", "QpConfig", "Solution", "SolverError", "solve", "solve_batch",
    "nonlinear_residual", "GridParam", "InitCondition", "NonlinearTerm", "OdeSpec", "SpecError", "IvpProblem",
    "analytic", "rk4", "DiscoveryModel", "TrainConfig", "discover", "fit", "threshold", "__version__",
]
