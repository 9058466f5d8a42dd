"""Maximum-principle toolkit for path-dependent stochastic evolution equations.

Forward solver for delayed state equations, anticipated backward solver for
the adjoint, Hamiltonian gradients and a linear-quadratic oracle layer.
"""
from .backward import ABSEEProblem, RunningTerminal, solve_absee, solve_bsde
from .config import ConfigError, ExperimentConfig, parse_config
from .forward import LinearDelayCoefficients, SineDelayCoefficients, solve_forward
from .kernels import BACKEND
from .lq import LQSpec, lq_bruteforce_deterministic, lq_closed_form_control, lq_to_problem
from .measures import FiniteMeasure
from .path_calculus import KernelRepresentation, apply_rho, apply_rho_star, apply_rho_star_formula
from .regression import Conditioner, RegressionBasis
from .smp import (
    ControlConstraint,
    ControlProblem,
    QuadraticCost,
    SolverOptions,
    fd_gradient_check,
    projected_gradient_descent,
    smp_gradient,
)
from .spaces import OperatorPair, QWienerConfig, build_grid, sample_noise

__version__ = "0.1.0"

__all__ = [
    "ABSEEProblem", "BACKEND", "ConfigError", "Conditioner", "ControlConstraint", "ControlProblem",
    "ExperimentConfig", "FiniteMeasure", "KernelRepresentation", "LQSpec", "LinearDelayCoefficients",
    "OperatorPair", "QWienerConfig", "QuadraticCost", "RegressionBasis", "RunningTerminal",
    "SineDelayCoefficients", "SolverOptions", "apply_rho", "apply_rho_star", "apply_rho_star_formula",
    "build_grid", "fd_gradient_check", "lq_bruteforce_deterministic", "lq_closed_form_control",
    "lq_to_problem", "parse_config", "projected_gradient_descent", "sample_noise", "smp_gradient",
    "solve_absee", "solve_bsde", "solve_forward",
]
