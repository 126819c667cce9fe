"""Solve and check stationary nonlinear Kolmogorov equations.

The coefficients ``a(x, mu)``, ``b(x, mu)`` may depend on the unknown
probability measure and the diffusion may degenerate outside the first
``m`` coordinates.  Solutions are computed by freezing the measure,
solving the linear stationary problem and iterating to a fixed point.
"""

from .coeff import CallableField, ExprField, MollifierKernel, mollify, parse_coeff
from .fixedpoint import PicardConfig, build_truncated_operator, localized_solve, picard_solve
from .frozen import (FrozenProblem, SdeConfig, solve_1d_closed, solve_ergodic, solve_grid_fv,
                     weak_residual)
from .lyapunov import LyapunovSpec, apply_generator, check_integral, check_pointwise
from .measure import DiscreteMeasure, GridDensity, moment, wasserstein_1d

__version__ = "0.1.0"

__all__ = [
    "CallableField", "DiscreteMeasure", "ExprField", "FrozenProblem", "GridDensity",
    "LyapunovSpec", "MollifierKernel", "PicardConfig", "SdeConfig", "apply_generator",
    "build_truncated_operator", "check_integral", "check_pointwise", "localized_solve",
    "moment", "mollify", "parse_coeff", "picard_solve", "solve_1d_closed", "solve_ergodic",
    "solve_grid_fv", "wasserstein_1d", "weak_residual",
]
