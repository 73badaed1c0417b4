"""Phantom gradients for fixed-point (implicit) layers.

Fixed-point modules, forward solvers, exact and approximate backward
oracles, dense diagnostics, an SGD loop and reproducible experiment runners.
"""

from .config import __version__
from .eqmodule import EqModule, forward, from_matrix, new_synthetic
from .fpsolvers import FixedPointSolution, SolverSpec, solve
from .gradoracles import GradOracleSpec, PhantomGradient, gradient, ift_exact, npg, one_step, upg

__all__ = [
    "__version__", "EqModule", "forward", "from_matrix", "new_synthetic", "FixedPointSolution",
    "SolverSpec", "solve", "GradOracleSpec", "PhantomGradient", "gradient", "ift_exact", "npg",
    "one_step", "upg",
]
