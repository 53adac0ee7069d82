"""Crank-Nicolson and theta-scheme solvers for decoupled FBSDEs, plus a
convergence-study harness built on analytic test problems."""

from fbsde.cn_solver import SchemeParams, SolutionLayers, TimeGrid, solve
from fbsde.errors import (
    ConfigurationError,
    DomainEscapeError,
    FbsdeError,
    MissingDerivativeError,
    PicardError,
    QuadratureBudgetError,
    RateUndefinedError,
    UnsupportedIndexError,
)
from fbsde.grid_interp import GridFunction, SpaceGrid, build_grid, interpolate
from fbsde.model import (
    PROBLEMS,
    AnalyticSolution,
    FbsdeProblem,
    exact_yz,
    feynman_kac_residual,
    make_atan_problem,
    make_sin_problem,
)
from fbsde.quadrature import HermiteRule, cond_expect, cond_expect_weighted, gauss_hermite

__all__ = [
    "PROBLEMS",
    "AnalyticSolution",
    "ConfigurationError",
    "DomainEscapeError",
    "FbsdeError",
    "FbsdeProblem",
    "GridFunction",
    "HermiteRule",
    "MissingDerivativeError",
    "PicardError",
    "QuadratureBudgetError",
    "RateUndefinedError",
    "SchemeParams",
    "SolutionLayers",
    "SpaceGrid",
    "TimeGrid",
    "UnsupportedIndexError",
    "build_grid",
    "cond_expect",
    "cond_expect_weighted",
    "exact_yz",
    "feynman_kac_residual",
    "gauss_hermite",
    "interpolate",
    "make_atan_problem",
    "make_sin_problem",
    "solve",
]
