"""Exact Gaussian process regression on cut-based incomplete grids.

Kernel matrix-vector products over incomplete grids are exact and cost
``O(n alpha^2 N)``; hyperparameters are fitted with preconditioned CG,
stochastic Lanczos quadrature and Adam.
"""

from .estimator import CutsGPRegressor
from .fastmvp import kernel_column, kernel_columns, kernel_diagonal, mvp_C, mvp_K, mvp_L, mvp_M, mvp_U
from .gpr import GprConfig, GprModel, PriorSpec, fit
from .grid import GridShape, IncompleteGrid, McrTensor, ModeCombinationRange, build_simple_mcr, grid_size
from .kernel import AdditiveKernel, assemble

__version__ = "0.1.0"

__all__ = [
    "AdditiveKernel",
    "CutsGPRegressor",
    "GprConfig",
    "GprModel",
    "GridShape",
    "IncompleteGrid",
    "McrTensor",
    "ModeCombinationRange",
    "PriorSpec",
    "assemble",
    "build_simple_mcr",
    "fit",
    "grid_size",
    "kernel_column",
    "kernel_columns",
    "kernel_diagonal",
    "mvp_C",
    "mvp_K",
    "mvp_L",
    "mvp_M",
    "mvp_U",
]
