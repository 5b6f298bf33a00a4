"""scikit-learn style wrapper around :func:`artifact.gpr.fit`."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .gpr import GprConfig, PriorSpec, fit
from .grid import IncompleteGrid, build_simple_mcr
from .validation import check_points, check_positive, check_targets, infer_grid

__all__ = ["CutsGPRegressor"]


class CutsGPRegressor(RegressorMixin, BaseEstimator):
    """Additive-kernel GP regression on a cut-based incomplete grid.

    ``X`` passed to :meth:`fit` must be exactly the points of an incomplete
    grid, in any row order; the grid is inferred from it.

    Parameters
    ----------
    kernel_order : int or None
        Highest interaction order of the kernel.  ``None`` uses every mode
        combination of the grid.
    noise : float
        Fixed noise variance in standardized output units.
    rank, n_probes, cg_tol, lr, grad_tol, max_iter, seed, centered
        See :class:`artifact.gpr.GprConfig` (``max_iter`` is ``max_cycles``).
    optimize : bool
        If False, the initial hyperparameters are kept.

    Attributes
    ----------
    model_ : GprModel
    grid_ : IncompleteGrid
    n_iter_ : int
    """

    def __init__(
        self,
        kernel_order=None,
        noise=1e-3,
        rank=10,
        n_probes=35,
        cg_tol=1e-3,
        lr=0.1,
        grad_tol=1e-3,
        max_iter=500,
        seed=0,
        centered=True,
        optimize=True,
        init_sigma2=None,
        init_ell=None,
    ):
        self.kernel_order = kernel_order
        self.noise = noise
        self.rank = rank
        self.n_probes = n_probes
        self.cg_tol = cg_tol
        self.lr = lr
        self.grad_tol = grad_tol
        self.max_iter = max_iter
        self.seed = seed
        self.centered = centered
        self.optimize = optimize
        self.init_sigma2 = init_sigma2
        self.init_ell = init_ell

    def _config(self) -> GprConfig:
        return GprConfig(
            noise=check_positive("noise", self.noise),
            rank=int(self.rank),
            n_probes=int(self.n_probes),
            cg_tol=check_positive("cg_tol", self.cg_tol),
            lr=check_positive("lr", self.lr),
            grad_tol=float(self.grad_tol),
            max_cycles=int(self.max_iter),
            seed=int(self.seed),
            centered=bool(self.centered),
            optimize=bool(self.optimize),
            init_sigma2=self.init_sigma2,
            init_ell=self.init_ell,
            prior=PriorSpec(),
        )

    def _kernel_mcr(self, grid: IncompleteGrid):
        if self.kernel_order is None:
            return grid.mcr
        k = int(self.kernel_order)
        if k > grid.mcr.alpha:
            raise ValueError(f"kernel_order={k} exceeds the grid cut level {grid.mcr.alpha}")
        return build_simple_mcr(grid.D, k)

    def fit(self, X, y):
        X = check_points(X)
        y = check_targets(y, X.shape[0])
        grid, order = infer_grid(X)
        yc = np.empty_like(y)
        yc[order] = y
        self.model_ = fit(grid, yc, self._config(), self._kernel_mcr(grid))
        self.grid_ = grid
        self.n_features_in_ = X.shape[1]
        self.n_iter_ = int(self.model_.diagnostics["cycles"])
        return self

    def predict(self, X, return_std: bool = False):
        check_is_fitted(self, "model_")
        X = check_points(X, self.n_features_in_)
        mean = self.model_.predict_mean(X)
        if not return_std:
            return mean
        var, _ = self.model_.predict_variance(X)
        return mean, np.sqrt(var)

    @property
    def sigma2_(self) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.model_.sigma2

    @property
    def length_scales_(self) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.model_.ell
