"""Base kernels, empirical centering and additive-kernel assembly.

The additive kernel is

    k(x, x') = sum_{mc in kernel range} sigma2[|mc|] * prod_{m in mc} k_m(x_m, x'_m)

with one squared-exponential base kernel per mode.  For every mode the base
matrix is factored as ``K = L M U`` with ``L = I + D`` (ones below the
reference in column 0) and ``U = L^T``; ``M`` is what the fast products use.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .grid import IncompleteGrid, ModeCombinationRange, format_mc

__all__ = [
    "KernelError",
    "DegenerateCenteringError",
    "UnsupportedConfigurationError",
    "SquaredExponential",
    "base_matrix",
    "base_matrix_derivative",
    "centering_weights",
    "center",
    "center_derivative",
    "reduce_matrix",
    "AdditiveKernel",
    "assemble",
    "CENTERING_TOL",
]

CENTERING_TOL = 1e-14


class KernelError(ValueError):
    """Invalid kernel argument."""


class DegenerateCenteringError(KernelError):
    """w^T K w is too small to center with."""


class UnsupportedConfigurationError(KernelError):
    """Kernel range not contained in the grid range."""


class SquaredExponential:
    """k(x, y) = exp(-(x - y)^2 / (2 ell^2)).

    Any object with the same three methods can be passed to :func:`assemble`
    as ``base``.
    """

    name = "squared_exponential"

    def matrix(self, x, y, ell):
        d = np.subtract.outer(np.asarray(x, float), np.asarray(y, float))
        return np.exp(-0.5 * (d / ell) ** 2)

    def dmatrix(self, x, y, ell):
        """Derivative with respect to ``ell``."""
        d = np.subtract.outer(np.asarray(x, float), np.asarray(y, float))
        r2 = (d / ell) ** 2
        return np.exp(-0.5 * r2) * r2 / ell

    def diag(self, x, ell):
        return np.ones(np.shape(x))


SE = SquaredExponential()


def _check_ell(ell):
    if not np.isfinite(ell) or ell <= 0:
        raise KernelError(f"length scale must be positive, got {ell}")


def base_matrix(x: Sequence[float], ell: float, base=SE) -> np.ndarray:
    """Base kernel matrix on a 1D grid."""
    _check_ell(ell)
    return base.matrix(x, x, ell)


def base_matrix_derivative(x: Sequence[float], ell: float, base=SE) -> np.ndarray:
    _check_ell(ell)
    return base.dmatrix(x, x, ell)


def centering_weights(grid: IncompleteGrid) -> list[np.ndarray]:
    """Per mode, how often each 1D index occurs among the grid points.

    All nonzero indices of a mode occur equally often: every subtensor that
    contains the mode holds ``size / (n_m - 1)`` points per index value.
    """
    D = grid.D
    per_value = np.zeros(D)
    for gi, g in enumerate(grid.groups):
        if g.order == 0 or g.count == 0 or g.size == 0:
            continue
        modes = grid.group_modes(gi)
        for p in range(g.order):
            per_value += np.bincount(modes[:, p], minlength=D) * (g.size // g.ext[p])
    out = []
    for m in range(D):
        n = grid.n[m]
        w = np.zeros(n, dtype=np.int64)
        c = int(round(per_value[m]))
        w[1:] = c
        w[0] = grid.total - c * (n - 1)
        out.append(w)
    return out


def center(K, K_star=None, K_starstar=None, w=None, *, tol_scale: float | None = None):
    """Center base-kernel blocks under the discrete weight vector ``w``.

    Parameters
    ----------
    K : (n, n) array
        Train-train block.
    K_star : (n, t) array, optional
        Train-test block.
    K_starstar : (t, t) or (t,) array, optional
        Test-test block, or only its diagonal.
    w : (n,) array
        Nonnegative weights.
    tol_scale : float, optional
        The degenerate threshold is ``CENTERING_TOL * tol_scale``; defaults
        to ``sum(w)`` (the number of grid points).

    Returns
    -------
    tuple
        ``(K_c, K_star_c, K_starstar_c)`` with ``None`` for absent inputs.
    """
    K = np.asarray(K, float)
    w = np.asarray(w, float)
    Kw = K @ w
    s = float(w @ Kw)
    scale = float(w.sum()) if tol_scale is None else tol_scale
    if not s > CENTERING_TOL * scale:
        raise DegenerateCenteringError(f"w^T K w = {s:.3e} is not above {CENTERING_TOL:g} * {scale:g}")
    Kc = K - np.outer(Kw, Kw) / s
    Ksc = Ksscc = None
    if K_star is not None:
        K_star = np.asarray(K_star, float)
        wKs = w @ K_star
        Ksc = K_star - np.multiply.outer(Kw, wKs) / s
        if K_starstar is not None:
            K_starstar = np.asarray(K_starstar, float)
            if K_starstar.ndim == 2:
                Ksscc = K_starstar - np.outer(wKs, wKs) / s
            else:
                Ksscc = K_starstar - wKs**2 / s
    elif K_starstar is not None:
        raise KernelError("test-test block needs the train-test block")
    return Kc, Ksc, Ksscc


def center_derivative(K, dK, w):
    """Derivative of the centered matrix given the derivative of ``K``.

    Quotient rule applied to ``K - (K w)(K w)^T / (w^T K w)``.
    """
    w = np.asarray(w, float)
    Kw = K @ w
    dKw = dK @ w
    s = float(w @ Kw)
    ds = float(w @ dKw)
    cross = np.outer(dKw, Kw)
    return dK - (cross + cross.T) / s + np.outer(Kw, Kw) * (ds / s**2)


def reduce_matrix(K: np.ndarray) -> np.ndarray:
    """``(I - D) K (I - S)``: subtract row 0 from rows 1.., then column 0 from columns 1.."""
    M = np.array(K, dtype=float, copy=True)
    M[1:, :] -= M[0, :]
    M[:, 1:] -= M[:, :1]
    return M


def lower_factor(n: int) -> np.ndarray:
    """``L = I + D`` for a 1D grid of size ``n``."""
    L = np.eye(n)
    L[1:, 0] = 1.0
    return L


@dataclass(eq=False)
class AdditiveKernel:
    """Assembled additive kernel over an incomplete grid.

    Immutable by convention; :func:`assemble` returns a fresh object for new
    hyperparameters.
    """

    grid: IncompleteGrid
    mcr: ModeCombinationRange
    sigma2: np.ndarray
    ell: np.ndarray
    centered: bool
    weights: list
    K: list  # per-mode base matrices (centered if requested)
    dK: list
    M: list
    dM: list
    K_raw: list  # uncentered base matrices
    base: object = SE
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def D(self) -> int:
        return self.grid.D

    @property
    def omega(self) -> int:
        return len(self.sigma2) - 1

    def blocks(self, m: int, derivative: bool = False):
        """Passive/down/up/forward partition of ``M`` (or ``dM``) for mode ``m``."""
        A = (self.dM if derivative else self.M)[m]
        return A[0, 0], A[0, 1:], A[1:, 0], A[1:, 1:]

    def cross_base(self, m: int, x_test):
        """Centered train-test base columns for mode ``m``, shape ``(n_m, t)``."""
        x = self.grid.shape.grids_1d[m]
        Ks = self.base.matrix(x, np.atleast_1d(x_test), self.ell[m])
        if not self.centered:
            return Ks
        return center(self.K_raw[m], Ks, None, self.weights[m], tol_scale=self.grid.total)[1]

    def test_diag_base(self, m: int, x_test):
        """Centered test-test base diagonal for mode ``m``."""
        x = self.grid.shape.grids_1d[m]
        xt = np.atleast_1d(np.asarray(x_test, float))
        kss = self.base.diag(xt, self.ell[m])
        if not self.centered:
            return kss
        Ks = self.base.matrix(x, xt, self.ell[m])
        return center(self.K_raw[m], Ks, kss, self.weights[m], tol_scale=self.grid.total)[2]

    def describe_hyperparameters(self) -> list[str]:
        """Names in the canonical hyperparameter order: order variances, length scales, noise."""
        return [f"sigma2_{k}" for k in range(self.omega + 1)] + [f"ell_{m + 1}" for m in range(self.D)] + ["noise"]


def assemble(
    grid: IncompleteGrid,
    kernel_mcr: ModeCombinationRange | None,
    sigma2: Sequence[float],
    ell: Sequence[float],
    centered: bool = True,
    *,
    base=SE,
    weights: list | None = None,
) -> AdditiveKernel:
    """Build per-mode base matrices, their derivatives and ``M`` factors.

    ``kernel_mcr=None`` uses the grid range.  ``weights`` overrides the
    empirical centering weights (used to construct degenerate cases).
    """
    kmcr = grid.mcr if kernel_mcr is None else kernel_mcr
    if kmcr.D != grid.D:
        raise KernelError(f"kernel range has D={kmcr.D}, grid has D={grid.D}")
    if not kmcr.issubset(grid.mcr):
        bad = next(mc for mc in kmcr if mc not in grid.mcr)
        raise UnsupportedConfigurationError(
            f"kernel term {format_mc(bad)} is not a grid cut; the kernel range must be contained in the grid range"
        )
    sigma2 = np.array(sigma2, dtype=float).reshape(-1)
    if sigma2.size != kmcr.alpha + 1:
        raise KernelError(f"need {kmcr.alpha + 1} order variances, got {sigma2.size}")
    if np.any(~np.isfinite(sigma2)) or np.any(sigma2 < 0):
        raise KernelError("order variances must be finite and nonnegative")
    ell = np.array(ell, dtype=float).reshape(-1)
    if ell.size == 1 and grid.D > 1:
        ell = np.full(grid.D, ell[0])
    if ell.size != grid.D:
        raise KernelError(f"need {grid.D} length scales, got {ell.size}")
    for v in ell:
        _check_ell(v)
    if weights is None:
        weights = centering_weights(grid) if centered else [None] * grid.D
    Ks, dKs, Ms, dMs, raws = [], [], [], [], []
    for m in range(grid.D):
        x = grid.shape.grids_1d[m]
        K = base.matrix(x, x, ell[m])
        dK = base.dmatrix(x, x, ell[m])
        raws.append(K)
        if centered:
            w = weights[m]
            dK = center_derivative(K, dK, w)
            K = center(K, w=w, tol_scale=grid.total)[0]
        Ks.append(K)
        dKs.append(dK)
        Ms.append(reduce_matrix(K))
        dMs.append(reduce_matrix(dK))
    for arr in (sigma2, ell):
        arr.setflags(write=False)
    return AdditiveKernel(grid, kmcr, sigma2, ell, bool(centered), list(weights), Ks, dKs, Ms, dMs, raws, base)
