"""Dense brute-force references for the structured algorithms.

Nothing here is fast.  Two independent constructions of the grid kernel
matrix are provided: pairwise evaluation of the additive kernel, and explicit
complete-grid Kronecker sums restricted to the incomplete grid.  A dense
Cholesky-based GPR serves as the reference for the iterative one.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import prod

import numpy as np
import scipy.linalg as sla

from .grid import IncompleteGrid
from .kernel import AdditiveKernel, lower_factor

__all__ = [
    "OracleRefusal",
    "DenseKernel",
    "dense_pairwise",
    "dense_chopped_kronecker",
    "chopped_kronecker_mvp",
    "complete_indices",
    "chop",
    "dense_bracket_product",
    "dense_L",
    "dense_U",
    "dense_dK",
    "dense_gpr",
    "DenseGpr",
    "product_order_leq",
    "random_cud_set",
]

PAIRWISE_CAP = 5000
COMPLETE_CAP = 2048


class OracleRefusal(RuntimeError):
    """Instance too large for a dense reference."""


@dataclass
class DenseKernel:
    matrix: np.ndarray
    provenance: str


def _kernel_terms(kernel: AdditiveKernel):
    for j in range(kernel.omega + 1):
        for row in kernel.mcr.order_array(j):
            yield j, tuple(int(x) for x in row)


def dense_pairwise(grid: IncompleteGrid, kernel: AdditiveKernel, cap: int = PAIRWISE_CAP, mats=None) -> DenseKernel:
    """Entry ``(i, j)`` = sum over terms of ``sigma2 * prod_m K_m[i_m, j_m]``.

    ``mats`` overrides the per-mode base matrices (used to build derivative
    matrices).
    """
    N = grid.total
    if N > cap:
        raise OracleRefusal(f"N={N} exceeds the pairwise cap {cap}")
    mats = kernel.K if mats is None else mats
    idx = grid.index_matrix()
    G = [mats[m][np.ix_(idx[:, m], idx[:, m])] for m in range(grid.D)]
    K = np.zeros((N, N))
    for j, mc in _kernel_terms(kernel):
        if kernel.sigma2[j] == 0:
            continue
        term = np.full((N, N), float(kernel.sigma2[j]))
        for m in mc:
            term *= G[m]
        K += term
    return DenseKernel(K, "pairwise")


def dense_dK(grid: IncompleteGrid, kernel: AdditiveKernel, theta: tuple) -> np.ndarray:
    """Analytic dense derivative of the grid kernel matrix."""
    N = grid.total
    if theta[0] == "noise":
        return np.eye(N)
    idx = grid.index_matrix()
    G = [kernel.K[m][np.ix_(idx[:, m], idx[:, m])] for m in range(grid.D)]
    out = np.zeros((N, N))
    for j, mc in _kernel_terms(kernel):
        if theta[0] == "sigma2":
            if j != theta[1]:
                continue
            term = np.ones((N, N))
            for m in mc:
                term *= G[m]
        else:
            m0 = theta[1]
            if m0 not in mc:
                continue
            term = np.full((N, N), float(kernel.sigma2[j]))
            for m in mc:
                term *= kernel.dK[m][np.ix_(idx[:, m], idx[:, m])] if m == m0 else G[m]
        out += term
    return out


def complete_indices(grid: IncompleteGrid) -> np.ndarray:
    """Row-major complete-grid position of every incomplete-grid point (the columns of Gamma)."""
    return np.ravel_multi_index(grid.index_matrix().T, grid.n)


def chop(A: np.ndarray, pos: np.ndarray) -> np.ndarray:
    """``Gamma^T A Gamma`` (or ``Gamma^T a`` for vectors)."""
    if A.ndim == 1:
        return A[pos]
    return A[np.ix_(pos, pos)]


def dense_bracket_product(factors: list) -> np.ndarray:
    """Kronecker product of the given per-mode matrices, mode 1 outermost."""
    out = np.ones((1, 1))
    for F in factors:
        out = np.kron(out, F)
    return out


def _complete_size(grid):
    return prod(grid.n)


def dense_chopped_kronecker(grid: IncompleteGrid, kernel: AdditiveKernel, cap: int = COMPLETE_CAP) -> DenseKernel:
    """Complete-grid Kronecker sum with ones in the absent modes, then chopped."""
    Nc = _complete_size(grid)
    if Nc > cap:
        raise OracleRefusal(f"complete grid of {Nc} points exceeds cap {cap}")
    Kc = np.zeros((Nc, Nc))
    for j, mc in _kernel_terms(kernel):
        factors = [kernel.K[m] if m in mc else np.ones((grid.n[m], grid.n[m])) for m in range(grid.D)]
        Kc += kernel.sigma2[j] * dense_bracket_product(factors)
    return DenseKernel(chop(Kc, complete_indices(grid)), "chopped-kronecker")


def chopped_kronecker_mvp(grid: IncompleteGrid, kernel: AdditiveKernel, v: np.ndarray) -> np.ndarray:
    """``Gamma^T K_complete Gamma v`` via mode products on the complete tensor."""
    pos = complete_indices(grid)
    x = np.zeros(_complete_size(grid))
    x[pos] = v
    X = x.reshape(grid.n)
    Y = np.zeros_like(X)
    for j, mc in _kernel_terms(kernel):
        T = X
        for m in range(grid.D):
            if m in mc:
                T = np.moveaxis(np.tensordot(kernel.K[m], T, axes=([1], [m])), 0, m)
            else:
                T = np.broadcast_to(T.sum(axis=m, keepdims=True), T.shape)
        Y += kernel.sigma2[j] * T
    return Y.reshape(-1)[pos]


def dense_L(grid: IncompleteGrid) -> np.ndarray:
    pos = complete_indices(grid)
    return chop(dense_bracket_product([lower_factor(n) for n in grid.n]), pos)


def dense_U(grid: IncompleteGrid) -> np.ndarray:
    return dense_L(grid).T


@dataclass
class DenseGpr:
    alpha: np.ndarray
    mll: float
    grad: dict
    mean: np.ndarray | None = None
    var: np.ndarray | None = None
    logdet: float = 0.0


def dense_gpr(K, noise: float, y, dK: dict | None = None, K_star=None, K_starstar=None) -> DenseGpr:
    """Exact GPR by Cholesky of ``C = K + noise I``.

    ``dK`` maps hyperparameter ids to dense ``dC/dtheta``; the gradient of the
    marginal log-likelihood is returned for each.  ``K_starstar`` may be the
    full test block or its diagonal.
    """
    K = K.matrix if isinstance(K, DenseKernel) else np.asarray(K, float)
    y = np.asarray(y, float)
    N = K.shape[0]
    C = K + noise * np.eye(N)
    cf = sla.cho_factor(C, lower=True)
    alpha = sla.cho_solve(cf, y)
    logdet = 2.0 * np.log(np.diag(cf[0])).sum()
    mll = -0.5 * (y @ alpha + logdet + N * np.log(2 * np.pi))
    grad = {}
    if dK:
        Cinv = sla.cho_solve(cf, np.eye(N))
        for key, dC in dK.items():
            grad[key] = 0.5 * alpha @ dC @ alpha - 0.5 * np.einsum("ij,ji->", Cinv, dC)
    mean = var = None
    if K_star is not None:
        K_star = np.asarray(K_star, float)
        mean = K_star.T @ alpha
        if K_starstar is not None:
            V = sla.cho_solve(cf, K_star)
            kss = np.asarray(K_starstar, float)
            kss = np.diag(kss) if kss.ndim == 2 else kss
            var = kss - np.einsum("ij,ij->j", K_star, V)
    return DenseGpr(alpha, float(mll), grad, mean, var, float(logdet))


def product_order_leq(idx: np.ndarray) -> np.ndarray:
    """``out[i, j] = True`` iff multi-index ``j <= i`` componentwise."""
    return np.all(idx[None, :, :] <= idx[:, None, :], axis=2)


def random_cud_set(n, rng, n_seeds: int = 3) -> np.ndarray:
    """Random downward-closed set of multi-indices in a complete grid of shape ``n``.

    Returns sorted row-major positions.  Built as the union of the boxes
    below a few random points.
    """
    n = tuple(n)
    tops = np.stack([rng.integers(0, k, size=n_seeds) for k in n], axis=1)
    grid = np.indices(n).reshape(len(n), -1).T
    keep = np.zeros(grid.shape[0], dtype=bool)
    for t in tops:
        keep |= np.all(grid <= t, axis=1)
    return np.flatnonzero(keep)
