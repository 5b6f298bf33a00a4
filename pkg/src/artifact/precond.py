"""Rank-k pivoted-Cholesky preconditioner ``P = sigma2 I + Z Z^T``.

The factor is built greedily from the kernel diagonal and ``k`` kernel
columns.  Solves and the log-determinant go through the ``k x k`` capacitance
matrix ``Q = sigma2 I + Z^T Z``.  The same factor is the column Nystrom
approximation at the pivot set, which gives cheap exact derivative traces of
``P`` at frozen pivots.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg as sla

from .fastmvp import column_forms, kernel_columns, kernel_diagonal, n_theta
from .kernel import AdditiveKernel

__all__ = [
    "PreconditionerError",
    "Preconditioner",
    "pivoted_cholesky",
    "build",
    "build_for_kernel",
    "probe_rng",
    "PIVOT_EPS",
    "JITTER",
]

PIVOT_EPS = 1e-12
JITTER = 1e-10


class PreconditionerError(ValueError):
    """Invalid preconditioner input."""


def pivoted_cholesky(diag, column_fn: Callable, k: int, eps: float = PIVOT_EPS):
    """Greedy pivoted Cholesky from diagonal and column access.

    Parameters
    ----------
    diag : (N,) array
        Diagonal of the matrix.
    column_fn : callable
        ``column_fn(i)`` returns column ``i`` as an ``(N,)`` array.
    k : int
        Requested rank.
    eps : float
        Relative stop threshold: stop once the largest residual diagonal
        entry is at most ``eps * max(diag)``.

    Returns
    -------
    Z : (N, r) array
        Factor with ``r <= k`` columns in pivot order.
    pivots : (r,) int array
    A : (N, r) array
        The raw pivot columns.
    """
    d = np.array(diag, dtype=float).reshape(-1)
    N = d.size
    if k < 0:
        raise PreconditionerError("rank must be nonnegative")
    k = min(int(k), N)
    if N and d.min() < -1e-10 * max(1.0, np.abs(d).max()):
        raise PreconditionerError("diagonal has negative entries")
    stop = eps * (d.max() if N else 0.0)
    Z = np.zeros((N, k))
    A = np.zeros((N, k))
    pivots = []
    for j in range(k):
        p = int(np.argmax(d))  # first maximum: lowest index wins ties
        if d[p] <= stop:
            break
        col = np.asarray(column_fn(p), dtype=float).reshape(-1)
        A[:, j] = col
        r = col - Z[:, :j] @ Z[p, :j]
        Z[:, j] = r / np.sqrt(d[p])
        d -= Z[:, j] ** 2
        d[p] = 0.0
        pivots.append(p)
    r = len(pivots)
    return Z[:, :r].copy(), np.array(pivots, dtype=np.int64), A[:, :r].copy()


def probe_rng(seed: int, i: int) -> np.random.Generator:
    """Counter-based generator for probe ``i``: Philox keyed by ``(seed, i)``."""
    return np.random.Generator(np.random.Philox(key=np.array([seed, i], dtype=np.uint64)))


@dataclass(eq=False)
class Preconditioner:
    """``P = sigma2 I + Z Z^T``.

    Attributes
    ----------
    Z : (N, r) array
    pivots : (r,) int array
    noise : float
    A : (N, r) array
        Pivot columns of the kernel matrix.
    requested_rank : int
    """

    Z: np.ndarray
    pivots: np.ndarray
    noise: float
    A: np.ndarray
    requested_rank: int
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.noise > 0:
            raise PreconditionerError("noise variance must be positive")
        r = self.rank
        self.Q = self.noise * np.eye(r) + self.Z.T @ self.Z
        self._Qf = sla.cho_factor(self.Q, lower=True) if r else None

    @property
    def N(self) -> int:
        return self.Z.shape[0]

    @property
    def rank(self) -> int:
        return self.Z.shape[1]

    @property
    def stopped_early(self) -> bool:
        return self.rank < min(self.requested_rank, self.N)

    def _qsolve(self, x):
        return sla.cho_solve(self._Qf, x)

    def matvec(self, v):
        v = np.asarray(v, dtype=float)
        return self.noise * v + self.Z @ (self.Z.T @ v)

    def solve(self, v):
        """``P^{-1} v`` via Woodbury; ``v`` may be ``(N,)`` or ``(N, m)``."""
        v = np.asarray(v, dtype=float)
        if self.rank == 0:
            return v / self.noise
        return (v - self.Z @ self._qsolve(self.Z.T @ v)) / self.noise

    def logdet(self) -> float:
        """``log|Q| + (N - r) log(sigma2)``."""
        if "logdet" not in self._cache:
            ld = (self.N - self.rank) * np.log(self.noise)
            if self.rank:
                ld += 2.0 * np.log(np.diag(self._Qf[0])).sum()
            self._cache["logdet"] = float(ld)
        return self._cache["logdet"]

    def inverse_trace(self) -> float:
        """``tr(P^{-1}) = (N - tr(Q^{-1} Z^T Z)) / sigma2``."""
        if self.rank == 0:
            return self.N / self.noise
        return float((self.N - np.trace(self._qsolve(self.Z.T @ self.Z))) / self.noise)

    def dense(self) -> np.ndarray:
        return self.noise * np.eye(self.N) + self.Z @ self.Z.T

    def sample_probe(self, rng: np.random.Generator) -> np.ndarray:
        """``b = Z v + sigma w`` with Rademacher ``v`` and ``w``, so ``E[b b^T] = P``."""
        v = rng.integers(0, 2, size=self.rank) * 2.0 - 1.0
        w = rng.integers(0, 2, size=self.N) * 2.0 - 1.0
        return self.Z @ v + np.sqrt(self.noise) * w

    def probes(self, seed: int, m: int) -> np.ndarray:
        """``(N, m)`` probes, column ``i`` drawn from :func:`probe_rng` ``(seed, i)``."""
        out = np.empty((self.N, m))
        for i in range(m):
            out[:, i] = self.sample_probe(probe_rng(seed, i))
        return out

    # -- Nystrom derivative pieces ------------------------------------------
    def nystrom(self) -> dict:
        """``G = B^{-1} A^T`` with ``B = A[pivots]``, and the trace weights.

        ``B`` is regularized by ``JITTER * tr(B) / r`` if its Cholesky fails
        (``jitter`` is then nonzero in the result).
        """
        hit = self._cache.get("nystrom")
        if hit is not None:
            return hit
        r = self.rank
        A = self.A
        B = A[self.pivots]
        B = 0.5 * (B + B.T)
        jitter = 0.0
        try:
            Bf = sla.cho_factor(B, lower=True)
        except np.linalg.LinAlgError:
            jitter = JITTER * np.trace(B) / r
            Bf = sla.cho_factor(B + jitter * np.eye(r), lower=True)
        G = sla.cho_solve(Bf, A.T)  # (r, N)
        GZ = G @ self.Z
        Xt = G - GZ @ self._qsolve(self.Z.T)  # sigma2 * G P^{-1}
        Yt = GZ @ self._qsolve(GZ.T) - G @ G.T
        out = {"G": G, "Xt": Xt, "Yt": 0.5 * (Yt + Yt.T), "jitter": jitter}
        self._cache["nystrom"] = out
        return out

    def trace_terms(self, kernel: AdditiveKernel) -> np.ndarray:
        """``tr(P^{-1} dP/dtheta)`` for every hyperparameter, at frozen pivots.

        Rows follow :func:`artifact.fastmvp.theta_names`.  The noise row is
        ``tr(P^{-1})``.
        """
        nt = n_theta(kernel)
        out = np.zeros(nt)
        if self.rank:
            ny = self.nystrom()
            W = 2.0 * ny["Xt"].T
            W[self.pivots] += ny["Yt"]
            forms = column_forms(kernel, W, self.pivots)
            out[:-1] = forms[:-1].sum(axis=1) / self.noise
        out[-1] = self.inverse_trace()
        return out

    def probe_corrections(self, kernel: AdditiveKernel, s: np.ndarray):
        """Pair ``(2 s - dc, dc)`` whose form gives ``s^T (dP/dtheta) s``.

        ``s`` is ``P^{-1} b`` (``(N, m)``); ``dc`` holds ``G s`` on the pivot rows.
        """
        dc = np.zeros_like(s)
        if self.rank:
            dc[self.pivots] = self.nystrom()["G"] @ s
        return 2.0 * s - dc, dc


def build(diag, column_fn: Callable, k: int, noise: float, eps: float = PIVOT_EPS) -> Preconditioner:
    """Pivoted-Cholesky preconditioner from diagonal and single-column access."""
    Z, piv, A = pivoted_cholesky(diag, column_fn, k, eps)
    return Preconditioner(Z, piv, float(noise), A, int(k))


def build_for_kernel(kernel: AdditiveKernel, k: int, noise: float, eps: float = PIVOT_EPS) -> Preconditioner:
    """Preconditioner for ``K + noise I`` using the exact fast diagonal and columns."""
    diag = kernel_diagonal(kernel)
    return build(diag, lambda i: kernel_columns(kernel, [i])[:, 0], k, noise, eps)
