"""Preconditioned CG with Lanczos recovery, and stochastic log-det/trace estimates.

One PCG run per probe gives both ``C^{-1} b`` and the Lanczos tridiagonal of
the preconditioned operator, from which ``b^T P^{-1} b * e0^T log(T) e0``
estimates the probe's log-determinant contribution.  Probes are drawn with
second moment ``P`` so the preconditioner's own log-determinant and trace
terms can be added back exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg as sla

from .fastmvp import mvp_C, n_theta, quadratic_terms
from .kernel import AdditiveKernel
from .precond import Preconditioner

__all__ = [
    "KrylovError",
    "PcgResult",
    "TraceEstimate",
    "pcg",
    "logdet_quadrature",
    "StochasticEstimates",
    "estimate",
    "estimate_logdet",
    "estimate_trace_terms",
    "RITZ_FLOOR",
]

RITZ_FLOOR = 1e-300


class KrylovError(ArithmeticError):
    """Numerical breakdown in the CG recurrence."""


@dataclass
class PcgResult:
    """Batched PCG output; per-column fields are arrays of length ``m``.

    ``tridiag[i]`` is ``(diagonal, offdiagonal)`` of the Lanczos matrix for
    column ``i``, of size ``iterations[i]``.
    """

    x: np.ndarray
    iterations: np.ndarray
    residual: np.ndarray
    converged: np.ndarray
    tridiag: list
    bPinvb: np.ndarray

    @property
    def all_converged(self) -> bool:
        return bool(self.converged.all())


@dataclass
class TraceEstimate:
    mean: np.ndarray
    sem: np.ndarray
    count: int


def _solve_identity(v):
    return v


def pcg(apply_C: Callable, P, b, tol: float = 1e-3, max_iters: int | None = None) -> PcgResult:
    """Solve ``C x = b`` for one or many right-hand sides in lockstep.

    Parameters
    ----------
    apply_C : callable
        ``(N, m) -> (N, m)`` products with the SPD operator.
    P : Preconditioner or None
        Only ``P.solve`` is used; ``None`` means no preconditioning.
    b : (N,) or (N, m) array
    tol : float
        Stop a column once the recursive residual satisfies
        ``||r|| <= tol ||b||``.
    max_iters : int, optional
        Defaults to ``min(N, 1000)``.

    Returns
    -------
    PcgResult
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    b = np.asarray(b, dtype=float)
    squeeze = b.ndim == 1
    B = b.reshape(b.shape[0], -1)
    N, m = B.shape
    if max_iters is None:
        max_iters = min(N, 1000)
    Pinv = _solve_identity if P is None else P.solve
    X = np.zeros_like(B)
    R = B.copy()
    Zr = Pinv(R)
    Pd = Zr.copy()
    rz = np.einsum("ij,ij->j", R, Zr)
    bPinvb = rz.copy()
    bnorm = np.linalg.norm(B, axis=0)
    res = np.ones(m)
    alphas = [[] for _ in range(m)]
    betas = [[] for _ in range(m)]
    active = bnorm > 0
    res[~active] = 0.0
    iters = np.zeros(m, dtype=np.int64)
    for _ in range(max_iters):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        p = Pd[:, idx]
        Ap = apply_C(p)
        pAp = np.einsum("ij,ij->j", p, Ap)
        a = rz[idx] / pAp
        if not np.all(np.isfinite(a)) or np.any(pAp <= 0):
            raise KrylovError("CG breakdown: operator not positive definite or NaN in recurrence")
        X[:, idx] += a * p
        R[:, idx] -= a * Ap
        iters[idx] += 1
        res[idx] = np.linalg.norm(R[:, idx], axis=0) / bnorm[idx]
        z = Pinv(R[:, idx])
        rz_new = np.einsum("ij,ij->j", R[:, idx], z)
        beta = rz_new / rz[idx]
        if not np.all(np.isfinite(beta)):
            raise KrylovError("CG breakdown: NaN in recurrence")
        Pd[:, idx] = z + beta * p
        rz[idx] = rz_new
        for t, i in enumerate(idx):
            alphas[i].append(a[t])
            betas[i].append(beta[t])
        active[idx[res[idx] <= tol]] = False
    converged = res <= tol
    tri = []
    for i in range(m):
        al = np.array(alphas[i])
        be = np.array(betas[i])
        ell = al.size
        diag = 1.0 / al
        if ell > 1:
            diag[1:] += be[: ell - 1] / al[: ell - 1]
        off = np.sqrt(be[: ell - 1]) / al[: ell - 1]
        tri.append((diag, off))
    x = X[:, 0] if squeeze else X
    return PcgResult(x, iters, res, converged, tri, bPinvb)


def logdet_quadrature(diag, off, bPinvb: float):
    """``bPinvb * e0^T log(T) e0`` for the symmetric tridiagonal ``T``.

    Returns ``(value, clamped)``; Ritz values below ``RITZ_FLOOR`` are
    clamped and reported.
    """
    diag = np.asarray(diag, dtype=float)
    if diag.size == 0:
        return 0.0, False
    # QR-based driver: the default MRRR one can fail on long Lanczos runs
    lam, V = sla.eigh_tridiagonal(diag, np.asarray(off, dtype=float), lapack_driver="stev")
    clamped = bool(np.any(lam < RITZ_FLOOR))
    lam = np.maximum(lam, RITZ_FLOOR)
    return float(bPinvb * np.sum(V[0] ** 2 * np.log(lam))), clamped


def _mean_sem(samples: np.ndarray) -> TraceEstimate:
    """Mean and SEM along the last axis."""
    m = samples.shape[-1]
    mean = samples.mean(axis=-1)
    sem = samples.std(axis=-1, ddof=1) / np.sqrt(m) if m > 1 else np.full(mean.shape, np.nan)
    return TraceEstimate(mean, sem, m)


def _trace_samples(kernel, P, probes, solves):
    """Per-probe ``(C^{-1} b)^T dC s - s^T dP s`` with ``s = P^{-1} b``, shape ``(n_theta, m)``."""
    m = probes.shape[1]
    S = P.solve(probes)
    a2, dc = P.probe_corrections(kernel, S)
    q = quadratic_terms(kernel, np.hstack([solves, a2]), np.hstack([S, dc]))
    samples = q[:, :m] - q[:, m:]
    # noise row: dC = dP = I
    samples[-1] = np.einsum("ij,ij->j", solves, S) - np.einsum("ij,ij->j", S, S)
    return samples


@dataclass
class StochasticEstimates:
    """Everything one batch of probes yields.

    ``logdet`` estimates ``log|C|``, ``trace`` estimates ``tr(C^{-1} dC/dtheta)``
    per hyperparameter; both include the exact preconditioner parts.
    """

    logdet: TraceEstimate
    trace: TraceEstimate
    logdet_samples: np.ndarray
    trace_samples: np.ndarray
    precond_logdet: float
    precond_trace: np.ndarray
    pcg: PcgResult
    flags: dict = field(default_factory=dict)


def estimate(
    kernel: AdditiveKernel,
    noise: float,
    P: Preconditioner,
    probes: np.ndarray,
    tol: float = 1e-3,
    max_iters: int | None = None,
    want_trace: bool = True,
) -> StochasticEstimates:
    """Log-determinant and trace terms from one lockstep PCG run over all probes."""
    probes = np.asarray(probes, dtype=float)
    res = pcg(lambda V: mvp_C(kernel, noise, V), P, probes, tol, max_iters)
    m = probes.shape[1]
    ld = np.empty(m)
    clamped = False
    for i, (d, o) in enumerate(res.tridiag):
        ld[i], c = logdet_quadrature(d, o, res.bPinvb[i])
        clamped |= c
    pld = P.logdet()
    flags = {"ritz_clamped": clamped, "cg_converged": res.all_converged}
    nt = n_theta(kernel)
    if want_trace:
        samples = _trace_samples(kernel, P, probes, res.x)
        ptr = P.trace_terms(kernel)
        flags["jitter"] = P.nystrom()["jitter"] if P.rank else 0.0
    else:
        samples = np.zeros((nt, m))
        ptr = np.zeros(nt)
    lde = _mean_sem(ld)
    lde.mean = lde.mean + pld
    tre = _mean_sem(samples)
    tre.mean = tre.mean + ptr
    return StochasticEstimates(lde, tre, ld, samples, pld, ptr, res, flags)


def estimate_logdet(kernel, noise, P, probes, tol: float = 1e-3, max_iters=None) -> TraceEstimate:
    """``log|P|`` plus the Lanczos estimate of ``log|P^{-1/2} C P^{-1/2}|``."""
    return estimate(kernel, noise, P, probes, tol, max_iters, want_trace=False).logdet


def estimate_trace_terms(
    kernel: AdditiveKernel, noise: float, P: Preconditioner, probes, solves=None, tol: float = 1e-3
) -> TraceEstimate:
    """``tr(C^{-1} dC/dtheta)`` for every hyperparameter.

    ``solves`` may pass precomputed ``C^{-1} b`` for the probes; otherwise a
    PCG run is made.
    """
    probes = np.asarray(probes, dtype=float)
    if solves is None:
        return estimate(kernel, noise, P, probes, tol).trace
    tre = _mean_sem(_trace_samples(kernel, P, probes, np.asarray(solves, dtype=float)))
    tre.mean = tre.mean + P.trace_terms(kernel)
    return tre
