"""Gaussian process regression on incomplete grids.

Hyperparameters are optimized in log space by Adam on the normalized
objective ``L' = L / N + log prior``, where ``L`` is the marginal
log-likelihood.  ``L`` and its gradient come from one lockstep PCG run per
cycle over the targets and the probe vectors; the preconditioner is rebuilt
at the start of every cycle, and the probe draws are fixed across cycles.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import krylov
from .fastmvp import cross_columns, cross_dot, mvp_C, mvp_U, prior_variance_at, quadratic_terms
from .grid import GridShape, IncompleteGrid, ModeCombinationRange
from .kernel import AdditiveKernel, assemble, centering_weights
from .oracle import dense_dK, dense_gpr, dense_pairwise
from .precond import build_for_kernel

__all__ = [
    "GprError",
    "DegenerateDataError",
    "PriorSpec",
    "GprConfig",
    "Standardization",
    "standardize",
    "initial_hyperparameters",
    "prior_terms",
    "Objective",
    "objective_and_gradient",
    "dense_objective",
    "Adam",
    "GprModel",
    "fit",
    "INITIAL_SIGMA2",
]

log = logging.getLogger(__name__)

INITIAL_SIGMA2 = (1e-4, 0.125, 0.25, 0.5)
LOG_2PI = float(np.log(2 * np.pi))


class GprError(RuntimeError):
    """GPR failure."""


class DegenerateDataError(GprError, ValueError):
    """Training outputs (or inputs) have zero variance."""


@dataclass
class PriorSpec:
    """Gamma prior on order variances, normal prior on log length scales.

    The log length-scale prior is centred at ``ell_mu0 + log(sqrt(2 alpha))``
    when ``effective_dimension`` is on, ``alpha`` being the highest kernel
    order.
    """

    gamma_shape: float = 1.0
    gamma_scale: float = 0.1
    ell_mu0: float = float(np.sqrt(2.0))
    ell_sigma0: float = float(np.sqrt(3.0))
    effective_dimension: bool = True
    enabled: bool = True

    def __post_init__(self):
        if not self.ell_sigma0 > 0:
            raise ValueError("ell_sigma0 must be positive")
        if not self.gamma_scale > 0:
            raise ValueError("gamma_scale must be positive")


@dataclass
class GprConfig:
    noise: float = 1e-3
    rank: int = 10
    n_probes: int = 35
    cg_tol: float = 1e-3
    max_cg_iters: int | None = None
    lr: float = 0.1
    grad_tol: float = 1e-3
    max_cycles: int = 500
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    centered: bool = True
    optimize: bool = True
    init_sigma2: Sequence[float] | None = None
    init_ell: Sequence[float] | None = None
    prior: PriorSpec = field(default_factory=PriorSpec)

    def __post_init__(self):
        if isinstance(self.prior, dict):
            self.prior = PriorSpec(**self.prior)
        if not self.noise > 0:
            raise ValueError("noise must be positive")
        if self.rank < 0 or self.n_probes < 2 or self.max_cycles < 0:
            raise ValueError("rank >= 0, n_probes >= 2 and max_cycles >= 0 required")
        if not (self.cg_tol > 0 and self.lr > 0 and self.grad_tol >= 0):
            raise ValueError("cg_tol and lr must be positive, grad_tol nonnegative")

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("init_sigma2", "init_ell"):
            if d[key] is not None:
                d[key] = [float(v) for v in d[key]]
        return d


# ---------------------------------------------------------------------------
# standardization


@dataclass
class Standardization:
    """Affine maps ``(x - x_mean) / x_scale`` per mode and ``(y - y_mean) / y_scale``."""

    x_mean: np.ndarray
    x_scale: np.ndarray
    y_mean: float
    y_scale: float

    def inputs(self, x):
        return (np.asarray(x, dtype=float) - self.x_mean) / self.x_scale

    def outputs(self, y):
        return (np.asarray(y, dtype=float) - self.y_mean) / self.y_scale

    def inputs_1d(self, m: int, x):
        return (np.asarray(x, dtype=float) - self.x_mean[m]) / self.x_scale[m]

    def restore_outputs(self, y):
        return np.asarray(y, dtype=float) * self.y_scale + self.y_mean

    @classmethod
    def identity(cls, D: int) -> "Standardization":
        return cls(np.zeros(D), np.ones(D), 0.0, 1.0)


def standardize(grid: IncompleteGrid, y, *, inputs: bool = True):
    """Population mean/scale of the grid coordinates and of ``y``.

    Coordinate statistics use the per-mode occurrence counts of each 1D value
    among the grid points.  A mode with a single 1D value keeps scale 1.

    Returns
    -------
    (IncompleteGrid, ndarray, Standardization)
        Standardized grid, standardized outputs and the statistics.
    """
    y = np.asarray(y, dtype=float).reshape(-1)
    N = grid.total
    if y.size != N:
        raise GprError(f"expected {N} outputs, got {y.size}")
    if N < 2:
        raise DegenerateDataError("need at least two training points")
    if not np.all(np.isfinite(y)):
        raise GprError("outputs must be finite")
    ym = float(y.mean())
    ys = float(y.std())
    if not ys > 0:
        raise DegenerateDataError("training outputs have zero variance")
    D = grid.D
    xm = np.zeros(D)
    xs = np.ones(D)
    if inputs:
        w = centering_weights(grid)
        for m in range(D):
            x = grid.shape.grids_1d[m]
            mu = float(w[m] @ x) / N
            var = float(w[m] @ (x - mu) ** 2) / N
            xm[m] = mu
            xs[m] = np.sqrt(var) if var > 0 else 1.0
    st = Standardization(xm, xs, ym, ys)
    sgrid = IncompleteGrid(GridShape([st.inputs_1d(m, g) for m, g in enumerate(grid.shape.grids_1d)]), grid.mcr)
    return sgrid, st.outputs(y), st


def initial_hyperparameters(grid: IncompleteGrid, omega: int, config: GprConfig | None = None):
    """Default start: tabulated order variances, twice the mean 1D spacing as length scale."""
    config = config or GprConfig()
    if config.init_sigma2 is not None:
        s2 = np.array(config.init_sigma2, dtype=float)
        if s2.size != omega + 1:
            raise GprError(f"init_sigma2 needs {omega + 1} values")
    else:
        s2 = np.array([INITIAL_SIGMA2[k] if k < len(INITIAL_SIGMA2) else 2.0 ** (k - 4) for k in range(omega + 1)])
    if config.init_ell is not None:
        ell = np.array(config.init_ell, dtype=float).reshape(-1)
        if ell.size == 1:
            ell = np.full(grid.D, ell[0])
    else:
        ell = np.ones(grid.D)
        for m, x in enumerate(grid.shape.grids_1d):
            if x.size > 1:
                ell[m] = 2.0 * (x.max() - x.min()) / (x.size - 1)
    if ell.size != grid.D or np.any(ell <= 0) or np.any(s2 <= 0):
        raise GprError("initial hyperparameters must be positive, one length scale per mode")
    return s2, ell


# ---------------------------------------------------------------------------
# objective


def prior_terms(log_sigma2, log_ell, alpha: int, spec: PriorSpec):
    """Log prior (constants dropped) and its gradient in log-parameter space.

    Order variances: ``(a - 1) log s - s / scale``; length scales: normal
    density in ``log ell``.
    """
    z = np.asarray(log_sigma2, dtype=float)
    lam = np.asarray(log_ell, dtype=float)
    if not spec.enabled:
        return 0.0, np.zeros(z.size + lam.size)
    s = np.exp(z)
    a, th = spec.gamma_shape, spec.gamma_scale
    val = float(np.sum((a - 1.0) * z - s / th))
    g_z = (a - 1.0) - s / th
    mu = spec.ell_mu0 + (0.5 * np.log(2.0 * max(alpha, 1)) if spec.effective_dimension else 0.0)
    r = (lam - mu) / spec.ell_sigma0
    val += float(-0.5 * np.sum(r**2))
    g_l = -r / spec.ell_sigma0
    return val, np.concatenate([g_z, g_l])


@dataclass
class Objective:
    value: float
    grad: np.ndarray
    mll: float
    logdet: float
    logdet_sem: float
    alpha: np.ndarray
    cg_iters: int
    cg_converged: bool
    precond_rank: int
    trace_sem: np.ndarray


def _kernel_order(kmcr: ModeCombinationRange) -> int:
    return kmcr.alpha


def objective_and_gradient(
    grid: IncompleteGrid,
    kmcr: ModeCombinationRange,
    y: np.ndarray,
    log_sigma2,
    log_ell,
    config: GprConfig,
) -> Objective:
    """Stochastic ``L'`` and ``dL'/d log(theta)`` (order variances then length scales)."""
    s2 = np.exp(np.asarray(log_sigma2, dtype=float))
    ell = np.exp(np.asarray(log_ell, dtype=float))
    kernel = assemble(grid, kmcr, s2, ell, centered=config.centered)
    noise = config.noise
    P = build_for_kernel(kernel, config.rank, noise)
    probes = P.probes(config.seed, config.n_probes)
    rhs = np.hstack([y[:, None], probes])
    res = krylov.pcg(lambda V: mvp_C(kernel, noise, V), P, rhs, config.cg_tol, config.max_cg_iters)
    alpha = res.x[:, 0]
    ld = np.array([krylov.logdet_quadrature(d, o, b)[0] for (d, o), b in zip(res.tridiag[1:], res.bPinvb[1:])])
    ld_mean = float(ld.mean()) + P.logdet()
    ld_sem = float(ld.std(ddof=1) / np.sqrt(ld.size))
    tr = krylov.estimate_trace_terms(kernel, noise, P, probes, solves=res.x[:, 1:])
    N = grid.total
    mll = -0.5 * (float(y @ alpha) + ld_mean + N * LOG_2PI)
    q = quadratic_terms(kernel, alpha, alpha)
    dL = 0.5 * q - 0.5 * tr.mean  # per raw hyperparameter
    w = kernel.omega + 1
    raw = np.concatenate([s2, ell])
    g = raw * dL[: w + kernel.D] / N
    pv, pg = prior_terms(log_sigma2, log_ell, _kernel_order(kmcr), config.prior)
    return Objective(
        value=mll / N + pv,
        grad=g + pg,
        mll=mll,
        logdet=ld_mean,
        logdet_sem=ld_sem,
        alpha=alpha,
        cg_iters=int(res.iterations.max()),
        cg_converged=res.all_converged,
        precond_rank=P.rank,
        trace_sem=tr.sem[: w + kernel.D],
    )


def dense_objective(grid, kmcr, y, log_sigma2, log_ell, noise, centered=True, prior: PriorSpec | None = None):
    """Exact ``L'`` and its log-space gradient by dense Cholesky (small grids only)."""
    prior = prior or PriorSpec()
    s2 = np.exp(np.asarray(log_sigma2, dtype=float))
    ell = np.exp(np.asarray(log_ell, dtype=float))
    kernel = assemble(grid, kmcr, s2, ell, centered=centered)
    K = dense_pairwise(grid, kernel)
    thetas = [("sigma2", k) for k in range(kernel.omega + 1)] + [("ell", m) for m in range(grid.D)]
    dK = {t: dense_dK(grid, kernel, t) for t in thetas}
    ref = dense_gpr(K, noise, y, dK)
    N = grid.total
    raw = np.concatenate([s2, ell])
    g = raw * np.array([ref.grad[t] for t in thetas]) / N
    pv, pg = prior_terms(log_sigma2, log_ell, kmcr.alpha, prior)
    return ref.mll / N + pv, g + pg


class Adam:
    """Adam ascent step with bias correction."""

    def __init__(self, size: int, lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, grad):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad**2
        mh = self.m / (1 - self.b1**self.t)
        vh = self.v / (1 - self.b2**self.t)
        return self.lr * mh / (np.sqrt(vh) + self.eps)


# ---------------------------------------------------------------------------
# model


@dataclass(eq=False)
class GprModel:
    """Fitted model; ``grid`` holds raw coordinates, ``kernel`` lives in standardized units."""

    grid: IncompleteGrid
    kernel_mcr: ModeCombinationRange
    sigma2: np.ndarray
    ell: np.ndarray
    noise: float
    stats: Standardization
    weights: np.ndarray
    config: GprConfig
    diagnostics: dict = field(default_factory=dict)
    _kernel: AdditiveKernel | None = field(default=None, repr=False)

    @property
    def kernel(self) -> AdditiveKernel:
        if self._kernel is None:
            sgrid = IncompleteGrid(
                GridShape([self.stats.inputs_1d(m, g) for m, g in enumerate(self.grid.shape.grids_1d)]), self.grid.mcr
            )
            self._kernel = assemble(sgrid, self.kernel_mcr, self.sigma2, self.ell, centered=self.config.centered)
        return self._kernel

    @property
    def converged(self) -> bool:
        return bool(self.diagnostics.get("converged", False))

    def _test_points(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.grid.D:
            raise GprError(f"test points need {self.grid.D} coordinates")
        return self.stats.inputs(x)

    def predict_mean(self, x, chunk: int = 4096) -> np.ndarray:
        """Posterior mean ``k_*^T alpha`` in raw output units."""
        xs = self._test_points(x)
        k = self.kernel
        Uw = mvp_U(k.grid, self.weights)
        out = np.empty(xs.shape[0])
        for c0 in range(0, xs.shape[0], chunk):
            out[c0 : c0 + chunk] = cross_dot(k, None, xs[c0 : c0 + chunk], Uweights=Uw)
        return self.stats.restore_outputs(out)

    def predict_variance(self, x, tol: float | None = None, chunk: int = 256):
        """Posterior variance ``k** - k_*^T C^{-1} k_*`` in raw units, plus a clamp flag.

        Negative values are set to zero; the flag is raised if any was below
        ``-1e-8`` (standardized units).
        """
        xs = self._test_points(x)
        k = self.kernel
        tol = self.config.cg_tol if tol is None else tol
        out = np.empty(xs.shape[0])
        flag = False
        for c0 in range(0, xs.shape[0], chunk):
            xc = xs[c0 : c0 + chunk]
            Ks = cross_columns(k, xc)
            P = self._precond()
            sol = krylov.pcg(lambda V: mvp_C(k, self.noise, V), P, Ks, tol, self.config.max_cg_iters).x
            v = prior_variance_at(k, xc) - np.einsum("ij,ij->j", Ks, sol)
            flag |= bool(np.any(v < -1e-8))
            out[c0 : c0 + chunk] = np.maximum(v, 0.0)
        return out * self.stats.y_scale**2, flag

    def _precond(self):
        P = self.__dict__.get("_P")
        if P is None:
            P = build_for_kernel(self.kernel, self.config.rank, self.noise)
            self.__dict__["_P"] = P
        return P

    def residual(self, y) -> float:
        """``||y_s - C alpha|| / ||y_s||`` for raw training outputs ``y``."""
        ys = self.stats.outputs(y)
        r = ys - mvp_C(self.kernel, self.noise, self.weights)
        return float(np.linalg.norm(r) / np.linalg.norm(ys))

    def refit_weights(self, y, noise: float | None = None, tol: float | None = None, max_iters: int | None = None):
        """New model at the same hyperparameters with recomputed weights (optionally new noise)."""
        noise = self.noise if noise is None else float(noise)
        tol = self.config.cg_tol if tol is None else tol
        ys = self.stats.outputs(y)
        P = build_for_kernel(self.kernel, self.config.rank, noise)
        res = krylov.pcg(lambda V: mvp_C(self.kernel, noise, V), P, ys, tol, max_iters)
        diag = dict(self.diagnostics)
        diag["refit"] = {"noise": noise, "cg_iters": int(res.iterations[0]), "cg_converged": bool(res.converged[0])}
        return GprModel(
            self.grid, self.kernel_mcr, self.sigma2, self.ell, noise, self.stats, res.x, self.config, diag, self._kernel
        )


def fit(grid: IncompleteGrid, y, config: GprConfig | None = None, kernel_mcr: ModeCombinationRange | None = None) -> GprModel:
    """Standardize, optimize hyperparameters with Adam, and solve for the final weights.

    ``y`` is in canonical grid order.
    """
    config = config or GprConfig()
    kmcr = grid.mcr if kernel_mcr is None else kernel_mcr
    sgrid, ys, stats = standardize(grid, y)
    s2, ell = initial_hyperparameters(sgrid, kmcr.alpha, config)
    params = np.log(np.concatenate([s2, ell]))
    w = s2.size
    opt = Adam(params.size, config.lr, config.beta1, config.beta2, config.adam_eps)
    trace = {"objective": [], "grad_norm": [], "cg_iters": [], "precond_rank": []}
    converged = False
    cg_ok = True
    cycles = config.max_cycles if config.optimize else 0
    for it in range(cycles):
        obj = objective_and_gradient(sgrid, kmcr, ys, params[:w], params[w:], config)
        gn = float(np.linalg.norm(obj.grad))
        trace["objective"].append(float(obj.value))
        trace["grad_norm"].append(gn)
        trace["cg_iters"].append(obj.cg_iters)
        trace["precond_rank"].append(obj.precond_rank)
        cg_ok &= obj.cg_converged
        log.debug("cycle %d objective %.6g grad norm %.3g", it, obj.value, gn)
        if gn <= config.grad_tol:
            converged = True
            break
        params = params + opt.step(obj.grad)
    if not config.optimize:
        converged = True
    s2 = np.exp(params[:w])
    ell = np.exp(params[w:])
    kernel = assemble(sgrid, kmcr, s2, ell, centered=config.centered)
    P = build_for_kernel(kernel, config.rank, config.noise)
    res = krylov.pcg(lambda V: mvp_C(kernel, config.noise, V), P, ys, config.cg_tol, config.max_cg_iters)
    cg_ok &= bool(res.converged[0])
    diagnostics = {
        "converged": converged,
        "cycles": len(trace["objective"]),
        "cg_converged": cg_ok,
        "final_cg_iters": int(res.iterations[0]),
        **trace,
    }
    if not converged:
        log.warning("hyperparameter optimization stopped at %d cycles without reaching the gradient tolerance", cycles)
    return GprModel(grid, kmcr, s2, ell, config.noise, stats, res.x, config, diagnostics, kernel)
