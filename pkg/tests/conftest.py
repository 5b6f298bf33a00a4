import numpy as np
import pytest

from artifact.grid import GridShape, IncompleteGrid, build_simple_mcr
from artifact.kernel import assemble


def random_grid(rng, D, n, alpha):
    """Simple-MCR grid with random 1D coordinates; ``n`` scalar or per-mode."""
    nn = [n] * D if np.isscalar(n) else list(n)
    shape = GridShape([rng.standard_normal(k) for k in nn])
    return IncompleteGrid(shape, build_simple_mcr(D, alpha))


def random_kernel(rng, grid, centered=True, kernel_mcr=None):
    a = grid.mcr.alpha if kernel_mcr is None else kernel_mcr.alpha
    return assemble(grid, kernel_mcr, rng.uniform(0.1, 1.0, a + 1), rng.uniform(0.5, 2.0, grid.D), centered=centered)


def rel_err(a, b):
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-300))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
