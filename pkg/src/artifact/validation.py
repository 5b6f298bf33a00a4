"""Input checks and grid inference for scattered point sets."""

from __future__ import annotations

import numpy as np

from .grid import GridError, GridShape, IncompleteGrid, ModeCombinationRange, format_mc

__all__ = [
    "check_points",
    "check_targets",
    "check_positive",
    "infer_grid",
    "match_points",
]


def check_points(X, D: int | None = None, name: str = "X") -> np.ndarray:
    """2D finite float array, optionally with ``D`` columns."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1 and D is not None and X.size == D:
        X = X[None, :]
    if X.ndim != 2:
        raise ValueError(f"{name} must be 2D, got shape {X.shape}")
    if D is not None and X.shape[1] != D:
        raise ValueError(f"{name} has {X.shape[1]} columns, expected {D}")
    if X.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite values")
    return X


def check_targets(y, n: int) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.ndim == 2 and y.shape[1] == 1:
        y = y[:, 0]
    if y.ndim != 1:
        raise ValueError(f"y must be 1D, got shape {y.shape}")
    if y.size != n:
        raise ValueError(f"y has {y.size} entries, expected {n}")
    if not np.all(np.isfinite(y)):
        raise ValueError("y contains non-finite values")
    return y


def check_positive(name: str, value) -> float:
    v = float(value)
    if not np.isfinite(v) or v <= 0:
        raise ValueError(f"{name} must be positive, got {value}")
    return v


def _reference(col: np.ndarray, m: int) -> float:
    vals, counts = np.unique(col, return_counts=True)
    top = counts.max()
    winners = vals[counts == top]
    if winners.size > 1 and vals.size > 1:
        raise GridError(
            f"cannot infer the reference coordinate of mode {m + 1}: values {winners[:3].tolist()} are equally frequent"
        )
    return float(winners[0])


def infer_grid(X) -> tuple[IncompleteGrid, np.ndarray]:
    """Recover the incomplete grid spanned by the rows of ``X``.

    The reference coordinate of each mode is its most frequent value; the
    other values follow in ascending order.  The mode combinations are the
    sets of displaced modes found in the data, which must be closed under
    subsets, and every subgrid must be complete.

    Returns
    -------
    grid : IncompleteGrid
    order : ndarray
        ``order[i]`` is the canonical flat index of row ``i``.
    """
    X = check_points(X)
    D = X.shape[1]
    grids = []
    idx = np.empty(X.shape, dtype=np.int64)
    for m in range(D):
        ref = _reference(X[:, m], m)
        others = np.unique(X[X[:, m] != ref, m])
        g = np.concatenate([[ref], others])
        grids.append(g)
        pos = np.searchsorted(others, X[:, m])
        idx[:, m] = np.where(X[:, m] == ref, 0, pos + 1)
    disp = idx > 0
    mcs = {tuple(np.flatnonzero(r).tolist()) for r in np.unique(disp, axis=0)}
    mcr = ModeCombinationRange(D, mcs)
    grid = IncompleteGrid(GridShape(grids), mcr)
    order = grid.flat_indices(idx)
    if order.min() < 0:
        raise GridError(f"row {int(np.argmin(order))} does not lie on the inferred grid")
    counts = np.bincount(order, minlength=grid.total)
    if np.any(counts > 1):
        i = int(np.flatnonzero(counts > 1)[0])
        rows = np.flatnonzero(order == i)[:2].tolist()
        raise GridError(f"rows {rows} repeat the same grid point")
    if order.size != grid.total:
        i = int(np.flatnonzero(counts == 0)[0])
        mc, a = grid.multi_index(i)
        raise GridError(
            f"incomplete subgrid: {grid.total - order.size} points missing, first at {format_mc(mc)} index {list(a)}"
        )
    return grid, order


def match_points(grid: IncompleteGrid, X, atol: float = 0.0) -> np.ndarray:
    """Canonical flat index of each row of ``X`` on ``grid``, -1 where off-grid."""
    X = check_points(X, grid.D)
    idx = np.empty(X.shape, dtype=np.int64)
    ok = np.ones(X.shape[0], dtype=bool)
    for m, g in enumerate(grid.shape.grids_1d):
        d = np.abs(X[:, m][:, None] - g[None, :])
        j = d.argmin(axis=1)
        idx[:, m] = j
        ok &= d[np.arange(X.shape[0]), j] <= atol
    out = grid.flat_indices(idx)
    out[~ok] = -1
    return out
