"""Structured matrix-vector products over incomplete grids.

Every public routine takes flat vectors in canonical order, either a single
vector of shape ``(N,)`` or a batch of shape ``(N, r)``, and returns a new
array of the same kind.  ``McrTensor`` objects are accepted wherever an array
is.

Internally the kernel matrix is applied as ``L M U``.  ``U`` and ``L`` are
subset/superset sums over the grid (``O(alpha N)``); ``M`` is a sum over
kernel terms, each acting as a dense Kronecker product on the complete
subgrid spanned by the subsets of its mode combination.  Terms with equal
extents are processed together, in row chunks, with batched ``matmul``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .grid import GridError, IncompleteGrid, McrTensor
from .kernel import AdditiveKernel, KernelError

__all__ = [
    "OneModeBlocks",
    "one_mode_contract",
    "mvp_L",
    "mvp_U",
    "mvp_M",
    "mvp_K",
    "mvp_C",
    "mvp_dC",
    "quadratic_terms",
    "kernel_column",
    "kernel_columns",
    "cross_column",
    "cross_columns",
    "cross_dot",
    "column_forms",
    "prior_variance_at",
    "kernel_diagonal",
    "parse_theta",
    "theta_names",
    "n_theta",
    "DIAG_EPS",
]

CHUNK_ELEMENTS = 1 << 21
DIAG_EPS = 1e-12


# ---------------------------------------------------------------------------
# hyperparameter ids


def n_theta(kernel: AdditiveKernel) -> int:
    return kernel.omega + 1 + kernel.D + 1


def theta_names(kernel: AdditiveKernel) -> list[str]:
    """Row labels of :func:`quadratic_terms` output (1-based modes)."""
    return kernel.describe_hyperparameters()


def parse_theta(kernel: AdditiveKernel, theta) -> tuple:
    """Normalize a hyperparameter id.

    Accepted forms: ``"noise"``, ``("sigma2", k)``, ``("ell", m)`` with 0-based
    ``m``, or an integer row of :func:`theta_names`.
    """
    if isinstance(theta, (int, np.integer)):
        t = int(theta)
        if 0 <= t <= kernel.omega:
            return ("sigma2", t)
        if kernel.omega < t <= kernel.omega + kernel.D:
            return ("ell", t - kernel.omega - 1)
        if t == kernel.omega + kernel.D + 1:
            return ("noise",)
        raise KernelError(f"unknown hyperparameter index {theta}")
    if theta == "noise" or theta == ("noise",):
        return ("noise",)
    if isinstance(theta, tuple) and len(theta) == 2:
        kind, k = theta
        if kind == "sigma2" and int(k) >= 0:
            return ("sigma2", int(k))
        if kind == "ell" and 0 <= int(k) < kernel.D:
            return ("ell", int(k))
    raise KernelError(f"unknown hyperparameter {theta!r}")


# ---------------------------------------------------------------------------
# one-mode blocks and the chopped contraction


@dataclass(frozen=True)
class OneModeBlocks:
    """Partition ``[[p, d], [u, F]]`` of an ``n x n`` one-mode matrix."""

    mode: int
    p: float
    d: np.ndarray
    u: np.ndarray
    F: np.ndarray

    @classmethod
    def from_matrix(cls, mode: int, A) -> "OneModeBlocks":
        A = np.asarray(A, dtype=float)
        return cls(mode, float(A[0, 0]), A[0, 1:].copy(), A[1:, 0].copy(), A[1:, 1:].copy())

    def matrix(self) -> np.ndarray:
        n = self.F.shape[0] + 1
        A = np.empty((n, n))
        A[0, 0] = self.p
        A[0, 1:] = self.d
        A[1:, 0] = self.u
        A[1:, 1:] = self.F
        return A


def _lower_blocks(mode, n):
    return OneModeBlocks(mode, 1.0, np.zeros(n - 1), np.ones(n - 1), np.eye(n - 1))


def _upper_blocks(mode, n):
    return OneModeBlocks(mode, 1.0, np.ones(n - 1), np.zeros(n - 1), np.eye(n - 1))


def one_mode_contract(blocks: OneModeBlocks, v, w, grid: IncompleteGrid | None = None) -> None:
    """Accumulate the chopped one-mode product into ``w`` in place.

    Direct realization of the down/forward/passive/up scheme, one mode
    combination at a time.  It is the reference path; the batched products
    below do not go through it.
    """
    grid = grid if grid is not None else getattr(v, "grid", None) or getattr(w, "grid", None)
    if grid is None:
        raise GridError("need a grid (pass McrTensors or grid=)")
    for t in (v, w):
        if isinstance(t, McrTensor) and t.grid is not grid:
            raise GridError("v and w live on different grids")
    m = blocks.mode
    if not 0 <= m < grid.D:
        raise GridError(f"mode {m} outside [0, {grid.D})")
    if blocks.F.shape[0] != grid.n[m] - 1:
        raise GridError("block sizes do not match the 1D grid")
    V = v if isinstance(v, McrTensor) else McrTensor(grid, np.asarray(v, dtype=float))
    W = w if isinstance(w, McrTensor) else McrTensor(grid, w)
    for mc in grid.mcr:
        x = V.subtensor(mc)
        if m in mc:
            i = mc.index(m)
            W.subtensor(mc)[...] += np.moveaxis(np.tensordot(blocks.F, x, axes=([1], [i])), 0, i)
            down = mc[:i] + mc[i + 1 :]
            W.subtensor(down)[...] += np.tensordot(blocks.d, x, axes=([0], [i]))
        else:
            W.subtensor(mc)[...] += blocks.p * x
            up = tuple(sorted(mc + (m,)))
            if up in grid.mcr:
                i = up.index(m)
                shape = [1] * (x.ndim + 1)
                shape[i] = blocks.u.size
                W.subtensor(up)[...] += np.expand_dims(x, i) * blocks.u.reshape(shape)


# ---------------------------------------------------------------------------
# layout helpers


def _prep(grid: IncompleteGrid, v, copy=False):
    arr = np.asarray(v, dtype=float)
    if arr.ndim not in (1, 2) or arr.shape[0] != grid.total:
        raise GridError(f"expected shape ({grid.total},) or ({grid.total}, r), got {arr.shape}")
    squeeze = arr.ndim == 1
    arr = arr.reshape(grid.total, -1)
    if grid.perm is not None:
        return arr[grid.perm], squeeze
    return (arr.copy() if copy else arr), squeeze


def _finish(grid: IncompleteGrid, f: np.ndarray, squeeze: bool):
    out = grid.to_canonical(f)
    return out[:, 0] if squeeze else out


def _block(grid: IncompleteGrid, f: np.ndarray, gi: int) -> np.ndarray:
    g = grid.groups[gi]
    return f[g.start : g.start + g.count * g.size].reshape((g.count,) + g.ext + (f.shape[1],))


def _scatter_rows(target: np.ndarray, idx: np.ndarray, vals: np.ndarray) -> None:
    """``target[idx[i]] += vals[i]`` with repeated indices summed."""
    G = idx.shape[0]
    if G == 0:
        return
    S = sp.csc_matrix((np.ones(G), idx, np.arange(G + 1)), shape=(target.shape[0], G))
    flat = target.reshape(target.shape[0], -1)
    flat += S @ vals.reshape(G, -1)


def _chunks(total: int, per_row: int, r: int):
    step = max(1, CHUNK_ELEMENTS // max(1, per_row * r))
    for c0 in range(0, total, step):
        yield slice(c0, min(total, c0 + step))


# ---------------------------------------------------------------------------
# L and U


def _lu_plan(grid: IncompleteGrid) -> dict:
    plan = grid.__dict__.get("_lu_plan")
    if plan is not None:
        return plan
    plan = {}
    for gi, g in enumerate(grid.groups):
        if g.order == 0 or g.count == 0:
            continue
        k = g.order
        full = (1 << k) - 1
        for p in range(k):
            sub = grid.mcr.submap(k, full & ~(1 << p))[g.members]
            tg = grid.mc_group[k - 1][sub]
            tl = grid.mc_local[k - 1][sub]
            plan[(gi, p)] = (int(tg[0]), tl)
    grid._lu_plan = plan
    return plan


def _groups_by_order(grid):
    cached = grid.__dict__.get("_groups_by_order")
    if cached is None:
        cached = [grid.groups_of_order(k) for k in range(grid.mcr.alpha + 1)]
        grid._groups_by_order = cached
    return cached


def _apply_L(grid: IncompleteGrid, f: np.ndarray) -> np.ndarray:
    """In place: subset sum, out(S, a) = sum over R subset of S of f(R, a|R)."""
    plan = _lu_plan(grid)
    by_order = _groups_by_order(grid)
    alpha = grid.mcr.alpha
    for p in range(alpha):
        for k in range(alpha, p, -1):
            for gi in by_order[k]:
                if grid.groups[gi].count == 0:
                    continue
                tg, tl = plan[(gi, p)]
                src = _block(grid, f, tg)[tl]
                dst = _block(grid, f, gi)
                dst += np.expand_dims(src, 1 + p)
    return f


def _apply_U(grid: IncompleteGrid, f: np.ndarray) -> np.ndarray:
    """In place: superset sum over the grid, the transpose of :func:`_apply_L`."""
    plan = _lu_plan(grid)
    by_order = _groups_by_order(grid)
    alpha = grid.mcr.alpha
    for p in range(alpha - 1, -1, -1):
        for k in range(p + 1, alpha + 1):
            for gi in by_order[k]:
                if grid.groups[gi].count == 0:
                    continue
                tg, tl = plan[(gi, p)]
                s = _block(grid, f, gi).sum(axis=1 + p)
                _scatter_rows(_block(grid, f, tg), tl, s)
    return f


def _modewise(grid, f, make_blocks):
    for m in range(grid.D):
        w = np.zeros_like(f)
        one_mode_contract(make_blocks(m, grid.n[m]), McrTensor(grid, f), McrTensor(grid, w), grid)
        f = w
    return f


def mvp_L(grid: IncompleteGrid, v, method: str = "fast") -> np.ndarray:
    """Chopped ``L = prod_m (I + D^[m])`` times ``v``.

    ``method="modewise"`` applies one chopped one-mode contraction per mode
    in ascending order; ``"fast"`` sums over subsets directly.
    """
    if method == "modewise":
        arr = np.array(v, dtype=float)
        return _modewise(grid, arr, _lower_blocks)
    f, squeeze = _prep(grid, v, copy=True)
    return _finish(grid, _apply_L(grid, f), squeeze)


def mvp_U(grid: IncompleteGrid, v, method: str = "fast") -> np.ndarray:
    """Chopped ``U = prod_m (I + S^[m])`` times ``v`` (``U = L^T``)."""
    if method == "modewise":
        arr = np.array(v, dtype=float)
        return _modewise(grid, arr, _upper_blocks)
    f, squeeze = _prep(grid, v, copy=True)
    return _finish(grid, _apply_U(grid, f), squeeze)


# ---------------------------------------------------------------------------
# kernel-term plan


@dataclass
class _KGroup:
    order: int
    full: tuple  # complete-subgrid extents n_m per axis
    modes: np.ndarray  # (G, order)
    targets: list  # per subset mask Q: (grid group, local rows)
    index: list  # per mask: tuple of per-axis slices into the full tensor
    fullmask: int

    @property
    def count(self):
        return self.modes.shape[0]

    @property
    def cells(self):
        c = 1
        for n in self.full:
            c *= n
        return c


def _kernel_plan(grid: IncompleteGrid, kmcr) -> list[_KGroup]:
    cache = grid.__dict__.setdefault("_kplans", {})
    hit = cache.get(id(kmcr))
    if hit is not None and hit[0] is kmcr:
        return hit[1]
    plan = []
    for j in range(kmcr.alpha + 1):
        rows = kmcr.order_array(j)
        if rows.shape[0] == 0:
            continue
        gl = grid.mcr.lookup(j, rows)
        gids = grid.mc_group[j][gl]
        for gi in np.unique(gids):
            sel = np.flatnonzero(gids == gi)
            gsel = gl[sel]
            g = grid.groups[int(gi)]
            # empty subtensors (a single-point mode) still carry the
            # all-reference part of their kernel terms
            targets, index = [], []
            for Q in range(1 << j):
                sub = grid.mcr.submap(j, Q)[gsel]
                q = bin(Q).count("1")
                tg = grid.mc_group[q][sub]
                tl = grid.mc_local[q][sub]
                targets.append((int(tg[0]), tl))
                index.append(tuple(slice(1, None) if Q >> i & 1 else 0 for i in range(j)))
            plan.append(_KGroup(j, tuple(e + 1 for e in g.ext), rows[sel], targets, index, (1 << j) - 1))
    cache[id(kmcr)] = (kmcr, plan)
    return plan


def _stacks(kernel: AdditiveKernel, name: str) -> dict:
    """Per-size ``(D, n, n)`` stacks of ``M`` or ``dM`` (zeros for other sizes)."""
    key = "stack_" + name
    st = kernel._cache.get(key)
    if st is None:
        mats = kernel.M if name == "M" else kernel.dM
        st = {}
        for n in set(kernel.grid.n):
            arr = np.zeros((kernel.D, n, n))
            for m in range(kernel.D):
                if kernel.grid.n[m] == n:
                    arr[m] = mats[m]
            st[n] = arr
        kernel._cache[key] = st
    return st


def _gather_full(grid, kg: _KGroup, f, rows) -> np.ndarray:
    tl0 = kg.targets[0][1][rows]
    c = tl0.shape[0]
    X = np.zeros((c,) + kg.full + (f.shape[1],))
    for Q, (tg, tl) in enumerate(kg.targets):
        X[(slice(None),) + kg.index[Q]] = _block(grid, f, tg)[tl[rows]]
    return X


def _scatter_full(grid, kg: _KGroup, X, out, rows) -> None:
    for Q, (tg, tl) in enumerate(kg.targets):
        Y = X[(slice(None),) + kg.index[Q]]
        tb = _block(grid, out, tg)
        if Q == kg.fullmask:
            tb[tl[rows]] += Y
        else:
            _scatter_rows(tb, tl[rows], Y)


def _mode_product(X: np.ndarray, mats: np.ndarray, axis: int) -> np.ndarray:
    """``Y[c, ..., b, ...] = sum_a mats[c, b, a] X[c, ..., a, ...]`` on tensor axis ``axis``."""
    c = X.shape[0]
    n = X.shape[1 + axis]
    if axis == 0:
        return np.matmul(mats, X.reshape(c, n, -1)).reshape(X.shape)
    if axis == X.ndim - 3 and X.shape[-1] == 1:
        return np.matmul(X.reshape(c, -1, n), mats.transpose(0, 2, 1)).reshape(X.shape)
    Xm = np.moveaxis(X, 1 + axis, 1)
    shape = Xm.shape
    Y = np.matmul(mats, Xm.reshape(c, n, -1)).reshape(shape)
    return np.moveaxis(Y, 1, 1 + axis)


def _axis_mats(kernel, kg: _KGroup, rows, axis: int, dmode: int | None = None):
    n = kg.full[axis]
    modes = kg.modes[rows, axis]
    mats = _stacks(kernel, "M")[n][modes]
    if dmode is not None:
        hit = modes == dmode
        if hit.any():
            mats[hit] = kernel.dM[dmode]
    return mats


def _apply_terms(kernel: AdditiveKernel, f, out, which=("K",)) -> None:
    """``out += M-part(f)`` for the selected kernel terms.

    ``which``: ``("K",)`` all terms with their order variances;
    ``("sigma2", k)`` order-``k`` terms with unit weight;
    ``("ell", m)`` terms containing ``m`` with ``dM`` in mode ``m``.
    """
    grid = kernel.grid
    r = f.shape[1]
    for kg in _kernel_plan(grid, kernel.mcr):
        j = kg.order
        dmode = None
        if which[0] == "K":
            coef = float(kernel.sigma2[j])
            rowsel = None
        elif which[0] == "sigma2":
            if j != which[1]:
                continue
            coef = 1.0
            rowsel = None
        else:
            dmode = which[1]
            coef = float(kernel.sigma2[j])
            rowsel = np.flatnonzero((kg.modes == dmode).any(axis=1))
            if rowsel.size == 0:
                continue
        if coef == 0.0:
            continue
        total = kg.count if rowsel is None else rowsel.size
        for ch in _chunks(total, kg.cells, r):
            rows = ch if rowsel is None else rowsel[ch]
            X = _gather_full(grid, kg, f, rows)
            for i in range(j):
                X = _mode_product(X, _axis_mats(kernel, kg, rows, i, dmode), i)
            if coef != 1.0:
                X *= coef
            _scatter_full(grid, kg, X, out, rows)


# ---------------------------------------------------------------------------
# public products


def mvp_M(kernel: AdditiveKernel, v) -> np.ndarray:
    """``sum_terms sigma2 M^[mc] R^[not mc]`` times ``v``."""
    f, squeeze = _prep(kernel.grid, v)
    out = np.zeros_like(f)
    _apply_terms(kernel, f, out)
    return _finish(kernel.grid, out, squeeze)


def _K_internal(kernel, f, which=("K",)):
    grid = kernel.grid
    u = _apply_U(grid, f.copy())
    out = np.zeros_like(u)
    _apply_terms(kernel, u, out, which)
    return _apply_L(grid, out)


def mvp_K(kernel: AdditiveKernel, v) -> np.ndarray:
    """Kernel matrix over the incomplete grid times ``v``, as ``L(M(U v))``."""
    f, squeeze = _prep(kernel.grid, v)
    return _finish(kernel.grid, _K_internal(kernel, f), squeeze)


def mvp_C(kernel: AdditiveKernel, noise: float, v) -> np.ndarray:
    """``(K + noise I) v``."""
    if noise < 0:
        raise KernelError("noise variance must be nonnegative")
    f, squeeze = _prep(kernel.grid, v)
    out = _K_internal(kernel, f)
    out += noise * f
    return _finish(kernel.grid, out, squeeze)


def mvp_dC(kernel: AdditiveKernel, theta, v) -> np.ndarray:
    """Derivative of ``C`` with respect to one hyperparameter, times ``v``."""
    t = parse_theta(kernel, theta)
    f, squeeze = _prep(kernel.grid, v)
    if t[0] == "noise":
        return _finish(kernel.grid, f.copy(), squeeze)
    if t[0] == "sigma2" and t[1] > kernel.omega:
        return _finish(kernel.grid, np.zeros_like(f), squeeze)
    return _finish(kernel.grid, _K_internal(kernel, f, t), squeeze)


def _contract(Xa: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Per-row, per-column inner products of two ``(c, ..., r)`` tensors."""
    c, r = Xa.shape[0], Xa.shape[-1]
    return np.einsum("cpr,cpr->cr", Xa.reshape(c, -1, r), Y.reshape(c, -1, r))


def quadratic_terms(kernel: AdditiveKernel, a, b, *, Ua=None, Ub=None) -> np.ndarray:
    """``a^T (dC/dtheta) b`` for every hyperparameter at once.

    Rows follow :func:`theta_names`: order variances, length scales, noise.
    Batched inputs ``(N, r)`` give an ``(n_theta, r)`` result (pairs of
    columns).  ``Ua``/``Ub`` may pass precomputed canonical ``U a``/``U b``.
    """
    grid = kernel.grid
    fa, squeeze = _prep(grid, a)
    fb, _ = _prep(grid, b)
    if fa.shape != fb.shape:
        raise GridError("a and b must have the same shape")
    r = fa.shape[1]
    ua = _prep(grid, Ua)[0] if Ua is not None else _apply_U(grid, fa.copy())
    ub = _prep(grid, Ub)[0] if Ub is not None else _apply_U(grid, fb.copy())
    sig = np.zeros((kernel.omega + 1, r))
    ell = np.zeros((kernel.D, r))
    D = kernel.D
    for kg in _kernel_plan(grid, kernel.mcr):
        j = kg.order
        s2 = float(kernel.sigma2[j])
        for rows in _chunks(kg.count, kg.cells, r):
            Xa = _gather_full(grid, kg, ua, rows)
            Xb = _gather_full(grid, kg, ub, rows)
            if j == 0:
                sig[0] += _contract(Xa, Xb).sum(axis=0)
                continue
            mats = [_axis_mats(kernel, kg, rows, i) for i in range(j)]
            dmats = [_stacks(kernel, "dM")[kg.full[i]][kg.modes[rows, i]] for i in range(j)]
            # M is symmetric, so half of the factors can act on Xa instead of Xb
            half = j // 2
            A = Xa
            for i in range(half):
                A = _mode_product(A, mats[i], i)
            B = Xb
            for i in range(half, j):
                B = _mode_product(B, mats[i], i)
            sig[j] += _contract(A, B).sum(axis=0)
            if s2 == 0.0:
                continue
            for i in range(j):
                if i < half:
                    Ai = Xa
                    for t in range(half):
                        Ai = _mode_product(Ai, dmats[t] if t == i else mats[t], t)
                    vals = _contract(Ai, B)
                else:
                    Bi = Xb
                    for t in range(half, j):
                        Bi = _mode_product(Bi, dmats[t] if t == i else mats[t], t)
                    vals = _contract(A, Bi)
                vals *= s2
                modes = kg.modes[rows, i]
                for col in range(r):
                    ell[:, col] += np.bincount(modes, weights=vals[:, col], minlength=D)
    noise = np.einsum("nr,nr->r", fa, fb)
    out = np.concatenate([sig, ell, noise[None, :]], axis=0)
    return out[:, 0] if squeeze else out


# ---------------------------------------------------------------------------
# columns


def _vector_stacks(kernel: AdditiveKernel, vecs: list) -> dict:
    """Per-size ``(D, n, t)`` stacks from per-mode ``(n_m, t)`` arrays."""
    t = vecs[0].shape[1]
    st = {}
    for n in set(kernel.grid.n):
        arr = np.zeros((kernel.D, n, t))
        for m in range(kernel.D):
            if kernel.grid.n[m] == n:
                arr[m] = vecs[m]
        st[n] = arr
    return st


def _outer(vs: list) -> np.ndarray:
    """Per-row outer products: ``vs[i]`` has shape ``(c, n_i, t)``."""
    j = len(vs)
    c, t = vs[0].shape[0], vs[0].shape[-1]
    X = np.ones((c,) + (1,) * j + (t,))
    for i, v in enumerate(vs):
        shape = [c] + [1] * j + [t]
        shape[1 + i] = v.shape[1]
        X = X * v.reshape(shape)
    return X


def _outer_scatter(kernel: AdditiveKernel, vecs: list) -> np.ndarray:
    """Internal ``(N, t)`` array ``sum_terms sigma2 * outer(vecs)`` placed on each term's subgrid."""
    grid = kernel.grid
    t = vecs[0].shape[1]
    st = _vector_stacks(kernel, vecs)
    out = np.zeros((grid.total, t))
    for kg in _kernel_plan(grid, kernel.mcr):
        j = kg.order
        s2 = float(kernel.sigma2[j])
        if s2 == 0.0:
            continue
        for rows in _chunks(kg.count, kg.cells, t):
            if j == 0:
                c = kg.targets[0][1][rows].shape[0]
                X = np.ones((c, t))
            else:
                X = _outer([st[kg.full[i]][kg.modes[rows, i]] for i in range(j)])
            X *= s2
            _scatter_full(grid, kg, X, out, rows)
    return out


def _column_vectors(kernel: AdditiveKernel, idx: np.ndarray, mats=None) -> list:
    """Per mode ``(n_m, t)``: ``M[:, 0] + M[:, i_m]`` if displaced else ``M[:, 0]``."""
    mats = kernel.M if mats is None else mats
    vecs = []
    for m in range(kernel.D):
        A = mats[m]
        im = idx[:, m]
        v = np.repeat(A[:, :1], idx.shape[0], axis=1)
        hit = im > 0
        v[:, hit] += A[:, im[hit]]
        vecs.append(v)
    return vecs


def kernel_columns(kernel: AdditiveKernel, indices: Sequence[int]) -> np.ndarray:
    """Columns of the grid kernel matrix, shape ``(N, t)``, in ``O(alpha N)`` each."""
    grid = kernel.grid
    indices = np.atleast_1d(np.asarray(indices, dtype=np.int64))
    if indices.size and (indices.min() < 0 or indices.max() >= grid.total):
        raise GridError(f"column index outside [0, {grid.total})")
    idx = np.vstack([grid.index_matrix(int(i), int(i) + 1) for i in indices]) if indices.size else np.zeros((0, grid.D), int)
    out = _outer_scatter(kernel, _column_vectors(kernel, idx))
    _apply_L(grid, out)
    return grid.to_canonical(out)


def kernel_column(kernel: AdditiveKernel, i: int) -> np.ndarray:
    """Column ``i`` of the grid kernel matrix."""
    return kernel_columns(kernel, [i])[:, 0]


def _reduced_cross(kernel: AdditiveKernel, x_test: np.ndarray) -> list:
    """Per mode ``(I - D) c``: row 0 kept, rows 1.. minus row 0."""
    vecs = []
    for m in range(kernel.D):
        xs = x_test[:, m]
        uniq, inv = np.unique(xs, return_inverse=True)
        C = kernel.cross_base(m, uniq)
        C[1:] -= C[0]
        vecs.append(C[:, inv.reshape(-1)])
    return vecs


def _check_points(kernel, x_test):
    x = np.asarray(x_test, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != kernel.D:
        raise GridError(f"test points need {kernel.D} coordinates")
    return x


def cross_columns(kernel: AdditiveKernel, x_test) -> np.ndarray:
    """Train-test kernel columns, shape ``(N, t)``; works for arbitrary coordinates."""
    x = _check_points(kernel, x_test)
    out = _outer_scatter(kernel, _reduced_cross(kernel, x))
    _apply_L(kernel.grid, out)
    return kernel.grid.to_canonical(out)


def cross_column(kernel: AdditiveKernel, x_star) -> np.ndarray:
    """Train-test kernel column for one test point."""
    return cross_columns(kernel, np.asarray(x_star, dtype=float).reshape(1, -1))[:, 0]


def _outer_dot(kernel: AdditiveKernel, F: np.ndarray, vecs: list) -> np.ndarray:
    """``sum_terms sigma2 <gather(F), outer(vecs)>`` per item; ``F`` internal ``(N, 1)``."""
    grid = kernel.grid
    t = vecs[0].shape[1]
    st = _vector_stacks(kernel, vecs)
    res = np.zeros(t)
    for kg in _kernel_plan(grid, kernel.mcr):
        j = kg.order
        s2 = float(kernel.sigma2[j])
        if s2 == 0.0:
            continue
        for rows in _chunks(kg.count, kg.cells, t):
            X = _gather_full(grid, kg, F, rows)[..., 0]  # (c, *full)
            if j == 0:
                res += s2 * X.sum()
                continue
            # contract the last tensor axis first, keeping the item axis
            Y = np.einsum("c...a,cat->c...t", X, st[kg.full[j - 1]][kg.modes[rows, j - 1]])
            for i in range(j - 2, -1, -1):
                Y = np.einsum("c...at,cat->c...t", Y, st[kg.full[i]][kg.modes[rows, i]])
            res += s2 * Y.sum(axis=0)
    return res


def cross_dot(kernel: AdditiveKernel, weights, x_test, *, Uweights=None) -> np.ndarray:
    """``k_*^T weights`` for many test points without forming the columns.

    Uses ``k_*^T w = x_*^T (U w)`` where ``x_*`` is the pre-``L`` column.
    """
    x = _check_points(kernel, x_test)
    if Uweights is None:
        f, _ = _prep(kernel.grid, weights, copy=True)
        Uw = _apply_U(kernel.grid, f)
    else:
        Uw = _prep(kernel.grid, Uweights)[0]
    return _outer_dot(kernel, Uw, _reduced_cross(kernel, x))


def prior_variance_at(kernel: AdditiveKernel, x_test) -> np.ndarray:
    """Prior variance ``k(x, x)`` of the (centered) additive kernel at test points."""
    x = _check_points(kernel, x_test)
    t = x.shape[0]
    kss = np.empty((kernel.D, t))
    for m in range(kernel.D):
        uniq, inv = np.unique(x[:, m], return_inverse=True)
        kss[m] = kernel.test_diag_base(m, uniq)[inv.reshape(-1)]
    out = np.zeros(t)
    for j in range(kernel.omega + 1):
        rows = kernel.mcr.order_array(j)
        if rows.shape[0] == 0 or kernel.sigma2[j] == 0:
            continue
        if j == 0:
            out += kernel.sigma2[0] * rows.shape[0]
            continue
        step = max(1, CHUNK_ELEMENTS // max(1, t * j))
        for c0 in range(0, rows.shape[0], step):
            rr = rows[c0 : c0 + step]
            prod = np.ones((rr.shape[0], t))
            for i in range(j):
                prod *= kss[rr[:, i]]
            out += kernel.sigma2[j] * prod.sum(axis=0)
    return out


# ---------------------------------------------------------------------------
# derivative columns (used by the preconditioner trace terms)


def column_forms(kernel: AdditiveKernel, X, indices) -> np.ndarray:
    """``x_t^T (dK/dtheta) e_{i_t}`` for all hyperparameters and items ``t``.

    ``X`` is canonical ``(N, t)``, ``indices`` has length ``t``.  Returns
    ``(n_theta, t)`` with the noise row set to ``X[i_t, t]``.
    """
    grid = kernel.grid
    indices = np.asarray(indices, dtype=np.int64)
    F, _ = _prep(grid, X, copy=True)
    F = _apply_U(grid, F)
    t = F.shape[1]
    idx = np.vstack([grid.index_matrix(int(i), int(i) + 1) for i in indices]) if t else np.zeros((0, grid.D), int)
    st = _vector_stacks(kernel, _column_vectors(kernel, idx))
    dst = _vector_stacks(kernel, _column_vectors(kernel, idx, kernel.dM))
    sig = np.zeros((kernel.omega + 1, t))
    ell = np.zeros((kernel.D, t))
    letters = "abdefghijklmnopqrsuvwxyz"
    for kg in _kernel_plan(grid, kernel.mcr):
        j = kg.order
        s2 = float(kernel.sigma2[j])
        for rows in _chunks(kg.count, kg.cells, t):
            Xg = _gather_full(grid, kg, F, rows)  # (c, *full, t)
            if j == 0:
                sig[0] += Xg.sum(axis=0)
                continue
            V = [st[kg.full[i]][kg.modes[rows, i]] for i in range(j)]
            dV = [dst[kg.full[i]][kg.modes[rows, i]] for i in range(j)]
            ax = letters[:j]
            spec = "c" + ax + "t," + ",".join("c" + a + "t" for a in ax) + "->ct"
            sig[j] += np.einsum(spec, Xg, *V, optimize=True).sum(axis=0)
            if s2 == 0.0:
                continue
            for i in range(j):
                ops = [dV[q] if q == i else V[q] for q in range(j)]
                vals = s2 * np.einsum(spec, Xg, *ops, optimize=True)
                modes = kg.modes[rows, i]
                for col in range(t):
                    ell[:, col] += np.bincount(modes, weights=vals[:, col], minlength=kernel.D)
    Xc = np.asarray(X, dtype=float).reshape(grid.total, -1)
    noise = Xc[indices, np.arange(t)] if t else np.zeros(0)
    return np.concatenate([sig, ell, noise[None, :]], axis=0)


# ---------------------------------------------------------------------------
# diagonal


def _mc_superset_sum(mcr, f: list, weight=None) -> list:
    """Superset sums over mode-combination scalars, ``f`` one array per order.

    With ``weight`` (per mode), each removed mode multiplies the carried
    value by ``weight[mode]``.
    """
    alpha = mcr.alpha
    for p in range(alpha - 1, -1, -1):
        for k in range(p + 1, alpha + 1):
            if f[k].size == 0:
                continue
            full = (1 << k) - 1
            sub = mcr.submap(k, full & ~(1 << p))
            vals = f[k] if weight is None else f[k] * weight[mcr.order_array(k)[:, p]]
            f[k - 1] += np.bincount(sub, weights=vals, minlength=f[k - 1].size)
    return f


def kernel_diagonal(kernel: AdditiveKernel, return_info: bool = False, force_fallback: bool = False):
    """Exact diagonal of the grid kernel matrix in ``O(alpha 2^alpha N)``.

    The main path divides by each mode's ``K_00``.  If some ``|K_00|`` is at
    most ``DIAG_EPS * max_j |K_jj|`` (centering can drive it to zero) a
    division-free variant of the same recursion is used instead and the
    affected modes are reported in ``info``.
    """
    grid = kernel.grid
    mcr = grid.mcr
    D = kernel.D
    K00 = np.array([kernel.K[m][0, 0] for m in range(D)])
    scale = np.array([np.abs(np.diag(kernel.K[m])).max() for m in range(D)])
    bad = np.flatnonzero(np.abs(K00) <= DIAG_EPS * scale)
    fallback = bool(force_fallback or bad.size)
    # per grid member: order variance if it is a kernel term, else 0
    coef = []
    for k in range(mcr.alpha + 1):
        rows = mcr.order_array(k)
        c = np.zeros(rows.shape[0])
        if k <= kernel.omega and rows.shape[0]:
            hit = kernel.mcr.lookup(k, rows) >= 0
            c[hit] = kernel.sigma2[k]
        coef.append(c)
    if fallback:
        Y = _mc_superset_sum(mcr, coef, weight=K00)
    else:
        P = [c * np.prod(K00[mcr.order_array(k)], axis=1) if k else c for k, c in enumerate(coef)]
        Y = _mc_superset_sum(mcr, P)
    ratio = []
    for m in range(D):
        d = np.diag(kernel.K[m])[1:]
        ratio.append((d if fallback else d / K00[m]).reshape(-1, 1))
    rst = _vector_stacks(kernel, [np.concatenate([[[0.0]], r]) for r in ratio])
    out = np.zeros((grid.total, 1))
    for gi, g in enumerate(grid.groups):
        if g.count == 0 or g.size == 0:
            continue
        k = g.order
        modes = grid.group_modes(gi)
        X = {}
        masks = sorted(range(1 << k), key=lambda q: -bin(q).count("1"))
        full = (1 << k) - 1
        for Q in masks:
            x = Y[bin(Q).count("1")][mcr.submap(k, Q)[g.members]].copy()
            # subtract every strict superset T of Q within the member
            rest = full & ~Q
            T = rest
            while T:
                S = Q | T
                w = X[S]
                if fallback:
                    extra = [p for p in range(k) if T >> p & 1]
                    w = w * np.prod(K00[modes[:, extra]], axis=1)
                x -= w
                T = (T - 1) & rest
            X[Q] = x
        blk = _block(grid, out, gi)[..., 0]
        for Q, x in X.items():
            term = x.reshape((g.count,) + (1,) * k)
            for p in range(k):
                if Q >> p & 1:
                    rp = rst[g.ext[p] + 1][modes[:, p], 1:, 0]  # (G, ext_p)
                    shape = [g.count] + [1] * k
                    shape[1 + p] = g.ext[p]
                    term = term * rp.reshape(shape)
            blk += term
    diag = grid.to_canonical(out)[:, 0]
    if return_info:
        return diag, {"fallback": fallback, "modes": [int(m) + 1 for m in bad]}
    return diag
