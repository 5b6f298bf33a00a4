"""Mode combinations, cut-based incomplete grids and their canonical element order.

A grid point is addressed by a mode combination ``mc`` (the sorted modes that
are displaced from the reference point) and a multi-index ``a`` holding one
nonzero 1D index per mode of ``mc``.  Canonical order sorts mode combinations
by ``(order, lexicographic modes)``; inside one subtensor elements are stored
row-major with modes ascending.  Every flat vector in this package uses that
order.

Modes are 0-based in code and 1-based in anything printed for humans.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from math import prod
from typing import Iterable, Iterator, Sequence

import numpy as np

__all__ = [
    "GridError",
    "GridOverflowError",
    "CutsReport",
    "ModeCombinationRange",
    "GridShape",
    "IncompleteGrid",
    "McrTensor",
    "build_simple_mcr",
    "validate_cuts",
    "grid_size",
    "format_mc",
]

UINT64_MAX = 2**64 - 1
_KEY_LIMIT = 2**62


class GridError(ValueError):
    """Invalid grid, mode combination or index."""


class GridOverflowError(OverflowError):
    """Grid size does not fit into 64-bit unsigned arithmetic."""


def format_mc(mc: Sequence[int]) -> str:
    """Human-facing 1-based rendering, e.g. ``(0, 2)`` -> ``"(1,3)"``."""
    return "(" + ",".join(str(m + 1) for m in mc) + ")"


def _canonical_key(mc):
    return (len(mc), tuple(mc))


def _encode(rows: np.ndarray, D: int):
    """Integer keys for equal-length mode rows; lexicographic order is preserved."""
    k = rows.shape[1]
    if k == 0:
        return np.zeros(rows.shape[0], dtype=np.int64)
    if D**k >= _KEY_LIMIT:
        return None
    weights = D ** np.arange(k - 1, -1, -1, dtype=np.int64)
    return rows.astype(np.int64) @ weights


@dataclass(frozen=True)
class CutsReport:
    """Outcome of a closed-under-subsets check."""

    ok: bool
    member: tuple | None = None
    missing: tuple | None = None

    def __bool__(self):
        return self.ok

    def __str__(self):
        if self.ok:
            return "ok"
        return f"violation: {format_mc(self.member)} present but subset {format_mc(self.missing)} missing"


class ModeCombinationRange:
    """Canonically ordered, subset-closed set of mode combinations.

    Parameters
    ----------
    D : int
        Number of modes.
    mcs : iterable of sequences of int
        Mode combinations (0-based).  Order and duplicates in the input are
        rejected/normalized as follows: each combination must be strictly
        increasing, duplicates raise, and the result is sorted canonically.

    Notes
    -----
    Storage is one ``(G_k, k)`` integer array per order ``k``, in canonical
    order, so that very large ranges (hundreds of thousands of members) stay
    cheap.  ``mcs`` materializes Python tuples lazily.
    """

    def __init__(self, D: int, mcs: Iterable[Sequence[int]] | None = None, *, _orders=None):
        if D < 0:
            raise GridError("D must be nonnegative")
        self.D = int(D)
        if _orders is None:
            items = [tuple(int(m) for m in mc) for mc in mcs]
            for mc in items:
                if any(b <= a for a, b in zip(mc, mc[1:])):
                    raise GridError(f"mode combination {mc} is not strictly increasing")
                if mc and (mc[0] < 0 or mc[-1] >= self.D):
                    raise GridError(f"mode combination {mc} has modes outside [0, {self.D})")
            items.sort(key=_canonical_key)
            for a, b in zip(items, items[1:]):
                if a == b:
                    raise GridError(f"duplicate mode combination {format_mc(a)}")
            alpha = max((len(mc) for mc in items), default=-1)
            _orders = []
            for k in range(alpha + 1):
                rows = [mc for mc in items if len(mc) == k]
                _orders.append(np.array(rows, dtype=np.int64).reshape(len(rows), k))
        self._orders = [np.ascontiguousarray(o, dtype=np.int64) for o in _orders]
        for o in self._orders:
            o.setflags(write=False)
        self._keys = [_encode(o, self.D) for o in self._orders]
        self._dict = None
        self._mcs = None
        report = validate_cuts(self)
        if not report.ok:
            raise GridError(str(report))
        self.counts = np.array([o.shape[0] for o in self._orders], dtype=np.int64)
        self.starts = np.concatenate([[0], np.cumsum(self.counts)]).astype(np.int64)
        self._submaps: dict = {}

    # -- basic access -------------------------------------------------------
    @property
    def alpha(self) -> int:
        """Highest order present (-1 for an empty range)."""
        return len(self._orders) - 1

    def order_array(self, k: int) -> np.ndarray:
        """Read-only ``(G_k, k)`` array of order-``k`` members."""
        if k < 0 or k > self.alpha:
            return np.zeros((0, max(k, 0)), dtype=np.int64)
        return self._orders[k]

    @property
    def mcs(self) -> tuple:
        if self._mcs is None:
            self._mcs = tuple(tuple(int(x) for x in row) for o in self._orders for row in o)
        return self._mcs

    def __len__(self):
        return int(self.starts[-1])

    def __iter__(self) -> Iterator[tuple]:
        return iter(self.mcs)

    def __contains__(self, mc) -> bool:
        return self.find(mc) >= 0

    def __eq__(self, other):
        if not isinstance(other, ModeCombinationRange):
            return NotImplemented
        return self.D == other.D and len(self._orders) == len(other._orders) and all(
            np.array_equal(a, b) for a, b in zip(self._orders, other._orders)
        )

    def __hash__(self):
        return hash((self.D, tuple(o.tobytes() for o in self._orders)))

    def __repr__(self):
        if len(self) <= 12:
            body = ", ".join(format_mc(mc) for mc in self.mcs)
        else:
            body = f"{len(self)} combinations, max order {self.alpha}"
        return f"ModeCombinationRange(D={self.D}, {{{body}}})"

    def find(self, mc) -> int:
        """Canonical position of ``mc`` or -1."""
        mc = tuple(int(m) for m in mc)
        k = len(mc)
        if k > self.alpha or any(not 0 <= m < self.D for m in mc):
            return -1
        local = self.lookup(k, np.array([mc], dtype=np.int64).reshape(1, k))[0]
        return -1 if local < 0 else int(self.starts[k] + local)

    def index(self, mc) -> int:
        pos = self.find(mc)
        if pos < 0:
            raise GridError(f"mode combination {format_mc(mc)} is not in the range")
        return pos

    def lookup(self, k: int, rows: np.ndarray) -> np.ndarray:
        """Local indices (within order ``k``) of the given rows, -1 where absent."""
        rows = np.asarray(rows, dtype=np.int64)
        rows = rows.reshape(rows.shape[0] if rows.ndim else 1, k)
        if k > self.alpha or self._orders[k].shape[0] == 0:
            return np.full(rows.shape[0], -1, dtype=np.int64)
        keys = self._keys[k]
        if keys is not None:
            q = _encode(rows, self.D)
            pos = np.searchsorted(keys, q)
            pos = np.minimum(pos, len(keys) - 1)
            return np.where(keys[pos] == q, pos, -1).astype(np.int64)
        if self._dict is None:
            self._dict = {}
        table = self._dict.get(k)
        if table is None:
            table = {tuple(r): i for i, r in enumerate(self._orders[k].tolist())}
            self._dict[k] = table
        return np.array([table.get(tuple(r), -1) for r in rows.tolist()], dtype=np.int64)

    def submap(self, k: int, mask: int) -> np.ndarray:
        """For each order-``k`` member, local index of its sub-combination.

        ``mask`` selects positions (bit ``p`` keeps position ``p``); the
        result indexes the order ``popcount(mask)`` array.
        """
        key = (k, mask)
        cached = self._submaps.get(key)
        if cached is not None:
            return cached
        cols = [p for p in range(k) if mask >> p & 1]
        rows = self._orders[k][:, cols]
        out = self.lookup(len(cols), rows)
        if out.size and out.min() < 0:
            raise GridError("range is not closed under subsets")
        out.setflags(write=False)
        self._submaps[key] = out
        return out

    def issubset(self, other: "ModeCombinationRange") -> bool:
        if self.D != other.D:
            return False
        for k in range(self.alpha + 1):
            if k > other.alpha and self._orders[k].shape[0]:
                return False
            if self._orders[k].shape[0] and other.lookup(k, self._orders[k]).min() < 0:
                return False
        return True

    def to_list(self) -> list[list[int]]:
        return [list(mc) for mc in self.mcs]


def build_simple_mcr(D: int, alpha: int) -> ModeCombinationRange:
    """All mode combinations of order ``<= alpha`` over ``D`` modes."""
    if D <= 0:
        raise GridError("D must be positive")
    if alpha < 0 or alpha > D:
        raise GridError(f"cut level alpha={alpha} outside [0, D={D}]")
    orders = []
    for k in range(alpha + 1):
        count = _binom(D, k)
        flat = np.fromiter(
            itertools.chain.from_iterable(itertools.combinations(range(D), k)),
            dtype=np.int64,
            count=count * k,
        )
        orders.append(flat.reshape(count, k))
    return ModeCombinationRange(D, _orders=orders)


def _binom(n, k):
    from math import comb

    return comb(n, k)


def validate_cuts(mcr) -> CutsReport:
    """Check closure under subsets.

    Accepts a :class:`ModeCombinationRange` (its stored arrays are inspected)
    or any iterable of mode combinations.  Returns a report instead of
    raising.  Only immediate subsets need checking; by induction they imply
    closure.  The reported missing subset is the canonically smallest one at
    the lowest order where a gap appears.
    """
    if isinstance(mcr, ModeCombinationRange):
        orders = mcr._orders
        D = mcr.D
        keys = mcr._keys
    else:
        items = sorted({tuple(int(m) for m in mc) for mc in mcr}, key=_canonical_key)
        D = 1 + max((mc[-1] for mc in items if mc), default=0)
        alpha = max((len(mc) for mc in items), default=-1)
        orders = []
        for k in range(alpha + 1):
            rows = [mc for mc in items if len(mc) == k]
            orders.append(np.array(rows, dtype=np.int64).reshape(len(rows), k))
        keys = [_encode(o, D) for o in orders]
    if not orders:
        return CutsReport(True)
    if orders[0].shape[0] == 0 and any(o.shape[0] for o in orders):
        first = next(tuple(o[0]) for o in orders if o.shape[0])
        return CutsReport(False, tuple(int(x) for x in first), ())
    for k in range(1, len(orders)):
        rows = orders[k]
        if rows.shape[0] == 0:
            continue
        lower = orders[k - 1]
        missing = []
        for p in range(k):
            sub = np.delete(rows, p, axis=1)
            if lower.shape[0] == 0:
                bad = np.ones(rows.shape[0], dtype=bool)
            elif keys[k - 1] is not None:
                q = _encode(sub, D)
                pos = np.minimum(np.searchsorted(keys[k - 1], q), lower.shape[0] - 1)
                bad = keys[k - 1][pos] != q
            else:
                present = {tuple(r) for r in lower.tolist()}
                bad = np.array([tuple(r) not in present for r in sub.tolist()])
            for i in np.flatnonzero(bad):
                missing.append((tuple(int(x) for x in sub[i]), tuple(int(x) for x in rows[i])))
        if missing:
            miss, member = min(missing)
            return CutsReport(False, member, miss)
    return CutsReport(True)


def grid_size(mcr: ModeCombinationRange, n: Sequence[int]) -> int:
    """Exact number of grid points, sum over members of prod(n_m - 1).

    Raises :class:`GridOverflowError` if the count exceeds 2**64 - 1.
    """
    n = [int(x) for x in n]
    if len(n) != mcr.D:
        raise GridError(f"got {len(n)} grid sizes for D={mcr.D}")
    if any(x < 1 for x in n):
        raise GridError("every 1D grid needs at least one point")
    ext = np.array(n, dtype=object) - 1
    total = 0
    for k in range(mcr.alpha + 1):
        rows = mcr.order_array(k)
        if k == 0:
            total += rows.shape[0]
            continue
        if len(set(n)) == 1:
            total += rows.shape[0] * (n[0] - 1) ** k
        else:
            e = np.array(n, dtype=np.int64)[rows] - 1
            # products stay exact in Python ints
            total += sum(prod(int(x) for x in row) for row in e.tolist())
        if total > UINT64_MAX:
            raise GridOverflowError(f"grid size exceeds 2**64-1 (partial count {total})")
    return int(total)


class GridShape:
    """Per-mode 1D grids; entry 0 of each is the reference coordinate."""

    def __init__(self, grids_1d: Sequence[Sequence[float]]):
        grids = []
        for m, g in enumerate(grids_1d):
            arr = np.asarray(g, dtype=float).reshape(-1)
            if arr.size < 1:
                raise GridError(f"1D grid of mode {m + 1} is empty")
            if not np.all(np.isfinite(arr)):
                raise GridError(f"1D grid of mode {m + 1} has non-finite coordinates")
            if np.unique(arr).size != arr.size:
                raise GridError(f"1D grid of mode {m + 1} has repeated coordinates")
            arr.setflags(write=False)
            grids.append(arr)
        if not grids:
            raise GridError("need at least one mode")
        self.grids_1d = tuple(grids)
        self.n = tuple(int(g.size) for g in grids)
        self.D = len(grids)

    @classmethod
    def from_sizes(cls, n: Sequence[int]) -> "GridShape":
        """Integer coordinates ``0, 1, ..., n_m - 1`` per mode."""
        return cls([np.arange(int(k), dtype=float) for k in n])

    @property
    def reference(self) -> np.ndarray:
        return np.array([g[0] for g in self.grids_1d])

    def __eq__(self, other):
        if not isinstance(other, GridShape):
            return NotImplemented
        return self.n == other.n and all(np.array_equal(a, b) for a, b in zip(self.grids_1d, other.grids_1d))

    def __repr__(self):
        return f"GridShape(D={self.D}, n={self.n})"


@dataclass(frozen=True)
class _Group:
    """Members of one order sharing the same subtensor extents."""

    order: int
    ext: tuple
    members: np.ndarray  # local indices within the order, ascending
    start: int  # start in the internal layout
    size: int  # elements per subtensor
    contiguous_canonical: bool

    @property
    def count(self) -> int:
        return int(self.members.shape[0])


class IncompleteGrid:
    """A cut-based incomplete grid: a :class:`GridShape` plus a grid range.

    Attributes
    ----------
    total : int
        Number of grid points.
    offsets : ndarray
        Canonical flat offset of each member of the range.
    perm : ndarray or None
        Internal-to-canonical position map.  Internally members with equal
        extents are stored contiguously so they can be processed as one
        batch; with uniform 1D grid sizes this is the canonical layout itself
        and ``perm`` is ``None``.
    """

    def __init__(self, shape: GridShape, mcr: ModeCombinationRange):
        if shape.D != mcr.D:
            raise GridError(f"grid shape has D={shape.D} but range has D={mcr.D}")
        self.shape = shape
        self.mcr = mcr
        self.D = shape.D
        self.n = shape.n
        n_arr = np.array(shape.n, dtype=np.int64)
        self._n_arr = n_arr
        total = grid_size(mcr, shape.n)
        if total > np.iinfo(np.int64).max:
            raise GridOverflowError("grid too large to index with 64-bit signed offsets")
        self.total = total
        sizes = []
        for k in range(mcr.alpha + 1):
            rows = mcr.order_array(k)
            if k == 0:
                sizes.append(np.ones(rows.shape[0], dtype=np.int64))
            else:
                sizes.append(np.prod(n_arr[rows] - 1, axis=1).astype(np.int64))
        self.sizes = np.concatenate(sizes) if sizes else np.zeros(0, dtype=np.int64)
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)[:-1]]).astype(np.int64)
        self.offsets.setflags(write=False)
        self.sizes.setflags(write=False)
        self._build_groups()

    # -- grouping -----------------------------------------------------------
    def _build_groups(self):
        mcr = self.mcr
        self.groups: list[_Group] = []
        self.mc_group: list[np.ndarray] = []
        self.mc_local: list[np.ndarray] = []
        internal = 0
        identity = True
        for k in range(mcr.alpha + 1):
            rows = mcr.order_array(k)
            G = rows.shape[0]
            gid = np.zeros(G, dtype=np.int64)
            loc = np.zeros(G, dtype=np.int64)
            if k == 0 or len(set(self.n)) == 1:
                sig_ids = np.zeros(G, dtype=np.int64)
                sigs = [tuple([self.n[0] - 1] * k)] if G else []
            else:
                ext = self._n_arr[rows] - 1
                sigs_arr, sig_ids = np.unique(ext, axis=0, return_inverse=True)
                sig_ids = sig_ids.reshape(-1)
                # order groups by first appearance so the uniform case stays canonical
                first = np.array([np.flatnonzero(sig_ids == s)[0] for s in range(len(sigs_arr))])
                order = np.argsort(first)
                remap = np.empty_like(order)
                remap[order] = np.arange(len(order))
                sig_ids = remap[sig_ids]
                sigs = [tuple(int(x) for x in sigs_arr[o]) for o in order]
            base = int(self.mcr.starts[k])
            for s, sig in enumerate(sigs):
                members = np.flatnonzero(sig_ids == s).astype(np.int64)
                size = int(prod(sig)) if k else 1
                canon = self.offsets[base + members]
                contiguous = bool(canon[0] == internal and np.all(np.diff(canon) == size)) if members.size else True
                if not contiguous:
                    identity = False
                gid[members] = len(self.groups)
                loc[members] = np.arange(members.size)
                members.setflags(write=False)
                self.groups.append(_Group(k, sig, members, internal, size, contiguous))
                internal += size * members.size
            self.mc_group.append(gid)
            self.mc_local.append(loc)
        assert internal == self.total
        if identity:
            self.perm = None
        else:
            parts = []
            for g in self.groups:
                canon = self.offsets[int(self.mcr.starts[g.order]) + g.members]
                parts.append((canon[:, None] + np.arange(g.size)[None, :]).reshape(-1))
            self.perm = np.concatenate(parts).astype(np.int64)

    def groups_of_order(self, k: int) -> list[int]:
        return [i for i, g in enumerate(self.groups) if g.order == k]

    def to_internal(self, v: np.ndarray) -> np.ndarray:
        return v if self.perm is None else v[self.perm]

    def to_canonical(self, v: np.ndarray) -> np.ndarray:
        if self.perm is None:
            return v
        out = np.empty_like(v)
        out[self.perm] = v
        return out

    def group_modes(self, gi: int) -> np.ndarray:
        g = self.groups[gi]
        return self.mcr.order_array(g.order)[g.members]

    # -- indexing -----------------------------------------------------------
    def flat_index(self, mc: Sequence[int], a: Sequence[int] = ()) -> int:
        """Canonical flat index of grid point ``(mc, a)``."""
        mc = tuple(int(m) for m in mc)
        a = tuple(int(x) for x in a)
        pos = self.mcr.find(mc)
        if pos < 0:
            raise GridError(f"mode combination {format_mc(mc)} is not in the grid range")
        if len(a) != len(mc):
            raise GridError(f"need {len(mc)} indices for {format_mc(mc)}, got {len(a)}")
        idx = 0
        for m, am in zip(mc, a):
            e = self.n[m] - 1
            if not 1 <= am <= e:
                raise GridError(f"index {am} for mode {m + 1} outside [1, {e}]")
            idx = idx * e + (am - 1)
        return int(self.offsets[pos]) + idx

    def multi_index(self, i: int) -> tuple[tuple, tuple]:
        """Inverse of :meth:`flat_index`."""
        i = int(i)
        if not 0 <= i < self.total:
            raise GridError(f"flat index {i} outside [0, {self.total})")
        ends = self.offsets + self.sizes
        pos = int(np.searchsorted(ends, i, side="right"))
        mc = self.mcr.mcs[pos] if len(self.mcr) < 200000 else self._mc_at(pos)
        rem = i - int(self.offsets[pos])
        a = []
        for m in reversed(mc):
            e = self.n[m] - 1
            a.append(rem % e + 1)
            rem //= e
        return tuple(mc), tuple(reversed(a))

    def flat_indices(self, idx) -> np.ndarray:
        """Vectorized inverse of :meth:`index_matrix`; -1 for rows that are not grid points."""
        idx = np.asarray(idx, dtype=np.int64).reshape(-1, self.D)
        out = np.full(idx.shape[0], -1, dtype=np.int64)
        inside = np.all((idx >= 0) & (idx < self._n_arr), axis=1)
        disp = idx > 0
        order = disp.sum(axis=1)
        for k in range(self.mcr.alpha + 1):
            rows = np.flatnonzero(inside & (order == k))
            if rows.size == 0:
                continue
            modes = np.sort(np.where(disp[rows], np.arange(self.D), self.D), axis=1)[:, :k]
            local = self.mcr.lookup(k, modes)
            ok = local >= 0
            rows, modes, local = rows[ok], modes[ok], local[ok]
            lin = np.zeros(rows.size, dtype=np.int64)
            for p in range(k):
                lin = lin * (self._n_arr[modes[:, p]] - 1) + idx[rows, modes[:, p]] - 1
            out[rows] = self.offsets[self.mcr.starts[k] + local] + lin
        return out

    def _mc_at(self, pos: int) -> tuple:
        k = int(np.searchsorted(self.mcr.starts, pos, side="right") - 1)
        return tuple(int(x) for x in self.mcr.order_array(k)[pos - self.mcr.starts[k]])

    def index_matrix(self, start: int = 0, stop: int | None = None) -> np.ndarray:
        """Per-mode 1D indices of points ``start..stop`` (canonical), shape ``(count, D)``."""
        stop = self.total if stop is None else min(int(stop), self.total)
        start = max(int(start), 0)
        out = np.zeros((max(stop - start, 0), self.D), dtype=np.int64)
        if stop <= start:
            return out
        for gi, g in enumerate(self.groups):
            if g.order == 0 or g.count == 0:
                continue
            modes = self.group_modes(gi)
            canon = self.offsets[int(self.mcr.starts[g.order]) + g.members]
            # members whose subtensor intersects the window
            sel = np.flatnonzero((canon < stop) & (canon + g.size > start))
            if sel.size == 0:
                continue
            local = np.indices(g.ext).reshape(g.order, -1).T + 1  # (size, k)
            rows = canon[sel][:, None] + np.arange(g.size)[None, :]
            valid = (rows >= start) & (rows < stop)
            r = rows[valid] - start
            jj = np.broadcast_to(sel[:, None], rows.shape)[valid]
            ll = np.broadcast_to(np.arange(g.size)[None, :], rows.shape)[valid]
            for p in range(g.order):
                out[r, modes[jj, p]] = local[ll, p]
        return out

    def coordinates(self, start: int = 0, stop: int | None = None) -> np.ndarray:
        """Coordinates of points ``start..stop`` in canonical order, shape ``(count, D)``."""
        idx = self.index_matrix(start, stop)
        out = np.empty(idx.shape, dtype=float)
        for m, g in enumerate(self.shape.grids_1d):
            out[:, m] = g[idx[:, m]]
        return out

    def enumerate_coordinates(self, chunk: int = 65536) -> Iterator[tuple[int, np.ndarray]]:
        """Yield ``(flat index, coordinate vector)`` for every point in canonical order."""
        for s in range(0, self.total, chunk):
            block = self.coordinates(s, s + chunk)
            for j, row in enumerate(block):
                yield s + j, row

    def __repr__(self):
        return f"IncompleteGrid(D={self.D}, n={self.n}, members={len(self.mcr)}, total={self.total})"


class McrTensor:
    """A vector over an incomplete grid, one dense subtensor per mode combination.

    The flat storage is the canonical order, so ``np.asarray(t)`` can be
    handed to every routine in :mod:`artifact.fastmvp`.  Subtensor accessors
    return views.
    """

    def __init__(self, grid: IncompleteGrid, data=None):
        self.grid = grid
        if data is None:
            data = np.zeros(grid.total)
        data = np.asarray(data, dtype=float)
        if data.shape[0] != grid.total:
            raise GridError(f"expected {grid.total} elements, got {data.shape[0]}")
        self.data = data

    @classmethod
    def from_subtensors(cls, grid: IncompleteGrid, parts: dict) -> "McrTensor":
        t = cls(grid)
        for mc, sub in parts.items():
            view = t.subtensor(mc)
            view[...] = np.asarray(sub, dtype=float).reshape(view.shape)
        return t

    def subtensor(self, mc: Sequence[int]) -> np.ndarray:
        pos = self.grid.mcr.index(mc)
        o = int(self.grid.offsets[pos])
        ext = tuple(self.grid.n[m] - 1 for m in mc)
        return self.data[o : o + int(self.grid.sizes[pos])].reshape(ext + self.data.shape[1:])

    def items(self):
        for mc in self.grid.mcr:
            yield mc, self.subtensor(mc)

    def __array__(self, dtype=None, copy=None):
        if dtype is not None:
            return self.data.astype(dtype)
        return self.data

    def __len__(self):
        return self.grid.total

    def copy(self) -> "McrTensor":
        return McrTensor(self.grid, self.data.copy())
