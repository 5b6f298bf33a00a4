"""Timing harness for the kernel matrix-vector product and power-law fits."""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass

import numpy as np

from .fastmvp import mvp_K
from .grid import GridShape, IncompleteGrid, build_simple_mcr, grid_size
from .kernel import assemble

__all__ = [
    "MemoryRefusal",
    "estimate_memory",
    "time_mvp",
    "run_bench",
    "PowerLaw",
    "power_law",
    "fit_groups",
    "VECTORS_PER_MVP",
]

# live N-vectors during one product: input, U v, M part, output, plus chunk scratch
VECTORS_PER_MVP = 6


class MemoryRefusal(MemoryError):
    """Instance would not fit into the configured memory budget."""


def estimate_memory(alpha: int, n: int, D: int) -> int:
    """Bytes needed for one product on the simple ``(alpha, n, D)`` grid."""
    N = grid_size(build_simple_mcr(D, alpha), [n] * D)
    return VECTORS_PER_MVP * 8 * N


def _instance(alpha: int, n: int, D: int, seed: int):
    rng = np.random.default_rng(seed)
    grid = IncompleteGrid(GridShape([np.linspace(-1.0, 1.0, n)] * D), build_simple_mcr(D, alpha))
    kernel = assemble(grid, None, rng.uniform(0.1, 1.0, alpha + 1), rng.uniform(0.5, 2.0, D), centered=False)
    return grid, kernel, rng.standard_normal(grid.total)


def time_mvp(alpha: int, n: int, D: int, reps: int = 3, warmup: float = 2.0, seed: int = 0) -> dict:
    """Median wall time of ``mvp_K`` after at least ``warmup`` seconds of untimed calls."""
    grid, kernel, v = _instance(alpha, n, D, seed)
    t0 = time.monotonic()
    mvp_K(kernel, v)
    while time.monotonic() - t0 < warmup:
        mvp_K(kernel, v)
    times = []
    for _ in range(reps):
        s = time.monotonic()
        mvp_K(kernel, v)
        times.append(time.monotonic() - s)
    return {"alpha": alpha, "n": n, "D": D, "N": grid.total, "time_s": statistics.median(times), "reps": reps}


def run_bench(alphas, ns, Ds, reps=3, warmup=2.0, memory_bytes: int | None = None, seed=0, log=None) -> tuple[list, list]:
    """Time every ``(alpha, n, D)``; instances over the budget are refused, not run.

    Returns ``(records, refused)``, ``refused`` listing ``(alpha, n, D, bytes)``.
    """
    records, refused = [], []
    for a in alphas:
        for n in ns:
            for D in Ds:
                if a > D:
                    continue
                need = estimate_memory(a, n, D)
                if memory_bytes is not None and need > memory_bytes:
                    refused.append((a, n, D, need))
                    if log:
                        log(f"refused alpha={a} n={n} D={D}: needs ~{need / 2**30:.1f} GiB")
                    continue
                rec = time_mvp(a, n, D, reps, warmup, seed)
                if log:
                    log(f"alpha={a} n={n} D={D} N={rec['N']} time={rec['time_s']:.4g}s")
                records.append(rec)
    return records, refused


@dataclass
class PowerLaw:
    """``log t = slope * log x + intercept``."""

    slope: float
    intercept: float
    points: int


def power_law(x, t) -> PowerLaw:
    x = np.asarray(x, dtype=float)
    t = np.asarray(t, dtype=float)
    if x.size < 3:
        raise ValueError(f"power-law fit needs at least 3 points, got {x.size}")
    slope, intercept = np.polyfit(np.log(x), np.log(t), 1)
    return PowerLaw(float(slope), float(intercept), int(x.size))


def fit_groups(records: list[dict]) -> dict:
    """Per ``(alpha, n)``: fits against ``D`` and against ``N``, or the refusal reason."""
    groups: dict = {}
    for r in records:
        groups.setdefault((r["alpha"], r["n"]), []).append(r)
    out = {}
    for key, rs in sorted(groups.items()):
        rs = sorted(rs, key=lambda r: r["D"])
        D = [r["D"] for r in rs]
        N = [r["N"] for r in rs]
        t = [r["time_s"] for r in rs]
        try:
            out[key] = {"D": power_law(D, t), "N": power_law(N, t)}
        except ValueError as e:
            out[key] = {"error": str(e)}
    return out
