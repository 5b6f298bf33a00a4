"""File formats: grid/dataset/model JSON, binary value sidecars and CSV tables.

JSON is written with sorted keys and shortest round-trip floats, so equal
content gives equal bytes.  Mode combinations are stored 1-based.  Value
arrays live in a sidecar: a 16-byte header (magic, uint32 version, uint64
count) then little-endian float64 values, referenced from the JSON by
relative path and SHA-256 digest.
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .gpr import GprConfig, GprModel, Standardization
from .grid import GridError, GridShape, IncompleteGrid, ModeCombinationRange, build_simple_mcr

__all__ = [
    "FormatError",
    "FORMAT_VERSION",
    "SIDECAR_MAGIC",
    "grid_to_dict",
    "grid_from_dict",
    "mcr_to_list",
    "mcr_from_list",
    "read_json",
    "write_json",
    "read_grid",
    "write_grid",
    "write_sidecar",
    "read_sidecar",
    "write_dataset",
    "read_dataset",
    "write_model",
    "read_model",
    "write_points",
    "read_points",
    "write_predictions",
    "write_bench",
    "read_bench",
    "BENCH_COLUMNS",
]

FORMAT_VERSION = 1
SIDECAR_MAGIC = b"ARTV"
SIDECAR_VERSION = 1
_HEADER = struct.Struct("<4sIQ")
BENCH_COLUMNS = ("alpha", "n", "D", "N", "time_s", "reps")


class FormatError(ValueError):
    """Malformed input file."""


# ---------------------------------------------------------------------------
# JSON


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(dumps(obj), encoding="utf-8")


def read_json(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise FormatError(f"{path}: {e.strerror}") from e
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from e
    if not isinstance(obj, dict):
        raise FormatError(f"{path}: top level must be an object")
    return obj


def _check_version(obj, path):
    v = obj.get("format_version", FORMAT_VERSION)
    if v != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format_version {v}")


def mcr_to_list(mcr: ModeCombinationRange) -> list:
    return [[m + 1 for m in mc] for mc in mcr]


def mcr_from_list(D: int, items) -> ModeCombinationRange:
    try:
        return ModeCombinationRange(D, [[int(m) - 1 for m in mc] for mc in items])
    except (TypeError, ValueError) as e:
        raise FormatError(f"bad mode combination list: {e}") from e


def grid_to_dict(grid: IncompleteGrid, cut_level: int | None = None) -> dict:
    d = {"format_version": FORMAT_VERSION, "dims": grid.D, "grids_1d": [g.tolist() for g in grid.shape.grids_1d]}
    if cut_level is not None and grid.mcr == build_simple_mcr(grid.D, cut_level):
        d["cut_level"] = int(cut_level)
    else:
        d["mcr"] = mcr_to_list(grid.mcr)
    return d


def grid_from_dict(d: dict, where: str = "grid") -> IncompleteGrid:
    """Build a grid from ``{"dims", "grids_1d" | "sizes", "cut_level" | "mcr"}``."""
    try:
        if "grids_1d" in d:
            shape = GridShape(d["grids_1d"])
        elif "sizes" in d:
            shape = GridShape.from_sizes(d["sizes"])
        else:
            raise FormatError(f"{where}: need 'grids_1d' or 'sizes'")
        D = int(d.get("dims", shape.D))
        if D != shape.D:
            raise FormatError(f"{where}: dims={D} but {shape.D} 1D grids given")
        if "cut_level" in d:
            mcr = build_simple_mcr(D, int(d["cut_level"]))
        elif "mcr" in d:
            mcr = mcr_from_list(D, d["mcr"])
        else:
            raise FormatError(f"{where}: need 'cut_level' or 'mcr'")
        return IncompleteGrid(shape, mcr)
    except GridError as e:
        raise FormatError(f"{where}: {e}") from e
    except (TypeError, KeyError) as e:
        raise FormatError(f"{where}: malformed grid description ({e})") from e


def read_grid(path) -> IncompleteGrid:
    obj = read_json(path)
    _check_version(obj, path)
    return grid_from_dict(obj, str(path))


def write_grid(path, grid: IncompleteGrid, cut_level: int | None = None) -> None:
    write_json(path, grid_to_dict(grid, cut_level))


# ---------------------------------------------------------------------------
# binary sidecar


def write_sidecar(path, values) -> dict:
    """Write values and return the JSON reference ``{"file", "count", "sha256"}``."""
    v = np.ascontiguousarray(np.asarray(values, dtype="<f8").reshape(-1))
    blob = _HEADER.pack(SIDECAR_MAGIC, SIDECAR_VERSION, v.size) + v.tobytes()
    Path(path).write_bytes(blob)
    return {"file": Path(path).name, "count": int(v.size), "sha256": hashlib.sha256(blob).hexdigest()}


def read_sidecar(path, ref: dict | None = None) -> np.ndarray:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise FormatError(f"{path}: {e.strerror}") from e
    if len(blob) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, count = _HEADER.unpack_from(blob)
    if magic != SIDECAR_MAGIC or version != SIDECAR_VERSION:
        raise FormatError(f"{path}: not a version-{SIDECAR_VERSION} value file")
    if len(blob) != _HEADER.size + 8 * count:
        raise FormatError(f"{path}: expected {count} values, file size does not match")
    if ref is not None:
        if ref.get("sha256") and hashlib.sha256(blob).hexdigest() != ref["sha256"]:
            raise FormatError(f"{path}: digest mismatch")
        if "count" in ref and int(ref["count"]) != count:
            raise FormatError(f"{path}: count {count} does not match the reference {ref['count']}")
    return np.frombuffer(blob, dtype="<f8", offset=_HEADER.size).astype(float)


def _values_from(obj: dict, key: str, base: Path, where: str) -> np.ndarray:
    ref = obj.get(key)
    if isinstance(ref, list):
        return np.asarray(ref, dtype=float)
    if isinstance(ref, dict) and "file" in ref:
        return read_sidecar(base / ref["file"], ref)
    raise FormatError(f"{where}: '{key}' must be an inline list or a sidecar reference")


# ---------------------------------------------------------------------------
# datasets


def write_dataset(path, grid: IncompleteGrid, values, cut_level: int | None = None, inline: bool = False) -> None:
    path = Path(path)
    values = np.asarray(values, dtype=float).reshape(-1)
    if values.size != grid.total:
        raise FormatError(f"expected {grid.total} values, got {values.size}")
    obj = {"format_version": FORMAT_VERSION, "grid": grid_to_dict(grid, cut_level)}
    obj["grid"].pop("format_version")
    if inline:
        obj["values"] = values.tolist()
    else:
        obj["values"] = write_sidecar(path.with_suffix(".bin"), values)
    write_json(path, obj)


def read_dataset(path) -> tuple[IncompleteGrid, np.ndarray]:
    """Grid and canonical-order values.

    Values come from ``"values"`` (inline list or sidecar) or from sparse
    ``"records"`` ``[{"mc": [...], "a": [...], "y": value}]`` covering every
    grid point exactly once.
    """
    path = Path(path)
    obj = read_json(path)
    _check_version(obj, path)
    if "grid" not in obj:
        raise FormatError(f"{path}: missing 'grid'")
    grid = grid_from_dict(obj["grid"], f"{path}: grid")
    if "records" in obj:
        y = np.full(grid.total, np.nan)
        for i, rec in enumerate(obj["records"]):
            try:
                mc = [int(m) - 1 for m in rec["mc"]]
                j = grid.flat_index(mc, rec.get("a", []))
                val = float(rec["y"])
            except (GridError, KeyError, TypeError, ValueError) as e:
                raise FormatError(f"{path}: record {i}: {e}") from e
            if not np.isnan(y[j]):
                raise FormatError(f"{path}: record {i} repeats grid point {j}")
            y[j] = val
        if np.isnan(y).any():
            j = int(np.flatnonzero(np.isnan(y))[0])
            mc, a = grid.multi_index(j)
            raise FormatError(f"{path}: no record for grid point {j} (mc {[m + 1 for m in mc]}, a {list(a)})")
        return grid, y
    y = _values_from(obj, "values", path.parent, str(path))
    if y.size != grid.total:
        raise FormatError(f"{path}: {y.size} values for a grid of {grid.total} points")
    if not np.all(np.isfinite(y)):
        j = int(np.flatnonzero(~np.isfinite(y))[0])
        raise FormatError(f"{path}: value {j} is not finite")
    return grid, y


# ---------------------------------------------------------------------------
# models


def _floats(a) -> list:
    return [float(x) for x in np.asarray(a).reshape(-1)]


def write_model(path, model: GprModel, cut_level: int | None = None) -> None:
    path = Path(path)
    st = model.stats
    diag = {k: v for k, v in model.diagnostics.items()}
    obj = {
        "format_version": FORMAT_VERSION,
        "grid": grid_to_dict(model.grid, cut_level),
        "kernel_mcr": mcr_to_list(model.kernel_mcr),
        "hyperparameters": {"sigma2": _floats(model.sigma2), "ell": _floats(model.ell), "noise": float(model.noise)},
        "standardization": {
            "x_mean": _floats(st.x_mean),
            "x_scale": _floats(st.x_scale),
            "y_mean": float(st.y_mean),
            "y_scale": float(st.y_scale),
        },
        "config": model.config.to_dict(),
        "diagnostics": json.loads(json.dumps(diag, default=_jsonable)),
        "weights": write_sidecar(path.with_suffix(".bin"), model.weights),
    }
    obj["grid"].pop("format_version")
    write_json(path, obj)


def _jsonable(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, (np.bool_,)):
        return bool(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"not serializable: {type(x).__name__}")


def read_model(path) -> GprModel:
    path = Path(path)
    obj = read_json(path)
    _check_version(obj, path)
    try:
        grid = grid_from_dict(obj["grid"], f"{path}: grid")
        kmcr = mcr_from_list(grid.D, obj["kernel_mcr"])
        hp = obj["hyperparameters"]
        st = obj["standardization"]
        stats = Standardization(
            np.array(st["x_mean"], float), np.array(st["x_scale"], float), float(st["y_mean"]), float(st["y_scale"])
        )
        config = GprConfig(**obj["config"])
        w = _values_from(obj, "weights", path.parent, str(path))
    except KeyError as e:
        raise FormatError(f"{path}: missing field {e}") from e
    if w.size != grid.total:
        raise FormatError(f"{path}: {w.size} weights for a grid of {grid.total} points")
    return GprModel(
        grid,
        kmcr,
        np.array(hp["sigma2"], float),
        np.array(hp["ell"], float),
        float(hp["noise"]),
        stats,
        w,
        config,
        obj.get("diagnostics", {}),
    )


# ---------------------------------------------------------------------------
# CSV


def write_points(path_or_file, grid: IncompleteGrid, chunk: int = 65536) -> int:
    """``index,x1..xD`` in canonical order; returns the row count."""
    own = isinstance(path_or_file, (str, Path))
    fh = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index"] + [f"x{m + 1}" for m in range(grid.D)])
        for s in range(0, grid.total, chunk):
            block = grid.coordinates(s, s + chunk)
            for j, row in enumerate(block):
                w.writerow([s + j] + [repr(float(v)) for v in row])
    finally:
        if own:
            fh.close()
    return grid.total


def read_points(path) -> np.ndarray:
    """Coordinates from the ``x1..xD`` columns of a points CSV (other columns ignored)."""
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as e:
        raise FormatError(f"{path}: {e.strerror}") from e
    if not rows:
        raise FormatError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    cols = [i for i, h in enumerate(header) if h.startswith("x")]
    if not cols:
        raise FormatError(f"{path}: header needs x1..xD columns")
    out = np.empty((len(rows) - 1, len(cols)))
    for r, row in enumerate(rows[1:]):
        try:
            out[r] = [float(row[c]) for c in cols]
        except (ValueError, IndexError) as e:
            raise FormatError(f"{path}:{r + 2}: {e}") from e
    return out


def write_predictions(path_or_file, mean, variance=None) -> None:
    """``index,mean[,variance]`` rows."""
    own = isinstance(path_or_file, (str, Path))
    fh = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "mean"] + (["variance"] if variance is not None else []))
        for i, mu in enumerate(np.asarray(mean, float)):
            row = [i, repr(float(mu))]
            if variance is not None:
                row.append(repr(float(variance[i])))
            w.writerow(row)
    finally:
        if own:
            fh.close()


def write_bench(path, records: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in records:
            w.writerow({k: r[k] for k in BENCH_COLUMNS})


def read_bench(path) -> list[dict]:
    try:
        with open(path, newline="") as fh:
            rd = csv.DictReader(fh)
            missing = set(BENCH_COLUMNS) - set(rd.fieldnames or [])
            if missing:
                raise FormatError(f"{path}: missing columns {sorted(missing)}")
            out = []
            for i, r in enumerate(rd):
                out.append(
                    {
                        "alpha": int(r["alpha"]),
                        "n": int(r["n"]),
                        "D": int(r["D"]),
                        "N": int(r["N"]),
                        "time_s": float(r["time_s"]),
                        "reps": int(r["reps"]),
                    }
                )
            return out
    except OSError as e:
        raise FormatError(f"{path}: {e.strerror}") from e
    except ValueError as e:
        if isinstance(e, FormatError):
            raise
        raise FormatError(f"{path}: {e}") from e
