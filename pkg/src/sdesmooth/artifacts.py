"""File formats for pipeline artifacts.

Grid-indexed fields (paths, posterior means, error fields) are wide CSV: a
``t`` column plus one column per coordinate, every float printed with
``%.12g``.  Matrices and vectors are headerless CSV.  The backward filter
solution is one wide CSV with columns t, nu, vec(P) row-major, logC; loading
it back needs the observation record the filter was solved against (the
weight machinery reads Y increments and the terminal value from the solution
object).  Run metadata goes to ``meta.json`` and is the one artifact allowed
to differ between reruns (it carries wall-clock timestamps).
"""

from __future__ import annotations

import json
import platform
from datetime import datetime, timezone
from pathlib import Path as FilePath
from typing import Optional, Sequence, Union

import numpy as np

from .backward_filter import BackwardFilterSolution
from .linalg import spd_inverse_and_logdet
from .sde import Array, ObservationRecord, TimeGrid

PathLike = Union[str, FilePath]

FLOAT_FMT = "%.12g"


def _fmt(value: float) -> str:
    return FLOAT_FMT % value


def write_wide_csv(
    path: PathLike,
    times: Array,
    values: Array,
    value_prefix: str = "x",
    names: Optional[Sequence[str]] = None,
) -> None:
    """Write a grid-indexed field: header ``t,<prefix>1,...``, one row per node."""
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    times = np.asarray(times, dtype=float)
    if times.shape[0] != values.shape[0]:
        raise ValueError(
            f"times ({times.shape[0]}) and values ({values.shape[0]}) disagree on row count"
        )
    if names is None:
        names = [f"{value_prefix}{j + 1}" for j in range(values.shape[1])]
    lines = ["t," + ",".join(names)]
    for t_k, row in zip(times, values):
        lines.append(",".join([_fmt(t_k)] + [_fmt(v) for v in row]))
    FilePath(path).write_text("\n".join(lines) + "\n")


def read_wide_csv(path: PathLike) -> tuple[Array, Array]:
    """Read a wide CSV back into (times, values)."""
    text = FilePath(path).read_text().strip().splitlines()
    header = text[0].split(",")
    if header[0] != "t":
        raise ValueError(f"{path}: expected leading 't' column, got {header[0]!r}")
    data = np.array([[float(v) for v in line.split(",")] for line in text[1:]])
    if data.size == 0:
        raise ValueError(f"{path}: no data rows")
    return data[:, 0], data[:, 1:]


def write_matrix_csv(path: PathLike, mat: Array) -> None:
    """Headerless matrix CSV, one row per line."""
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    lines = [",".join(_fmt(v) for v in row) for row in mat]
    FilePath(path).write_text("\n".join(lines) + "\n")


def read_matrix_csv(path: PathLike) -> Array:
    lines = FilePath(path).read_text().strip().splitlines()
    return np.array([[float(v) for v in line.split(",")] for line in lines])


def write_vector_csv(path: PathLike, vec: Array) -> None:
    """Headerless vector CSV, one entry per line."""
    vec = np.asarray(vec, dtype=float).reshape(-1)
    FilePath(path).write_text("\n".join(_fmt(v) for v in vec) + "\n")


def read_vector_csv(path: PathLike) -> Array:
    lines = FilePath(path).read_text().strip().splitlines()
    return np.array([float(line) for line in lines])


def write_table_csv(path: PathLike, header: Sequence[str], columns: Sequence[Array]) -> None:
    """Generic column table (e.g. MCMC traces); floats get %.12g, ints plain."""
    cols = [np.asarray(c) for c in columns]
    n = cols[0].shape[0]
    if any(c.shape[0] != n for c in cols):
        raise ValueError("table columns differ in length")
    lines = [",".join(header)]
    for i in range(n):
        cells = []
        for c in cols:
            v = c[i]
            if np.issubdtype(c.dtype, np.floating):
                cells.append(_fmt(v))
            elif np.issubdtype(c.dtype, np.bool_):
                cells.append(str(int(v)))
            else:
                cells.append(str(int(v)))
        lines.append(",".join(cells))
    FilePath(path).write_text("\n".join(lines) + "\n")


def save_filter_csv(path: PathLike, sol: BackwardFilterSolution) -> None:
    """Persist a backward filter solution: columns t, nu, vec(P) row-major, logC."""
    d = sol.dim
    n = sol.grid.n_steps
    names = (
        ["t"]
        + [f"nu{i + 1}" for i in range(d)]
        + [f"P_{i + 1}_{j + 1}" for i in range(d) for j in range(d)]
        + ["logC"]
    )
    data = np.hstack(
        [
            sol.grid.times[:, None],
            sol.nu,
            sol.P.reshape(n + 1, d * d),
            sol.logC[:, None],
        ]
    )
    lines = [",".join(names)]
    lines.extend(",".join(_fmt(v) for v in row) for row in data)
    FilePath(path).write_text("\n".join(lines) + "\n")


def load_filter_csv(path: PathLike, obs: ObservationRecord) -> BackwardFilterSolution:
    """Rebuild a filter solution from filter.csv plus the observation record.

    The cached inverses and log-determinants are recomputed, and the Y
    increments and terminal value are taken from ``obs`` (the file stores only
    t, nu, P, logC).
    """
    times, values = read_wide_csv(path)
    n = times.shape[0] - 1
    width = values.shape[1]
    # width = d + d^2 + 1  =>  d = (sqrt(4 width - 3) - 1) / 2
    d = int(round((np.sqrt(4 * width - 3) - 1) / 2))
    if d + d * d + 1 != width:
        raise ValueError(f"{path}: cannot infer state dimension from {width} columns")
    grid = obs.y_path.grid
    if grid.n_steps != n or abs(grid.times[-1] - times[-1]) > 1e-9:
        raise ValueError(f"{path}: filter grid does not match the observation grid")
    P = values[:, d : d + d * d].reshape(n + 1, d, d)
    P_inv, log_det_P = spd_inverse_and_logdet(P)
    return BackwardFilterSolution(
        grid=grid,
        nu=values[:, :d].copy(),
        P=P,
        logC=values[:, -1].copy(),
        P_inv=P_inv,
        log_det_P=log_det_P,
        y_increments=obs.increments(),
        zeta=None if obs.zeta is None else np.asarray(obs.zeta, dtype=float).copy(),
    )


def version_stamp() -> dict[str, str]:
    import sdesmooth

    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "sdesmooth": sdesmooth.__version__,
    }


def write_meta(path: PathLike, **fields) -> None:
    """Write/update meta.json; adds version info and a wall-clock timestamp."""
    path = FilePath(path)
    meta: dict = {}
    if path.exists():
        meta = json.loads(path.read_text())
    meta.update(fields)
    meta["versions"] = version_stamp()
    timestamps = meta.setdefault("timestamps", {})
    timestamps["updated"] = datetime.now(timezone.utc).isoformat()
    path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_meta(path: PathLike) -> dict:
    return json.loads(FilePath(path).read_text())
