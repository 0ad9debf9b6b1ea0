"""CSV and text writers for solver and verification outputs.

Every numeric value is printed with 17 significant digits so that it
round-trips exactly; files start with one ``#`` comment line.
"""

from __future__ import annotations

import csv
import io as _io
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numpy.typing import NDArray

from .grid import TimeGrid

MATRIX_HEADER = ("s", "regime", "row", "col", "value")


def fmt(v) -> str:
    """Round-trip representation of a real number (17 significant digits)."""
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.17g}"


def write_table(path: str | Path, comment: str, header: Sequence[str],
                rows: Iterable[Sequence]) -> Path:
    """Write a CSV with a leading comment line; floats use :func:`fmt`."""
    path = Path(path)
    buf = _io.StringIO()
    buf.write(f"# {comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([v if isinstance(v, str) else fmt(v) for v in row])
    path.write_text(buf.getvalue())
    return path


def matrix_rows(times: NDArray, values: NDArray) -> Iterable[tuple]:
    """Long-format rows ``(s, regime, row, col, value)``, 1-based indices.

    ``values`` has shape ``(len(times), D, r, c)``; vectors may be passed as
    ``(len(times), D, r)``.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim == 3:
        values = values[..., None]
    for s, block in zip(times, values):
        for i, mat in enumerate(block):
            for a in range(mat.shape[0]):
                for b in range(mat.shape[1]):
                    yield (float(s), i + 1, a + 1, b + 1, float(mat[a, b]))


def _thin(grid: TimeGrid, values: NDArray, every: int) -> tuple[NDArray, NDArray]:
    idx = np.arange(0, grid.steps + 1, max(1, int(every)))
    if idx[-1] != grid.steps:
        idx = np.append(idx, grid.steps)
    return grid.nodes[idx], values[idx]


def write_matrix_csv(path: str | Path, comment: str, grid: TimeGrid, values: NDArray,
                     every: int = 1) -> Path:
    """Node values of a regime-indexed matrix function in long format."""
    t, v = _thin(grid, values, every)
    return write_table(path, comment, MATRIX_HEADER, matrix_rows(t, v))


def write_records(path: str | Path, comment: str, records: Sequence[dict]) -> Path:
    """Rows of dictionaries sharing the keys of the first record."""
    header = list(records[0]) if records else []
    return write_table(path, comment, header, ([r[k] for k in header] for r in records))


def read_matrix_csv(path: str | Path) -> tuple[NDArray, NDArray]:
    """Inverse of :func:`write_matrix_csv`: ``(times, values (t, D, r, c))``."""
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    rows = list(csv.reader(lines))[1:]
    data = np.array([[float(x) for x in r] for r in rows])
    times = np.unique(data[:, 0])
    D, r, c = (int(data[:, k].max()) for k in (1, 2, 3))
    out = np.empty((times.size, D, r, c))
    ti = np.searchsorted(times, data[:, 0])
    out[ti, data[:, 1].astype(int) - 1, data[:, 2].astype(int) - 1,
        data[:, 3].astype(int) - 1] = data[:, 4]
    return times, out
