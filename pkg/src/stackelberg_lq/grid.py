"""Uniform time grids, piecewise-constant tables and fixed-step RK4.

Coefficients are constant on every grid cell ``[s_j, s_{j+1})`` because the
grid is aligned with all breakpoints.  Quantities that vary inside a cell
(Riccati solutions and everything derived from them) are tabulated at three
*stages* per cell: left node (0), midpoint (1) and right node (2).  These are
exactly the abscissae classical RK4 needs, so no interpolation of derived
tables ever enters the integrators.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
from numpy.typing import NDArray

from .errors import BlowUpError

STAGE_THETA = (0.0, 0.5, 1.0)
BLOWUP = 1e12


@dataclass(frozen=True)
class TimeGrid:
    """Uniform partition of ``[0, T]`` into ``steps`` cells.

    ``breaks`` lists interior node indices where coefficients jump.
    """

    T: float
    steps: int
    breaks: tuple[int, ...] = ()

    def __post_init__(self):
        if self.T <= 0:
            raise ValueError("horizon must be positive")
        if self.steps < 1:
            raise ValueError("need at least one step")

    @property
    def h(self) -> float:
        return self.T / self.steps

    @property
    def nodes(self) -> NDArray:
        return np.linspace(0.0, self.T, self.steps + 1)

    def time(self, j: int, theta: float = 0.0) -> float:
        return (j + theta) * self.h

    def stage_times(self) -> NDArray:
        j = np.arange(self.steps)[:, None]
        return (j + np.asarray(STAGE_THETA)[None, :]) * self.h

    def refined(self, factor: int) -> "TimeGrid":
        return TimeGrid(self.T, self.steps * factor, tuple(b * factor for b in self.breaks))

    def segments(self) -> list[tuple[int, int]]:
        """Node index ranges ``[a, b]`` on which coefficients are constant."""
        cuts = [0, *sorted(self.breaks), self.steps]
        return list(zip(cuts[:-1], cuts[1:]))

    def cell_of(self, t: float) -> int:
        """Index of the cell containing ``t`` (right-continuous, last cell closed)."""
        return int(min(max(np.floor(t / self.h + 1e-12), 0), self.steps - 1))


def make_grid(T: float, breakpoints: Sequence[float], steps: int) -> TimeGrid:
    """Aligned uniform grid recording the node index of every breakpoint."""
    N = aligned_steps(T, breakpoints, steps)
    h = T / N
    breaks = tuple(sorted({int(round(b / h)) for b in breakpoints if 0.0 < b < T}))
    return TimeGrid(T, N, breaks)


def aligned_steps(T: float, breakpoints: Sequence[float], steps: int, max_factor: int = 64) -> int:
    """Smallest step count ``>= steps`` whose grid contains every breakpoint."""
    interior = [b for b in breakpoints if 0.0 < b < T]
    if not interior:
        return steps
    for cand in range(steps, steps * max_factor + 1):
        h = T / cand
        if all(abs(b / h - round(b / h)) < 1e-9 for b in interior):
            return cand
    raise ValueError(f"no uniform grid with <= {steps * max_factor} steps contains "
                     f"breakpoints {sorted(interior)}")


class PiecewiseConstant:
    """Regime-indexed table that is constant between breakpoints.

    Parameters
    ----------
    knots : sequence of float
        Interior breakpoints ``0 < t_1 < ... < t_K < T``.
    values : array, shape (K+1, D, ...)
        Value on each of the ``K+1`` pieces, per regime.
    """

    def __init__(self, knots: Sequence[float], values: NDArray):
        self.knots = np.asarray(sorted(knots), dtype=float)
        self.values = np.asarray(values, dtype=float)
        if self.values.shape[0] != len(self.knots) + 1:
            raise ValueError("need one value block per piece")

    @classmethod
    def constant(cls, value: NDArray) -> "PiecewiseConstant":
        return cls([], np.asarray(value, dtype=float)[None])

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape[1:]

    def piece(self, t: float) -> int:
        return int(np.searchsorted(self.knots, t, side="right"))

    def at(self, t: float) -> NDArray:
        """Right-continuous value at time ``t`` for all regimes."""
        return self.values[self.piece(t)]

    def on_cells(self, grid: TimeGrid) -> NDArray:
        """Per-cell values, shape ``(steps, D, ...)``; evaluated at cell midpoints."""
        mids = (np.arange(grid.steps) + 0.5) * grid.h
        return self.values[np.searchsorted(self.knots, mids, side="right")]

    def is_constant(self) -> bool:
        return bool(np.all(self.values == self.values[:1]))


def hermite(v0: NDArray, v1: NDArray, d0: NDArray, d1: NDArray, h: float, theta: float) -> NDArray:
    """Cubic Hermite interpolant on one cell; ``d0, d1`` are one-sided d/ds."""
    t = theta
    h00 = 2 * t**3 - 3 * t**2 + 1
    h10 = t**3 - 2 * t**2 + t
    h01 = -2 * t**3 + 3 * t**2
    h11 = t**3 - t**2
    return h00 * v0 + h10 * h * d0 + h01 * v1 + h11 * h * d1


Rhs = Callable[[int, float, NDArray], NDArray]


def _check(v: NDArray, grid: TimeGrid, j: int, last: float, bound: float) -> None:
    if not np.all(np.isfinite(v)) or np.max(np.abs(v), initial=0.0) > bound:
        bad = np.argwhere(~np.isfinite(v) | (np.abs(v) > bound))
        regime = int(bad[0][0]) + 1 if v.ndim > 0 and bad.size else None
        raise BlowUpError("solution blew up", time=grid.time(j), regime=regime, last_valid=last)


def rk4_backward(
    rhs: Rhs,
    terminal: NDArray,
    grid: TimeGrid,
    *,
    post: Callable[[NDArray], NDArray] | None = None,
    substeps: Callable[[int, NDArray, NDArray], int] | None = None,
    bound: float = BLOWUP,
) -> tuple[NDArray, NDArray, NDArray, NDArray]:
    """Integrate ``dV/ds = rhs(j, theta, V)`` from ``s = T`` down to ``0``.

    ``rhs`` receives the cell index and the position ``theta in [0, 1]`` inside
    the cell.  ``post`` is applied after every (sub)step, e.g. symmetrisation.
    ``substeps(j, V, dV)`` may split a cell into equal substeps; it receives
    the right-end value and derivative.  Away from breakpoints the right-end
    derivative of a cell is taken from the left-end derivative of the next
    one, which is the same evaluation when ``rhs`` is continuous there.

    Returns
    -------
    values : (steps+1, ...)
    dleft, dright : (steps, ...)
        One-sided derivatives at both ends of each cell, computed with the
        cell's own coefficients (used for Hermite midpoints).
    nsub : (steps,) int
    """
    N, h = grid.steps, grid.h
    v = np.array(terminal, dtype=float)
    _check(v, grid, N, grid.T, bound)
    values = np.empty((N + 1,) + v.shape)
    dleft = np.empty((N,) + v.shape)
    dright = np.empty((N,) + v.shape)
    nsub = np.ones(N, dtype=int)
    values[N] = v
    breaks = set(grid.breaks)
    for j in range(N - 1, -1, -1):
        k1 = dleft[j + 1] if j + 1 < N and j + 1 not in breaks else rhs(j, 1.0, v)
        dright[j] = k1
        m = substeps(j, v, k1) if substeps is not None else 1
        nsub[j] = m
        hs = h / m
        for k in range(m - 1, -1, -1):
            ta, tb = k / m, (k + 1) / m
            tm = 0.5 * (ta + tb)
            if k != m - 1:
                k1 = rhs(j, tb, v)
            k2 = rhs(j, tm, v - 0.5 * hs * k1)
            k3 = rhs(j, tm, v - 0.5 * hs * k2)
            k4 = rhs(j, ta, v - hs * k3)
            v = v - hs / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            if post is not None:
                v = post(v)
        _check(v, grid, j, grid.time(j + 1), bound)
        values[j] = v
        dleft[j] = rhs(j, 0.0, v)
    return values, dleft, dright, nsub


def rk4_forward(rhs: Rhs, initial: NDArray, grid: TimeGrid, *, bound: float = BLOWUP) -> NDArray:
    """Integrate ``dV/ds = rhs(j, theta, V)`` from ``s = 0`` up to ``T``."""
    N, h = grid.steps, grid.h
    v = np.array(initial, dtype=float)
    out = np.empty((N + 1,) + v.shape)
    out[0] = v
    for j in range(N):
        k1 = rhs(j, 0.0, v)
        k2 = rhs(j, 0.5, v + 0.5 * h * k1)
        k3 = rhs(j, 0.5, v + 0.5 * h * k2)
        k4 = rhs(j, 1.0, v + h * k3)
        v = v + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        _check(v, grid, j + 1, grid.time(j), bound)
        out[j + 1] = v
    return out


def stage_view(values: NDArray, dleft: NDArray, dright: NDArray, h: float) -> NDArray:
    """Tabulate a node solution at the three stages of every cell."""
    mid = hermite(values[:-1], values[1:], dleft, dright, h, 0.5)
    return np.stack([values[:-1], mid, values[1:]], axis=1)


def node_view(stages: NDArray) -> NDArray:
    """Right-continuous node table ``(steps+1, ...)`` from a stage table."""
    return np.concatenate([stages[:, 0], stages[-1:, 2]], axis=0)


def stage_index(theta: float) -> int | None:
    for k, t in enumerate(STAGE_THETA):
        if abs(theta - t) < 1e-14:
            return k
    return None


@lru_cache(maxsize=64)
def _fd_weights(offsets: tuple[int, ...]) -> NDArray:
    d = np.asarray(offsets, dtype=float)
    k = len(d)
    vander = d[None, :] ** np.arange(k)[:, None]
    rhs = np.zeros(k)
    rhs[1] = 1.0
    return np.linalg.solve(vander, rhs)


def fd_weights(offsets: Sequence[int]) -> NDArray:
    """Finite-difference weights for the first derivative at offset 0."""
    return _fd_weights(tuple(int(o) for o in offsets)).copy()


def fd_derivative(values: NDArray, grid: TimeGrid, width: int = 5) -> NDArray:
    """Node derivatives by one-segment finite differences of order ``width - 1``.

    Stencils never straddle a coefficient breakpoint; a breakpoint node uses
    the segment to its right (right-continuity), the final node the last one.
    """
    out = np.empty_like(values)
    segs = grid.segments()
    for si, (a, b) in enumerate(segs):
        last = si == len(segs) - 1
        w = min(width, b - a + 1)
        hi = b if last else b - 1
        for j in range(a, hi + 1):
            start = min(max(j - w // 2, a), b - w + 1)
            offs = np.arange(start, start + w) - j
            wts = _fd_weights(tuple(offs.tolist()))
            out[j] = np.tensordot(wts, values[start:start + w], axes=1) / grid.h
    return out
