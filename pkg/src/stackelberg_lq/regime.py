"""Finite-state Markov chains with piecewise-constant generators.

Regimes are 1-based in every public interface (``1..D``).  Internally, arrays
of simulated regimes are 0-based so they can index coefficient tables
directly; :meth:`RegimePath.state_at` converts back.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

from .errors import GeneratorError
from .grid import PiecewiseConstant, TimeGrid

ROW_TOL = 1e-12


class Generator:
    """Transition-rate matrix ``lambda(t)``, constant between breakpoints.

    Parameters
    ----------
    rates : array, shape (D, D) or (K+1, D, D)
        A single matrix, or one matrix per piece when ``knots`` is given.
    knots : sequence of float, optional
        Interior breakpoints separating the pieces.
    """

    def __init__(self, rates: NDArray, knots: Sequence[float] = ()):
        r = np.asarray(rates, dtype=float)
        if r.ndim == 2:
            r = r[None]
        if r.ndim != 3 or r.shape[1] != r.shape[2]:
            raise GeneratorError(f"generator must be square, got shape {r.shape[1:]}")
        self._table = PiecewiseConstant(knots, r)

    @classmethod
    def constant(cls, rates: NDArray) -> "Generator":
        return cls(rates)

    @property
    def num_regimes(self) -> int:
        return self._table.values.shape[1]

    @property
    def knots(self) -> NDArray:
        return self._table.knots

    @property
    def pieces(self) -> NDArray:
        return self._table.values

    def rates(self, t: float) -> NDArray:
        return self._table.at(t)

    def on_cells(self, grid: TimeGrid) -> NDArray:
        """Per-cell rate matrices, shape ``(steps, D, D)``."""
        return self._table.on_cells(grid)

    def is_constant(self) -> bool:
        return self._table.is_constant()

    def __repr__(self) -> str:
        return f"Generator(D={self.num_regimes}, pieces={len(self.pieces)})"


def validate_generator(g: Generator) -> Generator:
    """Return ``g`` if every piece is a valid rate matrix, else raise.

    Checks non-negative off-diagonal entries and zero row sums (within
    ``1e-12``).  The error names the first violation with 1-based indices.
    """
    for piece, lam in enumerate(g.pieces):
        where = f" (piece {piece + 1})" if len(g.pieces) > 1 else ""
        if not np.all(np.isfinite(lam)):
            raise GeneratorError(f"non-finite rate{where}")
        D = lam.shape[0]
        for i in range(D):
            for k in range(D):
                if i != k and lam[i, k] < 0:
                    raise GeneratorError(
                        f"negative off-diagonal rate lambda[{i + 1},{k + 1}] = {lam[i, k]:g}{where}")
        sums = lam.sum(axis=1)
        for i in range(D):
            if abs(sums[i]) > ROW_TOL:
                raise GeneratorError(f"row {i + 1} sums to {sums[i]:g}{where}")
    return g


def stationary_distribution(g: Generator, t: float = 0.0) -> NDArray:
    """Solve ``pi lambda = 0``, ``sum(pi) = 1`` by least squares."""
    lam = g.rates(t)
    D = lam.shape[0]
    a = np.vstack([lam.T, np.ones((1, D))])
    rhs = np.zeros(D + 1)
    rhs[-1] = 1.0
    pi, *_ = np.linalg.lstsq(a, rhs, rcond=None)
    return pi


@dataclass(frozen=True)
class RegimePath:
    """One trajectory of the chain on ``[0, T]``.

    ``states[k]`` is the (1-based) regime entered at ``jump_times[k]``.
    """

    i0: int
    jump_times: tuple[float, ...]
    states: tuple[int, ...]
    T: float
    _times: NDArray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(self.jump_times) != len(self.states):
            raise ValueError("jump_times and states differ in length")
        prev = self.i0
        last = 0.0
        for t, s in zip(self.jump_times, self.states):
            if not last < t <= self.T:
                raise ValueError("jump times must be increasing in (0, T]")
            if s == prev:
                raise ValueError("post-jump state equals pre-jump state")
            prev, last = s, t
        object.__setattr__(self, "_times", np.asarray(self.jump_times, dtype=float))

    @property
    def num_jumps(self) -> int:
        return len(self.jump_times)

    def state_at(self, t: float) -> int:
        """Right-continuous ``alpha(t)``."""
        k = int(np.searchsorted(self._times, t, side="right"))
        return self.i0 if k == 0 else self.states[k - 1]

    def state_before(self, t: float) -> int:
        """Left limit ``alpha(t-)``."""
        k = int(np.searchsorted(self._times, t, side="left"))
        return self.i0 if k == 0 else self.states[k - 1]

    def counts(self, t: float, D: int) -> NDArray:
        """Jump counters ``N_k(t)``: number of entries into each regime by ``t``."""
        out = np.zeros(D, dtype=int)
        for s, tj in zip(self.states, self.jump_times):
            if tj <= t:
                out[s - 1] += 1
        return out

    def sojourns(self, t: float) -> list[tuple[float, float, int]]:
        """Intervals ``(start, end, regime)`` covering ``[0, t]``."""
        out = []
        start, cur = 0.0, self.i0
        for tj, s in zip(self.jump_times, self.states):
            if tj > t:
                break
            out.append((start, tj, cur))
            start, cur = tj, s
        out.append((start, t, cur))
        return out

    def on_grid(self, grid: TimeGrid) -> NDArray:
        """0-based regimes at the grid nodes."""
        nodes = grid.nodes
        k = np.searchsorted(self._times, nodes, side="right")
        seq = np.array((self.i0,) + self.states) - 1
        return seq[k]


def _next_jumps(g: Generator, t: NDArray, state: NDArray, T: float,
                rng: np.random.Generator) -> tuple[NDArray, NDArray]:
    """Advance every path to its next jump (or to ``T``); vectorised.

    Piece boundaries are handled by restarting the exponential clock, which
    is exact by memorylessness.
    """
    t = t.copy()
    new_state = state.copy()
    jumped = np.zeros(t.shape, dtype=bool)
    active = t < T
    bounds = np.concatenate([g.knots, [T]])
    while np.any(active):
        idx = np.nonzero(active)[0]
        piece = np.searchsorted(g.knots, t[idx], side="right")
        end = np.minimum(bounds[piece], T)
        lam = g.pieces[piece, state[idx]]
        rate = -lam[np.arange(idx.size), state[idx]]
        u = rng.random(idx.size)
        with np.errstate(divide="ignore", over="ignore"):
            hold = np.where(rate > 0, -np.log1p(-u) / np.where(rate > 0, rate, 1.0), np.inf)
        tn = t[idx] + hold
        hit = tn <= end
        # jump happens inside the piece
        j = idx[hit]
        if j.size:
            probs = lam[hit].copy()
            probs[np.arange(j.size), state[j]] = 0.0
            probs /= probs.sum(axis=1, keepdims=True)
            cum = np.cumsum(probs, axis=1)
            v = rng.random(j.size)[:, None]
            nxt = np.minimum((v >= cum).sum(axis=1), probs.shape[1] - 1)
            # guard against rounding landing on a zero-probability column
            bad = probs[np.arange(j.size), nxt] == 0
            if np.any(bad):
                nxt[bad] = np.argmax(probs[bad], axis=1)
            new_state[j] = nxt
            t[j] = tn[hit]
            jumped[j] = True
        # no jump before the piece ends: move to the boundary and redraw
        k = idx[~hit]
        t[k] = end[~hit]
        active = (~jumped) & (t < T)
    t = np.where(jumped, t, np.inf)
    return t, new_state


def simulate_jumps(g: Generator, i0: int | NDArray, T: float, num: int,
                   rng: np.random.Generator) -> tuple[NDArray, NDArray]:
    """Exact jump times and post-jump states for ``num`` independent paths.

    Returns
    -------
    times : (num, J) float, padded with ``inf``
    states : (num, J) int, 0-based, padded with ``-1``
    """
    D = g.num_regimes
    start = np.broadcast_to(np.asarray(i0, dtype=int) - 1, (num,)).copy()
    if np.any((start < 0) | (start >= D)):
        raise ValueError(f"initial regime outside 1..{D}")
    t = np.zeros(num)
    state = start
    times, states = [], []
    while True:
        t, state = _next_jumps(g, t, state, T, rng)
        done = ~np.isfinite(t)
        if np.all(done):
            break
        times.append(np.where(done, np.inf, t))
        states.append(np.where(done, -1, state))
        t = np.where(done, T, t)
    if not times:
        return np.full((num, 0), np.inf), np.full((num, 0), -1, dtype=int)
    return np.stack(times, axis=1), np.stack(states, axis=1)


def regimes_on_grid(i0: int | NDArray, times: NDArray, states: NDArray, grid: TimeGrid) -> NDArray:
    """0-based regime in force at every node, shape ``(num, steps+1)``."""
    num = times.shape[0]
    out = np.empty((num, grid.steps + 1), dtype=int)
    out[:] = (np.broadcast_to(np.asarray(i0, dtype=int), (num,)) - 1)[:, None]
    nodes = grid.nodes
    for k in range(times.shape[1]):
        mask = times[:, k, None] <= nodes[None, :] + 1e-12 * grid.T
        rows = states[:, k] >= 0
        m = mask & rows[:, None]
        out[m] = np.broadcast_to(states[:, k, None], out.shape)[m]
    return out


def simulate_chain(g: Generator, i0: int, T: float, rng: np.random.Generator) -> RegimePath:
    """Simulate one exact path of the chain started in regime ``i0``."""
    if T <= 0:
        raise ValueError("horizon must be positive")
    times, states = simulate_jumps(g, i0, T, 1, rng)
    ok = np.isfinite(times[0])
    return RegimePath(i0, tuple(float(x) for x in times[0][ok]),
                      tuple(int(s) + 1 for s in states[0][ok]), T)


def compensator(path: RegimePath, g: Generator, k: int, t: float) -> float:
    """Compensated counter ``N_k(t) - int_0^t sum_{i != k} lambda_ik 1{alpha(s-)=i} ds``.

    The integral is exact: a sum over sojourn intervals split at generator
    breakpoints.
    """
    D = g.num_regimes
    if not 1 <= k <= D:
        raise ValueError(f"regime {k} outside 1..{D}")
    if t > path.T + 1e-12:
        raise ValueError("t exceeds the path horizon")
    n = path.counts(t, D)[k - 1]
    integral = 0.0
    for a, b, i in path.sojourns(t):
        if i == k or b <= a:
            continue
        cuts = [a] + [c for c in g.knots if a < c < b] + [b]
        for lo, hi in zip(cuts[:-1], cuts[1:]):
            integral += g.rates(lo)[i - 1, k - 1] * (hi - lo)
    return float(n - integral)


def kolmogorov(g: Generator, p0: NDArray, grid: TimeGrid) -> NDArray:
    """Regime distribution ``p(s_j)`` from ``dp/ds = p lambda`` by RK4."""
    from .grid import rk4_forward

    lam = g.on_cells(grid)
    return rk4_forward(lambda j, th, p: p @ lam[j], np.asarray(p0, dtype=float), grid)


def initial_distribution(i0: int, D: int) -> NDArray:
    p = np.zeros(D)
    p[i0 - 1] = 1.0
    return p


def substreams(seed: int | None, count: int) -> list[np.random.Generator]:
    """Independent reproducible generators spawned from one seed."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(count)]
