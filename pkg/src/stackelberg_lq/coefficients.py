"""Derived coefficient blocks of the follower and leader problems.

Every block is tabulated on the stage layout of :mod:`.grid`: arrays of shape
``(steps, 3, D, ...)`` holding the value at the left node, midpoint and right
node of each cell.  Raw model coefficients are constant on a cell; the
follower solution ``P`` enters at each stage through its own stage table.
For the odd RK substep that falls between stages, blocks are recomputed from
the Hermite interpolant of ``P`` (see :meth:`LeaderSystem.cell`).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from types import SimpleNamespace
from typing import Callable

import numpy as np
from numpy.typing import NDArray

from .errors import RegularityError, UnsupportedError
from .grid import STAGE_THETA, TimeGrid, stage_index
from .linalg import COND_CEILING, NotPositiveDefinite, spd_inverse, sym, tr
from .model import ProblemData
from .regime import Generator

FORWARD_RAW = ("A", "B1", "B2", "C", "D1", "D2", "b", "sigma", "Q", "R1", "R2")


def mv(a: NDArray, v: NDArray) -> NDArray:
    """Batched matrix-vector product."""
    return (a @ v[..., None])[..., 0]


def _check_spd(name: str, a: NDArray, grid: TimeGrid | None, ceiling: float, err=RegularityError):
    """SPD inverse; failures are reported at ``(time, regime)`` when tabulated."""
    try:
        return spd_inverse(a, ceiling)
    except NotPositiveDefinite as exc:
        idx = exc.index
        regime = idx[-1] + 1 if idx else None
        time = grid.time(idx[0], STAGE_THETA[idx[1]]) if grid is not None and len(idx) >= 3 else None
        raise err(f"{name} not uniformly positive definite (min eigenvalue {exc.min_eig:.3e}, "
                  f"condition {exc.cond:.3e})", time=time, regime=regime) from exc


# -- raw block algebra ----------------------------------------------------------

def hat_terms(c: dict, P: NDArray, ceiling: float = COND_CEILING, grid: TimeGrid | None = None) -> dict:
    """Follower hat block from raw coefficients ``c`` and ``P`` (broadcastable)."""
    A, B1, B2, C, D1, D2 = (c[k] for k in ("A", "B1", "B2", "C", "D1", "D2"))
    S1hat = tr(B1) @ P + tr(D1) @ P @ C
    R1hat = sym(c["R1"] + tr(D1) @ P @ D1)
    R1i, delta = _check_spd("R1hat", R1hat, grid, ceiling)
    Xi = tr(D1) @ P @ D2
    Ahat = tr(S1hat) @ R1i @ tr(B1) - tr(A)
    Chat = tr(S1hat) @ R1i @ tr(D1) - tr(C)
    Hhat = Chat @ P @ D2 - P @ B2
    fhat = mv(Chat @ P, c["sigma"]) - mv(P, c["b"])
    return dict(P=P, S1hat=S1hat, R1hat=R1hat, R1hat_inv=R1i, Xi=Xi, Ahat=Ahat, Chat=Chat,
                Hhat=Hhat, fhat=fhat, delta_R1hat=delta)


def leader_terms(c: dict, h: dict, ceiling: float = COND_CEILING, grid: TimeGrid | None = None) -> dict:
    """Leader block from raw coefficients and the hat block."""
    B1, B2, D1, D2 = (c[k] for k in ("B1", "B2", "D1", "D2"))
    P, R1i, Xi = h["P"], h["R1hat_inv"], h["Xi"]
    Psig = mv(P, c["sigma"])
    D1tPs = mv(tr(D1), Psig)
    G = sym(B1 @ R1i @ tr(B1))
    S1 = D1 @ R1i @ tr(B1)
    S2 = tr(Xi) @ R1i @ tr(B1) - tr(B2)
    T11 = sym(D1 @ R1i @ tr(D1))
    T21 = tr(Xi) @ R1i @ tr(D1) - tr(D2)
    T22 = sym(tr(Xi) @ R1i @ Xi - c["R2"] - tr(D2) @ P @ D2)
    q = mv(B1 @ R1i, D1tPs) - c["b"]
    rho1 = mv(D1 @ R1i, D1tPs) - c["sigma"]
    rho2 = mv(tr(Xi) @ R1i, D1tPs) - mv(tr(D2), Psig)
    return _finish_leader(dict(G=G, S1=S1, S2=S2, T11=T11, T21=T21, T22=T22, q=q, rho1=rho1,
                               rho2=rho2), ceiling, grid)


def _finish_leader(d: dict, ceiling: float, grid: TimeGrid | None) -> dict:
    d["T12"] = tr(d["T21"])
    T22i, delta = _check_spd("T22", d["T22"], grid, ceiling)
    d["T22_inv"] = T22i
    d["delta_T22"] = delta
    return d


def tilde_terms(h: dict, l: dict) -> dict:
    """Schur-complement transformation removing the ``Z``-``u2`` cross term."""
    K = l["T12"] @ l["T22_inv"]
    return dict(
        Ft=h["Chat"] - h["Hhat"] @ l["T22_inv"] @ l["T21"],
        S1t=l["S1"] - K @ l["S2"],
        T11t=sym(l["T11"] - K @ l["T21"]),
        rho1t=l["rho1"] - mv(K, l["rho2"]),
    )


def raw_cells(p: ProblemData, grid: TimeGrid) -> dict:
    """Raw forward coefficients per cell, shape ``(steps, D, ...)``."""
    return {k: p.on_cells(k, grid) for k in FORWARD_RAW}


# -- block containers ------------------------------------------------------------

class _Tabulated:
    """Stage tables with per-cell access."""

    _fields: tuple[str, ...] = ()

    def at(self, j: int, k: int) -> SimpleNamespace:
        """Block values of cell ``j`` at stage ``k`` for all regimes."""
        return SimpleNamespace(**{f: getattr(self, f)[j, k] for f in self._fields})


@dataclass(frozen=True)
class FollowerHatBlock(_Tabulated):
    """Follower block ``S1hat, R1hat, Xi, Ahat, Chat, Hhat, fhat`` on stages.

    ``delta`` is the smallest eigenvalue of ``R1hat`` over the grid (``inf``
    for backward problems, which carry no follower).  ``refine(j, theta)``
    recomputes every derived block at an arbitrary point inside cell ``j``;
    it is ``None`` when blocks are constant on cells.
    """

    grid: TimeGrid
    S1hat: NDArray
    R1hat: NDArray
    R1hat_inv: NDArray
    Xi: NDArray
    Ahat: NDArray
    Chat: NDArray
    Hhat: NDArray
    fhat: NDArray
    delta: float
    refine: Callable[[int, float], dict] | None = field(default=None, repr=False, compare=False)
    P: NDArray | None = field(default=None, repr=False)

    _fields = ("S1hat", "R1hat", "R1hat_inv", "Xi", "Ahat", "Chat", "Hhat", "fhat")


@dataclass(frozen=True)
class LeaderBlock(_Tabulated):
    """Leader block ``G, S1, S2, T11, T12, T21, T22, q, rho1, rho2`` on stages."""

    grid: TimeGrid
    G: NDArray
    S1: NDArray
    S2: NDArray
    T11: NDArray
    T12: NDArray
    T21: NDArray
    T22: NDArray
    T22_inv: NDArray
    q: NDArray
    rho1: NDArray
    rho2: NDArray
    delta: float

    _fields = ("G", "S1", "S2", "T11", "T12", "T21", "T22", "T22_inv", "q", "rho1", "rho2")

    def big_matrix(self) -> NDArray:
        """The symmetric weight ``[[G, S1', S2'], [S1, T11, T12], [S2, T21, T22]]``."""
        row1 = np.concatenate([self.G, tr(self.S1), tr(self.S2)], axis=-1)
        row2 = np.concatenate([self.S1, self.T11, self.T12], axis=-1)
        row3 = np.concatenate([self.S2, self.T21, self.T22], axis=-1)
        return np.concatenate([row1, row2, row3], axis=-2)


@dataclass(frozen=True)
class TildeBlock(_Tabulated):
    """Transformed block ``Ft, S1t, T11t, rho1t`` on stages."""

    grid: TimeGrid
    Ft: NDArray
    S1t: NDArray
    T11t: NDArray
    rho1t: NDArray

    _fields = ("Ft", "S1t", "T11t", "rho1t")


def follower_hat(p: ProblemData, P, ceiling: float = COND_CEILING) -> FollowerHatBlock:
    """Evaluate the follower hat block along the follower Riccati solution ``P``."""
    if not p.is_forward:
        raise UnsupportedError("follower blocks need a forward problem")
    grid = P.grid
    raw = raw_cells(p, grid)
    c = {k: v[:, None] for k, v in raw.items()}
    h = hat_terms(c, P.stages, ceiling, grid)

    def refine(j: int, theta: float) -> dict:
        cj = {k: v[j] for k, v in raw.items()}
        hj = hat_terms(cj, P.at(j, theta), ceiling)
        lj = leader_terms(cj, hj, ceiling)
        out = dict(hj)
        out.update(lj)
        out.update(tilde_terms(hj, lj))
        return out

    return FollowerHatBlock(grid, h["S1hat"], h["R1hat"], h["R1hat_inv"], h["Xi"], h["Ahat"],
                            h["Chat"], h["Hhat"], h["fhat"], h["delta_R1hat"], refine, P.stages)


def leader_block(p: ProblemData, hat: FollowerHatBlock, P=None,
                 ceiling: float = COND_CEILING) -> LeaderBlock:
    """Leader coefficients (``G, S1, S2, T..., q, rho``) on the hat block's grid."""
    if not p.is_forward:
        raise UnsupportedError("use backward_blocks for a backward problem")
    grid = hat.grid
    c = {k: v[:, None] for k, v in raw_cells(p, grid).items()}
    Pst = P.stages if P is not None else hat.P
    h = dict(P=Pst, R1hat_inv=hat.R1hat_inv, Xi=hat.Xi)
    l = leader_terms(c, h, ceiling, grid)
    return LeaderBlock(grid, l["G"], l["S1"], l["S2"], l["T11"], l["T12"], l["T21"], l["T22"],
                       l["T22_inv"], l["q"], l["rho1"], l["rho2"], l["delta_T22"])


def tilde_block(lb: LeaderBlock, hat: FollowerHatBlock) -> TildeBlock:
    """Apply the ``upsilon = u2 + T22^{-1} T21 Z`` transformation to the blocks."""
    t = tilde_terms(dict(Chat=hat.Chat, Hhat=hat.Hhat),
                    dict(T12=lb.T12, T21=lb.T21, T22_inv=lb.T22_inv, S1=lb.S1, S2=lb.S2,
                         T11=lb.T11, rho1=lb.rho1, rho2=lb.rho2))
    return TildeBlock(lb.grid, t["Ft"], t["S1t"], t["T11t"], t["rho1t"])


def backward_blocks(p: ProblemData, grid: TimeGrid,
                    ceiling: float = COND_CEILING) -> tuple[FollowerHatBlock, LeaderBlock]:
    """Blocks of a backward problem, read directly from its data."""
    if p.is_forward:
        raise UnsupportedError("backward_blocks needs a backward problem")

    def cells(key):
        v = p.on_cells(key, grid)[:, None]
        return np.broadcast_to(v, (grid.steps, 3) + v.shape[2:]).copy()

    N, D, n = grid.steps, p.D, p.n
    empty = np.zeros((N, 3, D, 0, n))
    hat = FollowerHatBlock(grid, empty, np.zeros((N, 3, D, 0, 0)), np.zeros((N, 3, D, 0, 0)),
                           np.zeros((N, 3, D, 0, p.m2)), cells("Ahat"), cells("Chat"),
                           cells("Hhat"), cells("fhat"), np.inf)
    d = {k: cells(k) for k in ("G", "S1", "S2", "T11", "T22", "q", "rho1", "rho2")}
    d["T21"] = tr(cells("T12"))
    l = _finish_leader(d, ceiling, grid)
    lb = LeaderBlock(grid, l["G"], l["S1"], l["S2"], l["T11"], l["T12"], l["T21"], l["T22"],
                     l["T22_inv"], l["q"], l["rho1"], l["rho2"], l["delta_T22"])
    return hat, lb


# -- the assembled leader system ---------------------------------------------------

@dataclass(frozen=True)
class LeaderSystem:
    """Everything the leader-side solvers read, with per-cell access."""

    hat: FollowerHatBlock
    lb: LeaderBlock
    tb: TildeBlock
    generator: Generator
    lam: NDArray  # per-cell rates (steps, D, D)

    @property
    def grid(self) -> TimeGrid:
        return self.lb.grid

    @property
    def D(self) -> int:
        return self.lam.shape[1]

    @property
    def n(self) -> int:
        return self.hat.Ahat.shape[-1]

    @property
    def m2(self) -> int:
        return self.lb.T22.shape[-1]

    def cell(self, j: int, theta: float) -> SimpleNamespace:
        """All blocks of cell ``j`` at relative position ``theta``."""
        k = stage_index(theta)
        if k is None:
            if self.hat.refine is None:
                k = 0
            else:
                d = self.hat.refine(j, theta)
                return SimpleNamespace(**{f: d[f] for f in (*FollowerHatBlock._fields,
                                                            *LeaderBlock._fields,
                                                            *TildeBlock._fields)})
        return SimpleNamespace(**{f: a[j, k] for f, a in self._tables.items()})

    @cached_property
    def _tables(self) -> dict[str, NDArray]:
        return {f: getattr(blk, f) for blk in (self.hat, self.lb, self.tb) for f in blk._fields}


def leader_system(hat: FollowerHatBlock, lb: LeaderBlock, tb: TildeBlock, g: Generator) -> LeaderSystem:
    return LeaderSystem(hat, lb, tb, g, g.on_cells(lb.grid))


# -- the scalar rewrite --------------------------------------------------------------

@dataclass(frozen=True)
class OneDimRewrite:
    """Scalar coefficients of the rewritten leader Riccati equation (``n = 1``).

    Arrays have shape ``(steps, 3, D)``.  ``R1`` is the weight whose inverse
    multiplies ``Sigma^2``; ``R2`` and ``Dc`` are both ``T11t`` by definition.
    """

    grid: TimeGrid
    A: NDArray
    B: NDArray
    Dc: NDArray
    Q: NDArray
    S: NDArray
    R1: NDArray
    R2: NDArray

    def rescaled(self, kappa: float) -> "OneDimRewrite":
        """Same equation under the control scaling ``u2 -> kappa u2``.

        ``B, S, Dc`` scale by ``kappa`` and ``R2`` by ``kappa**2``; the
        quotient term of the equation is invariant.
        """
        return OneDimRewrite(self.grid, self.A, kappa * self.B, kappa * self.Dc, self.Q,
                             kappa * self.S, self.R1, kappa**2 * self.R2)

    def embedding(self, j: int, k: int, i: int) -> dict[str, NDArray]:
        """Block matrices of the equivalent forward LQ problem at ``(cell, stage, regime)``."""
        a, b, d, q, s, r1, r2 = (float(getattr(self, f)[j, k, i])
                                 for f in ("A", "B", "Dc", "Q", "S", "R1", "R2"))
        return {
            "A": np.array([[a]]), "B": np.array([[1.0, b]]), "C": np.zeros((1, 1)),
            "D": np.array([[0.0, d]]), "Q": np.array([[q]]), "S": np.array([[0.0], [s]]),
            "R": np.diag([r1, r2]),
        }

    def certificate_matrix(self) -> NDArray:
        """``[[Q, 0, S], [0, R1, 0], [S, 0, R2]]`` per stage and regime."""
        z = np.zeros_like(self.Q)
        rows = [np.stack([self.Q, z, self.S], -1), np.stack([z, self.R1, z], -1),
                np.stack([self.S, z, self.R2], -1)]
        return np.stack(rows, -2)


def one_dim_rewrite(p: ProblemData | None, hat: FollowerHatBlock, lb: LeaderBlock,
                    tb: TildeBlock) -> OneDimRewrite:
    """Scalar rewrite coefficients; requires ``n = 1`` and invertible ``T11t``."""
    n = hat.Ahat.shape[-1]
    if n != 1:
        raise UnsupportedError(f"the scalar rewrite needs n = 1, got n = {n}")
    T11t = tb.T11t[..., 0, 0]
    bad = np.argwhere(np.abs(T11t) < 1e-14)
    if bad.size:
        j, k, r = bad[0]
        raise RegularityError("T11t is not invertible", time=lb.grid.time(j, STAGE_THETA[k]),
                              regime=int(r) + 1)
    Ti = 1.0 / T11t
    Ft, S1t = tb.Ft[..., 0, 0], tb.S1t[..., 0, 0]
    Hhat, S2 = hat.Hhat[..., 0, :], lb.S2[..., :, 0]
    T22i = lb.T22_inv
    HTH = np.einsum("...a,...ab,...b->...", Hhat, T22i, Hhat)
    STH = np.einsum("...a,...ab,...b->...", S2, T22i, Hhat)
    STS = np.einsum("...a,...ab,...b->...", S2, T22i, S2)
    A = Ti * Ft * S1t + STH - hat.Ahat[..., 0, 0]
    Q = Ti * Ft**2 + HTH
    R1inv = lb.G[..., 0, 0] - Ti * S1t**2 - STS
    with np.errstate(divide="ignore"):
        R1 = np.where(R1inv != 0, 1.0 / np.where(R1inv != 0, R1inv, 1.0), np.inf)
    return OneDimRewrite(lb.grid, A, S1t.copy(), T11t.copy(), Q, Ft.copy(), R1, T11t.copy())
