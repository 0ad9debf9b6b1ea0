"""Backward solvers for the three coupled Riccati systems.

* follower ``P``:  ``P(T) = M``,
* leader ``Sigma``: ``Sigma(T) = 0``,
* the ``lambda``-family ``Pl``: ``Pl(T) = lambda I``, whose inverses approach
  ``Sigma`` as ``lambda`` grows.

All three use classical fixed-step RK4 on a breakpoint-aligned grid with
per-step symmetrisation.  The ``lambda``-family is stiff near ``T`` (its
Jacobian scales like ``lambda``), so its cells are split into substeps sized
from a local stiffness estimate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from types import SimpleNamespace
from typing import Callable, Sequence

import numpy as np
from numpy.typing import NDArray

from .coefficients import LeaderSystem, OneDimRewrite, leader_system, raw_cells
from .errors import DecouplingError, RegularityError, SolverError
from .grid import TimeGrid, fd_derivative, hermite, rk4_backward, stage_view
from .linalg import COND_CEILING, NotPositiveDefinite, cond, min_eig, spd_inverse, sym, tr
from .model import ProblemData
from .regime import Generator

STIFF_TARGET = 0.1
MAX_SUBSTEPS = 1 << 14


@dataclass(frozen=True)
class RiccatiSolution:
    """Per-regime symmetric matrix solution on a uniform grid.

    ``values`` has shape ``(steps+1, D, n, n)``; ``dleft``/``dright`` are the
    one-sided derivatives at both ends of every cell, used for the Hermite
    midpoint of each cell.  ``meta`` records step size, method order, the
    maximal ODE residual and solver-specific margins.
    """

    kind: str
    grid: TimeGrid
    values: NDArray
    dleft: NDArray
    dright: NDArray
    meta: dict = field(default_factory=dict)

    @cached_property
    def stages(self) -> NDArray:
        """Values at the three RK stages of every cell, ``(steps, 3, D, n, n)``."""
        return stage_view(self.values, self.dleft, self.dright, self.grid.h)

    def at(self, j: int, theta: float) -> NDArray:
        """Hermite interpolant inside cell ``j``."""
        return hermite(self.values[j], self.values[j + 1], self.dleft[j], self.dright[j],
                       self.grid.h, theta)

    def at_time(self, s: float) -> NDArray:
        j = self.grid.cell_of(s)
        return self.at(j, s / self.grid.h - j)

    @property
    def terminal(self) -> NDArray:
        return self.values[-1]

    def max_asymmetry(self) -> float:
        return float(np.max(np.abs(self.values - tr(self.values)), initial=0.0))

    def inverse(self) -> NDArray:
        return np.linalg.inv(self.values)


@dataclass(frozen=True)
class SigmaOps:
    """``That = I + Sigma T11t``, ``Fhat = Ft + Sigma S1t'``, ``Hs = Hhat + Sigma S2'``."""

    That: NDArray
    That_inv: NDArray
    Fhat: NDArray
    Hs: NDArray
    cond: NDArray


def coupling(lam: NDArray, V: NDArray) -> NDArray:
    """``sum_k lambda_ik V_k`` for every regime ``i``."""
    flat = V.reshape(V.shape[:lam.ndim - 1] + (-1,))
    return (lam @ flat).reshape(V.shape)


def sigma_ops(S: NDArray, c: SimpleNamespace, ceiling: float = COND_CEILING,
              where: tuple[float | None, ...] = (None,)) -> SigmaOps:
    """Evaluate the Sigma-dependent operators, checking that ``That`` is invertible.

    The condition number used for the check is the Frobenius one, an upper
    bound for the spectral condition number that needs no extra factorisation.
    """
    That = S @ c.T11t
    idx = np.arange(S.shape[-1])
    That[..., idx, idx] += 1.0
    try:
        inv = np.linalg.inv(That)
        k = np.linalg.norm(That, axis=(-2, -1)) * np.linalg.norm(inv, axis=(-2, -1))
    except np.linalg.LinAlgError:
        inv, k = None, np.full(That.shape[:-2], np.inf)
    bad = ~(np.isfinite(k) & (k <= ceiling))
    if np.any(bad):
        r = int(np.argwhere(bad)[0][-1]) + 1
        raise DecouplingError(f"I + Sigma T11t is singular (condition {np.max(k):.3e})",
                              time=where[0], regime=r)
    return SigmaOps(That, inv, c.Ft + S @ tr(c.S1t), c.Hhat + S @ tr(c.S2), k)


# -- right-hand sides -----------------------------------------------------------------

def follower_rhs(P: NDArray, c: dict, lam: NDArray, ceiling: float = COND_CEILING) -> NDArray:
    """``dP/ds`` of the follower system for all regimes at once."""
    A, C, D1 = c["A"], c["C"], c["D1"]
    At, B1t, Ct, D1t = (c[k + "'"] if k + "'" in c else tr(c[k]) for k in ("A", "B1", "C", "D1"))
    PC = P @ C
    S1hat = B1t @ P + D1t @ PC
    R1i, _ = spd_inverse(c["R1"] + D1t @ P @ D1, ceiling)
    return (-P @ A - At @ P - Ct @ PC + tr(S1hat) @ R1i @ S1hat - c["Q"] - coupling(lam, P))


def leader_rhs(S: NDArray, c: SimpleNamespace, lam: NDArray, ceiling: float = COND_CEILING,
               where: tuple = (None,)) -> NDArray:
    """``dSigma/ds`` of the leader system for all regimes at once."""
    ops = sigma_ops(S, c, ceiling, where)
    TS = ops.That_inv @ S
    return (c.Ahat @ S + S @ tr(c.Ahat) + S @ c.G @ S - coupling(lam, S)
            - ops.Fhat @ TS @ tr(ops.Fhat) - ops.Hs @ c.T22_inv @ tr(ops.Hs))


def lambda_rhs(Pl: NDArray, c: SimpleNamespace, lam: NDArray,
               ceiling: float = COND_CEILING) -> NDArray:
    """``dPl/ds`` of the ``lambda``-family, jump coupling ``sum_k lambda_ik Pl_i Pl_k^{-1} Pl_i``.

    The ``k = i`` term is part of the sum.
    """
    K1 = tr(c.Ft) @ Pl + c.S1t
    K2 = tr(c.Hhat) @ Pl + c.S2
    W, _ = spd_inverse(c.T11t + Pl, ceiling)
    Pinv, _ = spd_inverse(Pl, ceiling)
    jump = np.einsum("ik,iab,kbc,icd->iad", lam, Pl, Pinv, Pl)
    return (-Pl @ c.Ahat - tr(c.Ahat) @ Pl - c.G + tr(K1) @ W @ K1
            + tr(K2) @ c.T22_inv @ K2 + jump)


def rewritten_rhs(S: NDArray, A, B, Dc, Q, Sc, R1, R2, lam: NDArray) -> NDArray:
    """Scalar leader equation in rewritten form; all coefficients per regime, shape ``(D,)``.

    ``-2 A S - Q - sum_k lambda_ik S_k + S R1^{-1} S + (B S + Sc)^2 / (R2 + Dc^2 S)``.
    """
    return (-2 * A * S - Q - lam @ S + S * S / R1 + (B * S + Sc) ** 2 / (R2 + Dc**2 * S))


# -- helpers --------------------------------------------------------------------------

def node_derivatives(sol_dleft: NDArray, sol_dright: NDArray) -> NDArray:
    """Right-hand side at every node, from the one-sided derivatives of the solver."""
    return np.concatenate([sol_dleft, sol_dright[-1:]])


def ode_residual(values: NDArray, dleft: NDArray, dright: NDArray, grid: TimeGrid) -> float:
    """Max node residual ``|dV/ds - rhs(V)|`` with 4th-order one-segment differences."""
    fd = fd_derivative(values, grid)
    return float(np.max(np.abs(fd - node_derivatives(dleft, dright)), initial=0.0))


def _located(fn: Callable, grid: TimeGrid, err=SolverError, name: str = "") -> Callable:
    """Wrap a right-hand side so factorisation failures carry time and regime."""

    def wrapped(j, theta, V):
        try:
            return fn(j, theta, V)
        except NotPositiveDefinite as exc:
            r = exc.index[-1] + 1 if exc.index else None
            raise err(f"{name} lost positive definiteness (min eigenvalue {exc.min_eig:.3e}, "
                      f"condition {exc.cond:.3e})", time=grid.time(j, theta), regime=r) from exc

    return wrapped


def _nodes(stages: NDArray) -> NDArray:
    return np.concatenate([stages[:, 0], stages[-1:, 2]])


def _check_steps(grid: TimeGrid, steps: int | None) -> None:
    if steps is not None and steps != grid.steps:
        raise ValueError(f"blocks are tabulated on {grid.steps} steps, not {steps}; "
                         "rebuild them on the requested grid")


# -- solvers --------------------------------------------------------------------------

def solve_follower_cdre(p: ProblemData, steps: int | None = None,
                        ceiling: float = COND_CEILING) -> RiccatiSolution:
    """Solve the follower system backward from ``P(T) = M``.

    ``R1 + D1' P D1`` is required to stay uniformly positive definite; a
    failure raises :class:`RegularityError` at the offending time and regime.
    """
    grid = p.grid(steps)
    if grid.steps < 10:
        raise ValueError("need at least 10 steps")
    raw = raw_cells(p, grid)
    lam = p.generator.on_cells(grid)
    raw.update({k + "'": tr(raw[k]) for k in ("A", "B1", "C", "D1")})
    cells = [{k: v[j] for k, v in raw.items()} for j in range(grid.steps)]

    def rhs(j, theta, P):
        return follower_rhs(P, cells[j], lam[j], ceiling)

    f = _located(rhs, grid, RegularityError, "R1 + D1'PD1")
    values, dl, dr, _ = rk4_backward(f, p.terminal("M"), grid, post=sym)
    R1hat = raw["R1"] + raw["D1'"] @ values[:-1] @ raw["D1"]
    meta = dict(h=grid.h, order=4, method="rk4", max_residual=ode_residual(values, dl, dr, grid),
                min_eig_R1hat=float(np.min(min_eig(R1hat))) if R1hat.shape[-1] else np.inf)
    return RiccatiSolution("follower-P", grid, values, dl, dr, meta)


def solve_leader_cdre(tb, lb, hat, g: Generator, steps: int | None = None,
                      ceiling: float = COND_CEILING) -> RiccatiSolution:
    """Solve the leader system backward from ``Sigma(T) = 0``.

    Positive semidefiniteness of ``Sigma`` is not imposed; only invertibility
    of ``I + Sigma T11t`` is, with its condition number recorded.
    """
    sysm = leader_system(hat, lb, tb, g)
    grid = sysm.grid
    _check_steps(grid, steps)
    return _solve_leader(sysm, ceiling)


def _solve_leader(sysm: LeaderSystem, ceiling: float = COND_CEILING) -> RiccatiSolution:
    grid = sysm.grid

    def rhs(j, theta, S):
        return leader_rhs(S, sysm.cell(j, theta), sysm.lam[j], ceiling, (grid.time(j, theta),))

    f = _located(rhs, grid, DecouplingError, "I + Sigma T11t")
    values, dl, dr, _ = rk4_backward(f, np.zeros((sysm.D, sysm.n, sysm.n)), grid, post=sym)
    conds = cond(np.eye(sysm.n) + values @ _nodes(sysm.tb.T11t))
    meta = dict(h=grid.h, order=4, method="rk4", max_residual=ode_residual(values, dl, dr, grid),
                max_cond_That=float(np.max(conds)))
    return RiccatiSolution("leader-Sigma", grid, values, dl, dr, meta)


def _stiff_substeps(grid: TimeGrid, lam: NDArray, target: float = STIFF_TARGET) -> Callable:
    def substeps(j, V, dV):
        nv = np.linalg.norm(V, ord=2, axis=(-2, -1))
        nf = np.linalg.norm(dV, ord=2, axis=(-2, -1))
        rho = 2.0 * np.max(nf / np.maximum(nv, 1e-300)) + 2.0 * np.max(np.abs(np.diag(lam[j])))
        m = 1
        while grid.h * rho / m > target and m < MAX_SUBSTEPS:
            m *= 2
        return m

    return substeps


def solve_lambda_cdre(tb, lb, hat, g: Generator, lam_value: float, steps: int | None = None,
                      ceiling: float = COND_CEILING) -> RiccatiSolution:
    """Solve the ``lambda``-family backward from ``Pl(T) = lambda I``.

    Cells are split into ``2^k`` substeps whenever ``h`` times the local
    stiffness estimate exceeds ``0.1``.  Loss of positive definiteness of
    ``Pl`` or of ``Pl + T11t`` raises :class:`SolverError` with its location.
    """
    if not lam_value > 0:
        raise ValueError("lambda must be positive")
    sysm = leader_system(hat, lb, tb, g)
    _check_steps(sysm.grid, steps)
    return _solve_lambda(sysm, lam_value, ceiling)


def _solve_lambda(sysm: LeaderSystem, lam_value: float,
                  ceiling: float = COND_CEILING) -> RiccatiSolution:
    grid = sysm.grid
    # positive definiteness of Pl is certified by the inverses taken in the rhs,
    # whose condition numbers legitimately reach lambda * ||Sigma|| near T
    ceil = max(ceiling, 1e3 * lam_value)

    def rhs(j, theta, Pl):
        return lambda_rhs(Pl, sysm.cell(j, theta), sysm.lam[j], ceil)

    f = _located(rhs, grid, SolverError, "Pl or Pl + T11t")
    term = lam_value * np.broadcast_to(np.eye(sysm.n), (sysm.D, sysm.n, sysm.n)).copy()
    values, dl, dr, nsub = rk4_backward(f, term, grid, post=sym,
                                        substeps=_stiff_substeps(grid, sysm.lam),
                                        bound=max(1e12, 10 * lam_value))
    T11t = _nodes(sysm.tb.T11t)
    meta = dict(h=grid.h, order=4, method="rk4", lam=lam_value, max_substeps=int(nsub.max()),
                total_substeps=int(nsub.sum()), min_eig=float(np.min(min_eig(values))),
                min_eig_plus_T11t=float(np.min(min_eig(values + T11t))))
    return RiccatiSolution("lambda-P", grid, values, dl, dr, meta)


@dataclass
class LambdaRow:
    lam: float
    distance: float = np.nan
    monotone: bool | None = None
    monotone_gap: float = np.nan
    min_eig: float = np.nan
    min_eig_plus_T11t: float = np.nan
    max_substeps: int = 0
    error: str | None = None


@dataclass
class LambdaStudy:
    """Convergence of ``Pl^{-1}`` to ``Sigma`` along an ascending ``lambda`` list."""

    rows: list[LambdaRow]
    tol: float = 1e-8

    @property
    def distances(self) -> NDArray:
        return np.array([r.distance for r in self.rows])

    def strictly_decreasing(self) -> bool:
        d = self.distances
        return bool(np.all(np.isfinite(d)) and np.all(np.diff(d) < 0))

    def monotone(self) -> bool:
        return all(r.monotone is not False for r in self.rows) and all(
            r.error is None for r in self.rows)


def lambda_limit_study(tb, lb, hat, g: Generator, lambdas: Sequence[float],
                       steps: int | None = None, sigma: RiccatiSolution | None = None,
                       tol: float = 1e-8, ceiling: float = COND_CEILING) -> LambdaStudy:
    """Solve the ``lambda``-family for each ``lambda`` and compare with ``Sigma``.

    For each row: sup-norm distance ``max |Pl^{-1} - Sigma|`` over nodes and
    regimes, and the ordering ``Pl2^{-1} <= Pl1^{-1} + tol`` against the
    previous successful ``lambda`` (largest eigenvalue of the difference).
    Solver failures are recorded per row and the study continues.
    """
    lams = [float(v) for v in lambdas]
    if any(b <= a for a, b in zip(lams, lams[1:])):
        raise ValueError("lambdas must be strictly ascending")
    sysm = leader_system(hat, lb, tb, g)
    _check_steps(sysm.grid, steps)
    if sigma is None:
        sigma = _solve_leader(sysm, ceiling)
    rows = []
    prev = None
    for lv in lams:
        row = LambdaRow(lv)
        try:
            sol = _solve_lambda(sysm, lv, ceiling)
        except SolverError as exc:
            row.error = str(exc)
            rows.append(row)
            continue
        inv = np.linalg.inv(sol.values)
        row.distance = float(np.max(np.abs(inv - sigma.values)))
        row.min_eig = sol.meta["min_eig"]
        row.min_eig_plus_T11t = sol.meta["min_eig_plus_T11t"]
        row.max_substeps = sol.meta["max_substeps"]
        if prev is not None:
            gap = float(np.max(np.linalg.eigvalsh(sym(inv - prev))))
            row.monotone_gap = gap
            row.monotone = gap <= tol
        prev = inv
        rows.append(row)
    return LambdaStudy(rows, tol)


@dataclass
class Certificate:
    """Sufficient solvability condition for the scalar leader equation."""

    min_eig: NDArray  # per regime, minimum over the grid
    passed: bool
    matrices: NDArray  # (D, 3, 3) at the first node

    def margins(self) -> dict[int, float]:
        return {i + 1: float(v) for i, v in enumerate(self.min_eig)}


def solvability_certificate(r: OneDimRewrite, tol: float = 0.0) -> Certificate:
    """Check ``[[Q, 0, S], [0, R1, 0], [S, 0, R2]] >> 0`` per regime over the grid."""
    mats = r.certificate_matrix()
    eig = np.linalg.eigvalsh(mats)[..., 0]
    finite = np.isfinite(mats).all(axis=(-2, -1))
    eig = np.where(finite, eig, -np.inf)
    per_regime = eig.min(axis=(0, 1))
    return Certificate(per_regime, bool(np.all(per_regime > tol)), mats[0, 0])
