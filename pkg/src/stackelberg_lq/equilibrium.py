"""Closed-form Stackelberg equilibrium and value functions.

With deterministic regime-indexed data, every backward equation in the
construction is solved by a regime-indexed deterministic function: the
candidate ``Y(s) = y(s, alpha(s))`` with zero Brownian integrand and jump
integrands ``y(s, k) - y(s, alpha(s-))`` is adapted and solves the BSDE,
hence is *the* solution by uniqueness.  The BSDEs therefore reduce to ``D``
coupled linear ODEs

    dy_i/ds = K_i y_i + k_i - sum_k lambda_ik y_k,    y_i(T) = terminal_i,

integrated backward with RK4 on the Riccati grid.

All equilibrium quantities are affine in the leader adjoint ``phi*``; they
are tabulated once as pairs ``(L, c)`` meaning ``L phi* + c``.  The same
tables drive the path simulation and the exact second-moment computation of
the value functions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from types import SimpleNamespace
from typing import Callable

import numpy as np
from numpy.typing import NDArray

from .coefficients import (FORWARD_RAW, FollowerHatBlock, LeaderBlock, LeaderSystem, TildeBlock,
                           backward_blocks, follower_hat, leader_block, leader_system, mv,
                           raw_cells, tilde_block)
from .errors import BlowUpError, UnsupportedError
from .grid import TimeGrid, hermite, rk4_backward, rk4_forward, stage_index, stage_view
from .linalg import COND_CEILING, sym, tr
from .model import ProblemData
from .regime import RegimePath, initial_distribution
from .riccati import (RiccatiSolution, _solve_leader, coupling, sigma_ops,
                      solve_follower_cdre)


# -- regime-indexed backward tables -------------------------------------------------

@dataclass(frozen=True)
class BackwardTable:
    """Per-regime deterministic reduction of a linear BSDE.

    ``values[j, i]`` is ``y(s_j, i)``; the Brownian integrand of the BSDE is
    identically zero and the jump integrand for regime ``k`` is
    ``y(s, k) - y(s, alpha(s-))``.
    """

    grid: TimeGrid
    values: NDArray  # (steps+1, D, n)
    dleft: NDArray
    dright: NDArray
    name: str = "phi"

    @cached_property
    def stages(self) -> NDArray:
        return stage_view(self.values, self.dleft, self.dright, self.grid.h)

    def at(self, j: int, theta: float) -> NDArray:
        return hermite(self.values[j], self.values[j + 1], self.dleft[j], self.dright[j],
                       self.grid.h, theta)

    def at_time(self, s: float) -> NDArray:
        j = self.grid.cell_of(s)
        return self.at(j, s / self.grid.h - j)

    @property
    def theta(self) -> NDArray:
        """Brownian integrand, zero by the reduction."""
        return np.zeros_like(self.values)

    def gamma(self, s: float, before: int) -> NDArray:
        """Jump integrands ``y(s, k) - y(s, before)`` for all ``k`` (1-based ``before``)."""
        y = self.at_time(s)
        return y - y[before - 1]


def solve_linear_backward(grid: TimeGrid, K: NDArray, k: NDArray, lam: NDArray,
                          terminal: NDArray, name: str = "phi") -> BackwardTable:
    """Integrate ``dy_i/ds = K_i y_i + k_i - sum_k lambda_ik y_k`` backward.

    ``K`` and ``k`` are stage tables ``(steps, 3, D, n, n)`` and
    ``(steps, 3, D, n)``; ``lam`` holds per-cell rates ``(steps, D, D)``.
    """

    def rhs(j, theta, y):
        s = stage_index(theta)
        return mv(K[j, s], y) + k[j, s] - coupling(lam[j], y)

    vals, dl, dr, _ = rk4_backward(rhs, np.array(terminal, dtype=float), grid)
    return BackwardTable(grid, vals, dl, dr, name)


# -- affine maps in phi* -----------------------------------------------------------

def _eye_like(S: NDArray) -> NDArray:
    return np.broadcast_to(np.eye(S.shape[-1]), S.shape)


def affine_maps(c: SimpleNamespace, S: NDArray, phi: NDArray, raw: dict | None = None,
                P: NDArray | None = None, ceiling: float = COND_CEILING) -> dict[str, NDArray]:
    """Every equilibrium quantity as ``L phi* + c`` at a batch of points.

    Parameters
    ----------
    c : namespace of derived blocks (as returned by :meth:`LeaderSystem.cell`)
    S, phi : ``Sigma`` and ``phi`` at the same points
    raw, P : forward coefficients and the follower solution; when given, the
        follower control and the state map are included.
    """
    ops = sigma_ops(S, c, ceiling)
    TS = ops.That_inv @ S
    T22i = c.T22_inv
    Fh, Hs = ops.Fhat, ops.Hs
    FhT, HsT, S1tT, S2T = tr(Fh), tr(Hs), tr(c.S1t), tr(c.S2)
    S2phi = mv(c.S2, phi)
    out = {}
    # phi ODE
    out["K"] = c.Ahat - Fh @ TS @ c.S1t + S @ c.G - Hs @ T22i @ c.S2
    out["k"] = (-mv(Fh @ TS, c.rho1t) - mv(Hs @ T22i, c.rho2) + mv(S, c.q) + c.fhat)
    # phi* dynamics
    out["a_L"] = -tr(c.Ahat) - c.G @ S + S1tT @ TS @ FhT + S2T @ T22i @ HsT
    out["a_c"] = (-mv(S1tT @ TS @ c.S1t + S2T @ T22i @ c.S2 - c.G, phi)
                  - mv(S1tT @ TS, c.rho1t) - mv(S2T @ T22i, c.rho2) + c.q)
    TiT = tr(ops.That_inv)
    out["d_L"] = -TiT @ FhT
    out["d_c"] = mv(TiT, mv(c.S1t, phi) + c.rho1t)
    # reconstructed adjoint pair
    out["Y_L"] = -S
    out["Y_c"] = phi.copy()
    out["Z_L"] = TS @ FhT
    out["Z_c"] = -mv(TS, mv(c.S1t, phi) + c.rho1t)
    # leader control, direct formula, and the transformed control upsilon
    out["u2_L"] = T22i @ (HsT - c.T21 @ TS @ FhT)
    out["u2_c"] = -mv(T22i, mv(c.T21 @ TS, -mv(c.S1t, phi) - c.rho1t) + S2phi + c.rho2)
    out["ups_L"] = T22i @ HsT
    out["ups_c"] = -mv(T22i, S2phi + c.rho2)
    if raw is not None:
        R1i = c.R1hat_inv
        Psig = mv(P, raw["sigma"])
        out["fb_X"] = -R1i @ c.S1hat
        out["fb_u2"] = -R1i @ c.Xi
        out["fb_Y"] = -R1i @ tr(raw["B1"])
        out["fb_Z"] = -R1i @ tr(raw["D1"])
        out["fb_c"] = -mv(R1i @ tr(raw["D1"]), Psig)
        # X* = -phi*
        out["X_L"] = -_eye_like(S)
        out["X_c"] = np.zeros_like(phi)
        out["u1_L"] = (out["fb_X"] @ out["X_L"] + out["fb_u2"] @ out["u2_L"]
                       + out["fb_Y"] @ out["Y_L"] + out["fb_Z"] @ out["Z_L"])
        out["u1_c"] = (mv(out["fb_u2"], out["u2_c"]) + mv(out["fb_Y"], out["Y_c"])
                       + mv(out["fb_Z"], out["Z_c"]) + out["fb_c"])
    return out


def _stage_raw(raw: dict) -> dict:
    """Per-cell raw coefficients broadcast over the three stages."""
    return {k: v[:, None] for k, v in raw.items()}


# -- the equilibrium -----------------------------------------------------------------

@dataclass
class EquilibriumPolicy:
    """Solved equilibrium: Riccati solutions, ``phi`` and all affine gain tables.

    Evaluators take a time ``s``, a 1-based ``regime`` and ``phi*``.
    Tables live on the stage layout ``(steps, 3, D, ...)``.
    """

    problem: ProblemData
    system: LeaderSystem
    sigma: RiccatiSolution
    phi: BackwardTable
    P: RiccatiSolution | None = None
    maps: dict = field(default_factory=dict, repr=False)
    ceiling: float = COND_CEILING

    @property
    def grid(self) -> TimeGrid:
        return self.system.grid

    @property
    def hat(self) -> FollowerHatBlock:
        return self.system.hat

    @property
    def lb(self) -> LeaderBlock:
        return self.system.lb

    @property
    def tb(self) -> TildeBlock:
        return self.system.tb

    @property
    def is_forward(self) -> bool:
        return self.problem.is_forward

    @cached_property
    def raw(self) -> dict | None:
        return raw_cells(self.problem, self.grid) if self.is_forward else None

    # -- pointwise evaluation ------------------------------------------------------
    def _point(self, s: float) -> dict:
        g = self.grid
        j = g.cell_of(s)
        theta = s / g.h - j
        k = stage_index(theta)
        if k is not None:
            return {name: v[j, k] for name, v in self.maps.items()}
        c = self.system.cell(j, theta)
        raw = {key: v[j] for key, v in self.raw.items()} if self.raw is not None else None
        P = self.P.at(j, theta) if self.P is not None else None
        return affine_maps(c, self.sigma.at(j, theta), self.phi.at(j, theta), raw, P,
                           self.ceiling)

    def _eval(self, name: str, s: float, regime: int, phi_star: NDArray) -> NDArray:
        m = self._point(s)
        r = regime - 1
        return m[name + "_L"][r] @ np.asarray(phi_star, float) + m[name + "_c"][r]

    def u2_star(self, s: float, regime: int, phi_star: NDArray) -> NDArray:
        """Leader's equilibrium control (direct formula)."""
        return self._eval("u2", s, regime, phi_star)

    def upsilon(self, s: float, regime: int, phi_star: NDArray) -> NDArray:
        """Transformed control ``u2* + T22^{-1} T21 Z*``."""
        return self._eval("ups", s, regime, phi_star)

    def reconstruct_Y_Z(self, s: float, regime: int, phi_star: NDArray,
                        path: RegimePath | None = None) -> tuple[NDArray, NDArray, NDArray]:
        """``(Y*, Z*, Gamma*)``; ``Gamma*[k]`` is the jump integrand for regime ``k+1``.

        The pre-jump regime is read from ``path`` (``alpha(s-)``), else taken
        to be ``regime``.
        """
        Y = self._eval("Y", s, regime, phi_star)
        Z = self._eval("Z", s, regime, phi_star)
        before = path.state_before(s) if path is not None else regime
        S = self.sigma.at_time(s)
        gamma = self.phi.gamma(s, before)
        Gamma = -np.einsum("kab,b->ka", S - S[before - 1], np.asarray(phi_star, float)) + gamma
        return Y, Z, Gamma

    def u1_star(self, s: float, regime: int, X: NDArray, u2: NDArray, Y: NDArray,
                Z: NDArray) -> NDArray:
        """Follower control ``-R1hat^{-1}[S1hat X + Xi u2 + B1'Y + D1'Z + D1'P sigma]``."""
        self._need_forward()
        m = self._point(s)
        r = regime - 1
        return (m["fb_X"][r] @ X + m["fb_u2"][r] @ u2 + m["fb_Y"][r] @ Y + m["fb_Z"][r] @ Z
                + m["fb_c"][r])

    def stationarity(self, s: float, regime: int, phi_star: NDArray, Y: NDArray, Z: NDArray,
                     u2: NDArray) -> NDArray:
        """``-Hhat' phi* + S2 Y + T21 Z + T22 u2 + rho2``, zero at the equilibrium."""
        c = self._blocks(s, regime)
        return -tr(c.Hhat) @ phi_star + c.S2 @ Y + c.T21 @ Z + c.T22 @ u2 + c.rho2

    def _blocks(self, s: float, regime: int) -> SimpleNamespace:
        g = self.grid
        j = g.cell_of(s)
        c = self.system.cell(j, s / g.h - j)
        return SimpleNamespace(**{k: v[regime - 1] for k, v in vars(c).items()})

    def _need_forward(self):
        if not self.is_forward:
            raise UnsupportedError("the follower control needs a forward problem")

    # -- tables on a simulation grid ------------------------------------------------
    def sample(self, steps: int, names: tuple[str, ...] | None = None) -> dict[str, NDArray]:
        """Gain tables at the nodes of a uniform grid with ``steps`` cells.

        ``steps`` must divide twice the Riccati step count; nodes then fall on
        Riccati nodes or cell midpoints.  Node ``j`` carries the right-limit
        value (the coefficients of the cell starting there); the last node
        carries the value at ``T``.
        """
        N = self.grid.steps
        if (2 * N) % steps:
            raise ValueError(f"simulation steps {steps} must divide {2 * N} "
                             f"(twice the Riccati steps)")
        idx = np.arange(steps + 1) * (2 * N // steps)  # in half-cells
        cell = np.minimum(idx // 2, N - 1)
        stage = np.where(idx == 2 * N, 2, idx % 2)
        names = names or tuple(self.maps)
        return {k: self.maps[k][cell, stage] for k in names}

    def sample_raw(self, steps: int) -> dict[str, NDArray]:
        """Raw forward coefficients per simulation cell, ``(steps, D, ...)``."""
        self._need_forward()
        g = TimeGrid(self.problem.T, steps)
        return {k: self.problem.on_cells(k, g) for k in (*FORWARD_RAW, "M", "m")}


def build_policy(p: ProblemData, system: LeaderSystem, sigma: RiccatiSolution,
                 P: RiccatiSolution | None = None, ceiling: float = COND_CEILING) -> EquilibriumPolicy:
    """Solve the ``phi`` equation and tabulate every affine map on stages."""
    grid = system.grid
    tabs = system._tables
    c = SimpleNamespace(**tabs)
    raw = _stage_raw(raw_cells(p, grid)) if p.is_forward else None
    Pst = P.stages if P is not None else None
    # phi is needed inside the maps; K and k do not depend on it
    zero_phi = np.zeros(sigma.stages.shape[:-1])
    pre = affine_maps(c, sigma.stages, zero_phi, None, None, ceiling)
    phi = solve_linear_backward(grid, pre["K"], pre["k"], system.lam, p.terminal("m"))
    maps = affine_maps(c, sigma.stages, phi.stages, raw, Pst, ceiling)
    return EquilibriumPolicy(p, system, sigma, phi, P, maps, ceiling)


def solve_phi_bsde(tb: TildeBlock, lb: LeaderBlock, hat: FollowerHatBlock,
                   sigma: RiccatiSolution, g, terminal: NDArray,
                   steps: int | None = None, ceiling: float = COND_CEILING) -> BackwardTable:
    """Solve the leader's auxiliary linear BSDE for ``phi`` (with ``theta = 0``)."""
    system = leader_system(hat, lb, tb, g)
    if steps is not None and steps != system.grid.steps:
        raise ValueError(f"blocks are tabulated on {system.grid.steps} steps, not {steps}")
    c = SimpleNamespace(**system._tables)
    m = affine_maps(c, sigma.stages, np.zeros(sigma.stages.shape[:-1]), ceiling=ceiling)
    return solve_linear_backward(system.grid, m["K"], m["k"], system.lam, terminal)


def solve_equilibrium(p: ProblemData, steps: int | None = None,
                      ceiling: float = COND_CEILING) -> EquilibriumPolicy:
    """Full pipeline: follower Riccati, blocks, leader Riccati, ``phi``, gain tables."""
    if p.is_forward:
        P = solve_follower_cdre(p, steps, ceiling)
        hat = follower_hat(p, P, ceiling)
        lb = leader_block(p, hat, P, ceiling)
    else:
        P = None
        hat, lb = backward_blocks(p, p.grid(steps), ceiling)
    tb = tilde_block(lb, hat)
    system = leader_system(hat, lb, tb, p.generator)
    sigma = _solve_leader(system, ceiling)
    return build_policy(p, system, sigma, P, ceiling)


def simulate_phi_star(policy: EquilibriumPolicy, path: RegimePath, dW: NDArray,
                      x: NDArray | None = None, steps: int | None = None) -> NDArray:
    """Euler--Maruyama path of the leader's forward adjoint ``phi*``.

    ``phi*(0) = -x``; the regime in force at node ``s_j`` governs the cell
    ``[s_j, s_{j+1})``.  ``dW`` holds the ``steps`` Brownian increments.
    Returns the node values, shape ``(steps+1, n)``.
    """
    steps = policy.grid.steps if steps is None else int(steps)
    dW = np.asarray(dW, dtype=float).reshape(steps)
    x = policy.problem.x if x is None else np.atleast_1d(np.asarray(x, dtype=float))
    t = policy.sample(steps, ("a_L", "a_c", "d_L", "d_c"))
    reg = path.on_grid(policy.problem.grid(steps))
    h = policy.problem.T / steps
    out = np.empty((steps + 1, x.size))
    out[0] = -x
    for j in range(steps):
        r, v = reg[j], out[j]
        out[j + 1] = (v + (t["a_L"][j, r] @ v + t["a_c"][j, r]) * h
                      + (t["d_L"][j, r] @ v + t["d_c"][j, r]) * dW[j])
        if not np.all(np.isfinite(out[j + 1])):
            raise BlowUpError("phi* left the finite range", time=(j + 1) * h,
                              regime=int(r) + 1, last_valid=j * h)
    return out


# -- follower reaction to a deterministic leader control ------------------------------

@dataclass(frozen=True)
class FollowerReaction:
    """Follower's rational reaction to a deterministic regime-indexed ``u2``.

    ``Y`` is the reduced adjoint (``Z = 0``); :meth:`control` is the feedback
    ``-R1hat^{-1}[S1hat X + Xi u2 + B1'Y + D1'Z + D1'P sigma]``.
    """

    Y: BackwardTable
    u2: NDArray  # (steps, D, m2), constant per cell
    policy: EquilibriumPolicy

    def control(self, s: float, regime: int, X: NDArray, Z: NDArray | None = None) -> NDArray:
        j = self.Y.grid.cell_of(s)
        Y = self.Y.at_time(s)[regime - 1]
        Z = np.zeros_like(Y) if Z is None else Z
        return self.policy.u1_star(s, regime, X, self.u2[j, regime - 1], Y, Z)


def follower_reaction(policy: EquilibriumPolicy, u2: NDArray,
                      homogeneous: bool = False) -> FollowerReaction:
    """Solve the follower's adjoint BSDE for a deterministic ``u2``.

    ``dy_i/ds = Ahat_i y_i + Hhat_i u2_i + fhat_i - sum_k lambda_ik y_k``,
    ``y(T) = m``.  With ``homogeneous`` the forcing and terminal value are
    dropped, which gives the linear response to ``u2`` alone.

    ``u2`` has shape ``(steps, D, m2)`` on the Riccati grid.
    """
    policy._need_forward()
    sysm = policy.system
    u2 = np.asarray(u2, dtype=float)
    N, D, m2 = sysm.grid.steps, sysm.D, sysm.m2
    if u2.shape != (N, D, m2):
        raise ValueError(f"u2 table must have shape {(N, D, m2)}, got {u2.shape}")
    hat = sysm.hat
    k = mv(hat.Hhat, u2[:, None])
    if not homogeneous:
        k = k + hat.fhat
    term = np.zeros((D, sysm.n)) if homogeneous else policy.problem.terminal("m")
    Y = solve_linear_backward(sysm.grid, hat.Ahat, k, sysm.lam, term, name="Y")
    return FollowerReaction(Y, u2, policy)


def expand_cells(table: NDArray, steps_from: int, steps_to: int) -> NDArray:
    """Repeat a per-cell table on a grid refined by an integer factor."""
    if steps_to % steps_from:
        raise ValueError(f"{steps_to} is not a multiple of {steps_from}")
    return np.repeat(table, steps_to // steps_from, axis=0)


# -- value functions -------------------------------------------------------------------

def _affine(m: dict, name: str) -> NDArray:
    """``[L, c]`` so that the quantity is ``[L, c] @ (phi*, 1)``."""
    return np.concatenate([m[name + "_L"], m[name + "_c"][..., None]], axis=-1)


def _quad(Wa: NDArray, Wb: NDArray, A: NDArray | None = None) -> NDArray:
    """Symmetric matrix of ``<A a, b>`` for ``a = Wa xi``, ``b = Wb xi``."""
    if A is None:
        return sym(tr(Wa) @ Wb)
    return sym(tr(Wa) @ tr(A) @ Wb)


def _lin(r: NDArray, Wa: NDArray) -> NDArray:
    """Symmetric matrix of ``2 <r, a>`` for ``a = Wa xi``."""
    n1 = Wa.shape[-1]
    e = np.zeros(n1)
    e[-1] = 1.0
    row = np.einsum("...a,...ab->...b", r, Wa)
    return sym(2.0 * e[:, None] * row[..., None, :])


def _const(v: NDArray, n1: int) -> NDArray:
    """Symmetric matrix of the constant ``v``."""
    out = np.zeros(np.shape(v) + (n1, n1))
    out[..., -1, -1] = v
    return out


@dataclass
class ValueSummary:
    """Value functions at ``(x, i)``.

    ``V_L`` and ``V`` come from the closed-form expressions (chain-law
    quadrature); ``*_moment`` entries are the same functionals evaluated
    from exact second moments of ``(phi*, 1)``, an independent route.
    """

    x: NDArray
    i0: int
    V_L: float
    V: float | None
    V_F: float | None
    J_moment: float | None
    J_L_moment: float
    u2_energy: float | None
    sigma_term: float | None

    def as_dict(self) -> dict[str, float | None]:
        return {k: getattr(self, k) for k in ("V_L", "V", "V_F", "J_moment", "J_L_moment",
                                             "u2_energy", "sigma_term")}


def _integrate_forward(grid: TimeGrid, lam: NDArray, p0: NDArray, weights: NDArray) -> NDArray:
    """``int_0^T sum_j p_j(s) w_j(s) ds`` per weight, with ``p`` from Kolmogorov.

    ``weights`` has shape ``(steps, 3, D, K)``; returns ``(K,)``.
    """
    D = lam.shape[1]
    K = weights.shape[-1]

    def rhs(j, theta, y):
        p = y[:D]
        return np.concatenate([p @ lam[j], p @ weights[j, stage_index(theta)]])

    y0 = np.concatenate([p0, np.zeros(K)])
    return rk4_forward(rhs, y0, grid)[-1, D:]


def _moments(grid: TimeGrid, lam: NDArray, a: NDArray, d: NDArray, xi0: NDArray, i0: int,
             running: NDArray, terminal: NDArray) -> NDArray:
    """Expectations of quadratic forms of ``xi = (phi*, 1)``.

    ``xi`` obeys ``dxi = a xi ds + d xi dW`` between regime jumps, so
    ``M_j = E[xi xi' 1{alpha = j}]`` solves
    ``dM_j/ds = a_j M_j + M_j a_j' + d_j M_j d_j' + sum_k lambda_kj M_k``.
    Returns ``E[int sum_j tr(W_j M_j) ds + tr(W_T M(T))]`` per functional.
    ``running``: ``(steps, 3, D, K, n1, n1)``; ``terminal``: ``(D, K, n1, n1)``.
    """
    D = lam.shape[1]
    n1 = xi0.size
    K = running.shape[-3]
    size = D * n1 * n1

    def rhs(j, theta, y):
        s = stage_index(theta)
        M = y[:size].reshape(D, n1, n1)
        aj, dj = a[j, s], d[j, s]
        dM = aj @ M + M @ tr(aj) + dj @ M @ tr(dj) + np.tensordot(lam[j].T, M, axes=(1, 0))
        acc = np.einsum("ikab,iab->k", running[j, s], M)
        return np.concatenate([dM.ravel(), acc])

    M0 = np.zeros((D, n1, n1))
    M0[i0 - 1] = np.outer(xi0, xi0)
    y = rk4_forward(rhs, np.concatenate([M0.ravel(), np.zeros(K)]), grid)[-1]
    MT = y[:size].reshape(D, n1, n1)
    return y[size:] + np.einsum("ikab,iab->k", terminal, MT)


def augmented_dynamics(m: dict) -> tuple[NDArray, NDArray]:
    """Drift and diffusion matrices of ``xi = (phi*, 1)``."""
    a = _affine(m, "a")
    d = _affine(m, "d")
    pad = np.zeros(a.shape[:-2] + (1, a.shape[-1]))
    return np.concatenate([a, pad], axis=-2), np.concatenate([d, pad], axis=-2)


def value_functions(policy: EquilibriumPolicy, x: NDArray | None = None,
                    i0: int | None = None) -> ValueSummary:
    """Follower, leader and equilibrium value functions at ``(x, i0)``.

    The leader value and the equilibrium value use their closed forms with
    the regime law from the Kolmogorov equation.  The follower value is
    evaluated from its expectation formula with exact second moments of
    ``(phi*, 1)``; the same moments give the equilibrium cost ``J`` and the
    leader cost ``J_L`` as independent cross-checks.
    """
    p = policy.problem
    x = p.x if x is None else np.atleast_1d(np.asarray(x, dtype=float))
    i0 = p.i0 if i0 is None else int(i0)
    grid, sysm, m = policy.grid, policy.system, policy.maps
    c = SimpleNamespace(**sysm._tables)
    D, n = sysm.D, sysm.n
    lam = sysm.lam
    S = policy.sigma.stages
    phi = policy.phi.stages
    ops = sigma_ops(S, c, policy.ceiling)
    TS = ops.That_inv @ S
    T22i = c.T22_inv

    # leader value: closed form
    Mq = tr(c.S1t) @ TS @ c.S1t + tr(c.S2) @ T22i @ c.S2 - c.G
    lin = -mv(tr(c.S1t) @ TS, c.rho1t) - mv(tr(c.S2) @ T22i, c.rho2) + c.q
    ell = (-np.einsum("...a,...a->...", phi, mv(Mq, phi)) + 2 * np.einsum("...a,...a->...", phi, lin)
           - np.einsum("...a,...a->...", c.rho1t, mv(TS, c.rho1t))
           - np.einsum("...a,...a->...", c.rho2, mv(T22i, c.rho2)))
    weights = [ell]
    if p.is_forward:
        raw = _stage_raw(raw_cells(p, grid))
        P = policy.P.stages
        D1tPs = mv(tr(raw["D1"]), mv(P, raw["sigma"]))
        sig = (-np.einsum("...a,...a->...", mv(c.R1hat_inv, D1tPs), D1tPs)
               + np.einsum("...a,...a->...", mv(P, raw["sigma"]), raw["sigma"]))
        weights.append(np.broadcast_to(sig, ell.shape))
    p0 = initial_distribution(i0, D)
    ints = _integrate_forward(grid, lam, p0, np.stack(weights, -1))
    phi0 = policy.phi.values[0, i0 - 1]
    S0 = policy.sigma.values[0, i0 - 1]
    V_L = float(-(S0 @ x + 2 * phi0) @ x + ints[0])

    # second-moment route
    a, d = augmented_dynamics(m)
    Y, Z, u2 = _affine(m, "Y"), _affine(m, "Z"), _affine(m, "u2")
    W = np.concatenate([Y, Z, u2], axis=-2)
    big = SimpleNamespace(G=c.G, S1=c.S1, S2=c.S2, T11=c.T11, T12=c.T12, T21=c.T21, T22=c.T22)
    Kbig = _big(big)
    r = np.concatenate([c.q, c.rho1, c.rho2], axis=-1)
    run = [_quad(W, W, Kbig) + _lin(r, W)]
    n1 = n + 1
    Y0 = policy.sigma.values[0] @ x + policy.phi.values[0]  # Y*(0) = -Sigma phi*(0) + phi
    term = [np.zeros((D, n1, n1))]
    const0 = [float(-2 * Y0[i0 - 1] @ x)]
    V = V_F = J_mom = energy = sig_term = None
    if p.is_forward:
        X, u1 = _affine(m, "X"), _affine(m, "u1")
        R1, R2, Q = raw["R1"], raw["R2"], raw["Q"]
        run.append(_quad(X, X, Q) + _quad(u1, u1, R1) + _quad(u2, u2, R2))
        Mt, mt = p.terminal("M"), p.terminal("m")
        XT = X[-1, 2]
        term.append(_quad(XT, XT, Mt) + _lin(mt, XT))
        const0.append(0.0)
        run.append(_quad(u2, u2, R2))
        term.append(np.zeros((D, n1, n1)))
        const0.append(0.0)
        # follower value formula
        B2, D2, b, sg = raw["B2"], raw["D2"], raw["b"], raw["sigma"]
        Xi = c.Xi
        B2u = B2 @ u2 + _const_vec(b, n1)
        D2u = D2 @ u2 + _const_vec(sg, n1)
        rho1hat = tr(raw["B1"]) @ Y + tr(raw["D1"]) @ Z + _const_vec(D1tPs, n1)
        rX = rho1hat + Xi @ u2
        vf = (_quad(Y, B2u) * 2 + _quad(Z, D2u) * 2 + _quad(D2u, D2u, P)
              - _quad(rX, rX, c.R1hat_inv))
        run.append(vf)
        term.append(np.zeros((D, n1, n1)))
        Px = float(policy.P.values[0, i0 - 1] @ x @ x)
        const0.append(Px + float(2 * Y0[i0 - 1] @ x))
        sig_term = float(ints[1])
        V = float(-V_L + sig_term + Px)
    running = np.stack(run, axis=-3)
    terminal = np.stack(term, axis=-3)
    xi0 = np.concatenate([-x, [1.0]])
    vals = _moments(grid, lam, a, d, xi0, i0, running, terminal) + np.array(const0)
    J_L_mom = float(vals[0])
    if p.is_forward:
        J_mom, energy, V_F = (float(v) for v in vals[1:4])
    return ValueSummary(x, i0, V_L, V, V_F, J_mom, J_L_mom, energy, sig_term)


def _const_vec(v: NDArray, n1: int) -> NDArray:
    """``[0, v]``: the constant vector ``v`` as an affine map of ``xi``."""
    out = np.zeros(v.shape + (n1,))
    out[..., -1] = v
    return out


def _big(c: SimpleNamespace) -> NDArray:
    row1 = np.concatenate([c.G, tr(c.S1), tr(c.S2)], axis=-1)
    row2 = np.concatenate([c.S1, c.T11, c.T12], axis=-1)
    row3 = np.concatenate([c.S2, c.T21, c.T22], axis=-1)
    return np.concatenate([row1, row2, row3], axis=-2)
