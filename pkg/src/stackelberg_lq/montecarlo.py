"""Monte Carlo simulation of the game and statistical verification.

Paths are processed in fixed-size chunks, each with its own random substream
spawned from one seed; results are concatenated in chunk order, so the
output does not depend on the number of worker threads.

Within a chunk the regime chain is simulated exactly, then snapped to the
grid: the regime in force at node ``s_j`` governs the whole cell
``[s_j, s_{j+1})``.  States follow Euler--Maruyama on the scalar Brownian
motion.  Several control *scenarios* are run on the same chain and Brownian
increments at once, which gives common random numbers for paired
comparisons.

Quadrature: controls are held constant on each cell, so their cost is summed
exactly per cell (left point); state-dependent integrands use the trapezoidal
rule with the cell's regime at both ends.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

from .coefficients import FORWARD_RAW
from .equilibrium import EquilibriumPolicy, expand_cells, follower_reaction
from .errors import BlowUpError, SolverError, UnsupportedError
from .grid import TimeGrid
from .linalg import tr
from .model import ConvexityReport, ProblemData
from .regime import initial_distribution, kolmogorov, regimes_on_grid, simulate_jumps

CHUNK = 4096
MAX_EXCLUDED = 0.01


# -- seeding ----------------------------------------------------------------------

def seed_sequence(rng) -> np.random.SeedSequence:
    """Normalise an int, ``SeedSequence``, ``Generator`` or ``None`` to a seed sequence."""
    if isinstance(rng, np.random.SeedSequence):
        return rng
    if isinstance(rng, np.random.Generator):
        return np.random.SeedSequence(int(rng.integers(2**63)))
    return np.random.SeedSequence(rng)


# -- containers -------------------------------------------------------------------

@dataclass(frozen=True)
class CostEstimate:
    """Sample mean of a cost functional with its standard error."""

    mean: float
    se: float
    paths: int
    tag: str = "J"
    excluded: int = 0

    @classmethod
    def from_samples(cls, x: NDArray, tag: str = "J", excluded: int = 0) -> "CostEstimate":
        x = np.asarray(x, dtype=float)
        n = x.size
        se = float(np.std(x, ddof=1) / np.sqrt(n)) if n > 1 else float("inf")
        return cls(float(np.mean(x)), se, n, tag, excluded)

    def __str__(self) -> str:
        return f"{self.tag} = {self.mean:.10g} +/- {self.se:.3g} ({self.paths} paths)"


@dataclass
class PathBundle:
    """Closed-loop trajectories at the grid nodes, one row per path.

    Arrays have shape ``(paths, steps+1, ...)``; regimes are 0-based.
    ``X``, ``u1`` are ``None`` for backward problems.
    """

    grid: TimeGrid
    regimes: NDArray
    dW: NDArray
    phi_star: NDArray
    Y: NDArray
    Z: NDArray
    u2: NDArray
    upsilon: NDArray
    cost: NDArray
    X: NDArray | None = None
    u1: NDArray | None = None
    excluded: int = 0
    seed: int | None = None

    @property
    def num_paths(self) -> int:
        return self.regimes.shape[0]


@dataclass(frozen=True)
class Scenario:
    """One control specification evaluated on shared randomness.

    Open loop: ``u1 = a1 u1* + v``.  Feedback (follower reaction):
    ``u1 = -R1hat^{-1}[S1hat X + Xi u2 + B1'Y + D1'Z + D1'P sigma]`` with
    ``Y = ay Y* + Yw``, ``Z = ay Z*``.  Always ``u2 = a2 u2* + w``.
    Tables ``v, w`` are per cell ``(steps, D, m)``; ``Yw`` per node.
    """

    a1: float = 1.0
    a2: float = 1.0
    v: NDArray | None = None
    w: NDArray | None = None
    feedback: bool = False
    ay: float = 1.0
    Yw: NDArray | None = None


EQUILIBRIUM = Scenario()


@dataclass
class _Context:
    problem: ProblemData
    grid: TimeGrid
    x: NDArray
    i0: int
    raw: dict | None
    tabs: dict | None
    policy: EquilibriumPolicy | None

    @property
    def steps(self) -> int:
        return self.grid.steps


def _context(p: ProblemData, policy: EquilibriumPolicy | None, steps: int,
             x=None, i0=None) -> _Context:
    x = p.x if x is None else np.atleast_1d(np.asarray(x, dtype=float))
    i0 = p.i0 if i0 is None else int(i0)
    if steps < 1:
        raise ValueError("need at least one step")
    grid = p.grid(steps)
    if grid.steps != steps:
        raise ValueError(f"{steps} steps do not align with the coefficient breakpoints")
    raw = None
    if p.is_forward:
        raw = {k: p.on_cells(k, grid) for k in FORWARD_RAW}
        raw["M"], raw["m"] = p.terminal("M"), p.terminal("m")
    tabs = None
    if policy is not None:
        tabs = policy.sample(steps)
        tabs.update(_sample_blocks(policy, steps))
    return _Context(p, grid, x, i0, raw, tabs, policy)


def _sample_index(N: int, steps: int) -> tuple[NDArray, NDArray]:
    idx = np.arange(steps + 1) * (2 * N // steps)
    return np.minimum(idx // 2, N - 1), np.where(idx == 2 * N, 2, idx % 2)


def _sample_blocks(policy: EquilibriumPolicy, steps: int) -> dict:
    cell, stage = _sample_index(policy.grid.steps, steps)
    keys = ("Hhat", "S2", "T21", "T22", "rho2", "G", "S1", "T11", "T12", "q", "rho1")
    return {"blk_" + k: policy.system._tables[k][cell, stage] for k in keys}


def sample_backward_table(table, steps: int) -> NDArray:
    """Values of a :class:`BackwardTable` at the nodes of a simulation grid."""
    cell, stage = _sample_index(table.grid.steps, steps)
    return table.stages[cell, stage]


# -- the scheme ---------------------------------------------------------------------

def _bmv(a: NDArray, v: NDArray) -> NDArray:
    """``a @ v`` for ``a`` of shape ``(P, r, c)`` and ``v`` of shape ``(..., P, c)``."""
    return np.einsum("prc,...pc->...pr", a, v)


def _quad(a: NDArray, v: NDArray) -> NDArray:
    return np.einsum("...pr,prc,...pc->...p", v, a, v)


def _draw(ctx: _Context, rng: np.random.Generator, n: int):
    p = ctx.problem
    times, states = simulate_jumps(p.generator, ctx.i0, p.T, n, rng)
    dW = rng.standard_normal((ctx.steps, n)) * np.sqrt(ctx.grid.h)
    return times, states, dW


def _coarsen(ctx_fine: _Context, ctx: _Context, draws):
    times, states, dW = draws
    f = ctx_fine.steps // ctx.steps
    if f > 1:
        dW = dW.reshape(ctx.steps, f, -1).sum(axis=1)
    return regimes_on_grid(ctx.i0, times, states, ctx.grid), dW


def _run_forward(ctx: _Context, reg: NDArray, dW: NDArray, scen: Sequence[Scenario],
                 record: bool):
    raw, tabs, grid = ctx.raw, ctx.tabs, ctx.grid
    h = grid.h
    P = reg.shape[0]
    n = ctx.problem.n
    S = len(scen)
    have_eq = tabs is not None
    a1 = np.array([s.a1 for s in scen])[:, None, None]
    a2 = np.array([s.a2 for s in scen])[:, None, None]
    ay = np.array([s.ay for s in scen])[:, None, None]
    fb = np.array([s.feedback for s in scen])[:, None, None]
    if not have_eq and any(s.feedback or s.a1 or s.a2 for s in scen):
        raise UnsupportedError("equilibrium or feedback controls need a policy")
    V = _stack([s.v for s in scen], (ctx.steps, ctx.problem.D, ctx.problem.m1))
    W = _stack([s.w for s in scen], (ctx.steps, ctx.problem.D, ctx.problem.m2))
    YW = _stack([s.Yw for s in scen], (ctx.steps + 1, ctx.problem.D, n))
    X = np.broadcast_to(ctx.x, (S, P, n)).copy()
    cost = np.zeros((S, P))
    if have_eq:
        phi = np.broadcast_to(-ctx.x, (P, n)).copy()
        Xeq = np.broadcast_to(ctx.x, (P, n)).copy()
    rec = _Recorder(record and have_eq, P, ctx.steps, n, ctx.problem.m1, ctx.problem.m2)
    for j in range(ctx.steps):
        r = reg[:, j]
        dw = dW[j][:, None]
        c = {k: v[j][r] for k, v in raw.items() if k not in ("M", "m")}
        u1 = np.zeros((S, P, ctx.problem.m1))
        u2 = np.zeros((S, P, ctx.problem.m2))
        if have_eq:
            t = {k: v[j][r] for k, v in tabs.items()}
            Y = _bmv(t["Y_L"], phi) + t["Y_c"]
            Z = _bmv(t["Z_L"], phi) + t["Z_c"]
            u2s = _bmv(t["u2_L"], phi) + t["u2_c"]
            u1s = (_bmv(t["fb_X"], Xeq) + _bmv(t["fb_u2"], u2s) + _bmv(t["fb_Y"], Y)
                   + _bmv(t["fb_Z"], Z) + t["fb_c"])
            rec.put(j, phi=phi, Y=Y, Z=Z, u2=u2s, ups=_bmv(t["ups_L"], phi) + t["ups_c"],
                    X=Xeq, u1=u1s)
            u2 = a2 * u2s
            u1 = a1 * u1s
            dphi = (_bmv(t["a_L"], phi) + t["a_c"]) * h + (_bmv(t["d_L"], phi) + t["d_c"]) * dw
            Xeq = _step(c, Xeq, u1s, u2s, h, dw)
            phi = phi + dphi
        if W is not None:
            u2 = u2 + W[:, j, r]
        if fb.any():
            Yfb = ay * Y if have_eq else 0.0
            if YW is not None:
                Yfb = Yfb + YW[:, j, r]
            Zfb = ay * Z
            react = (_bmv(t["fb_X"], X) + _bmv(t["fb_u2"], u2) + _bmv(t["fb_Y"], Yfb)
                     + _bmv(t["fb_Z"], Zfb) + t["fb_c"])
            u1 = np.where(fb, react, u1)
        if V is not None:
            u1 = u1 + np.where(fb, 0.0, V[:, j, r])
        Xn = _step(c, X, u1, u2, h, dw)
        cost += (0.5 * h * (_quad(c["Q"], X) + _quad(c["Q"], Xn))
                 + h * (_quad(c["R1"], u1) + _quad(c["R2"], u2)))
        X = Xn
    rT = reg[:, -1]
    M, m = raw["M"][rT], raw["m"][rT]
    cost += _quad(M, X) + 2 * np.einsum("pa,spa->sp", m, X)
    bundle = None
    if rec.on:
        t = {k: v[ctx.steps][rT] for k, v in tabs.items()}
        Y = _bmv(t["Y_L"], phi) + t["Y_c"]
        Z = _bmv(t["Z_L"], phi) + t["Z_c"]
        u2s = _bmv(t["u2_L"], phi) + t["u2_c"]
        u1s = (_bmv(t["fb_X"], Xeq) + _bmv(t["fb_u2"], u2s) + _bmv(t["fb_Y"], Y)
               + _bmv(t["fb_Z"], Z) + t["fb_c"])
        rec.put(ctx.steps, phi=phi, Y=Y, Z=Z, u2=u2s, ups=_bmv(t["ups_L"], phi) + t["ups_c"],
                X=Xeq, u1=u1s)
        bundle = rec
    finite = np.all(np.isfinite(cost), axis=0) & np.all(np.isfinite(X), axis=(0, 2))
    return cost, finite, bundle


def _run_backward(ctx: _Context, reg: NDArray, dW: NDArray, record: bool):
    """Leader adjoint only; the cost is the leader functional ``J_L``."""
    tabs, h = ctx.tabs, ctx.grid.h
    P = reg.shape[0]
    n, m2 = ctx.problem.n, ctx.problem.m2
    phi = np.broadcast_to(-ctx.x, (P, n)).copy()
    cost = np.zeros(P)
    rec = _Recorder(record, P, ctx.steps, n, 0, m2)

    def integrand(t, phi):
        Y = _bmv(t["Y_L"], phi) + t["Y_c"]
        Z = _bmv(t["Z_L"], phi) + t["Z_c"]
        u2 = _bmv(t["u2_L"], phi) + t["u2_c"]
        v = np.concatenate([Y, Z, u2], axis=-1)
        K = _big(t)
        r = np.concatenate([t["blk_q"], t["blk_rho1"], t["blk_rho2"]], axis=-1)
        return _quad(K, v) + 2 * np.einsum("pa,pa->p", r, v), Y, Z, u2

    t0 = {k: v[0][reg[:, 0]] for k, v in tabs.items()}
    Y0 = _bmv(t0["Y_L"], phi) + t0["Y_c"]
    cost -= 2 * Y0 @ ctx.x
    for j in range(ctx.steps):
        r = reg[:, j]
        t = {k: v[j][r] for k, v in tabs.items()}
        g0, Y, Z, u2 = integrand(t, phi)
        rec.put(j, phi=phi, Y=Y, Z=Z, u2=u2, ups=_bmv(t["ups_L"], phi) + t["ups_c"])
        phi = phi + (_bmv(t["a_L"], phi) + t["a_c"]) * h + (_bmv(t["d_L"], phi) + t["d_c"]) * dW[j][:, None]
        t1 = {k: v[j + 1][r] for k, v in tabs.items()}
        g1 = integrand(t1, phi)[0]
        cost += 0.5 * h * (g0 + g1)
    if rec.on:
        t = {k: v[ctx.steps][reg[:, -1]] for k, v in tabs.items()}
        _, Y, Z, u2 = integrand(t, phi)
        rec.put(ctx.steps, phi=phi, Y=Y, Z=Z, u2=u2, ups=_bmv(t["ups_L"], phi) + t["ups_c"])
    finite = np.isfinite(cost) & np.all(np.isfinite(phi), axis=1)
    return cost[None], finite, rec if rec.on else None


def _big(t: dict) -> NDArray:
    G, S1, S2 = t["blk_G"], t["blk_S1"], t["blk_S2"]
    row1 = np.concatenate([G, tr(S1), tr(S2)], axis=-1)
    row2 = np.concatenate([S1, t["blk_T11"], t["blk_T12"]], axis=-1)
    row3 = np.concatenate([S2, t["blk_T21"], t["blk_T22"]], axis=-1)
    return np.concatenate([row1, row2, row3], axis=-2)


def _step(c: dict, X, u1, u2, h, dw):
    drift = _bmv(c["A"], X) + _bmv(c["B1"], u1) + _bmv(c["B2"], u2) + c["b"]
    diff = _bmv(c["C"], X) + _bmv(c["D1"], u1) + _bmv(c["D2"], u2) + c["sigma"]
    return X + drift * h + diff * dw


def _stack(tables, shape):
    if all(t is None for t in tables):
        return None
    return np.stack([np.zeros(shape) if t is None else np.asarray(t, float) for t in tables])


class _Recorder:
    def __init__(self, on: bool, P: int, steps: int, n: int, m1: int, m2: int):
        self.on = on
        if not on:
            return
        N = steps + 1
        self.data = {"phi": np.empty((P, N, n)), "Y": np.empty((P, N, n)),
                     "Z": np.empty((P, N, n)), "u2": np.empty((P, N, m2)),
                     "ups": np.empty((P, N, m2))}
        if m1:
            self.data["X"] = np.empty((P, N, n))
            self.data["u1"] = np.empty((P, N, m1))

    def put(self, j: int, **vals):
        if not self.on:
            return
        for k, v in vals.items():
            if k in self.data:
                self.data[k][:, j] = v


# -- chunked driver -------------------------------------------------------------------

def _chunks(num_paths: int) -> list[int]:
    sizes = [CHUNK] * (num_paths // CHUNK)
    if num_paths % CHUNK:
        sizes.append(num_paths % CHUNK)
    return sizes


def _simulate(ctxs: Sequence[_Context], scen: Sequence[Scenario], num_paths: int, seed,
              workers: int = 1, record: bool = False):
    """Run every context (grid level) on shared draws; the first context is the finest.

    Returns per level: costs ``(S, paths)``, finite mask, recorders (per chunk).
    """
    if num_paths < 1:
        raise ValueError("need at least one path")
    fine = ctxs[0]
    for c in ctxs[1:]:
        if fine.steps % c.steps:
            raise ValueError("coarse levels must divide the finest step count")
    sizes = _chunks(num_paths)
    streams = seed_sequence(seed).spawn(len(sizes))

    def work(k):
        rng = np.random.default_rng(streams[k])
        draws = _draw(fine, rng, sizes[k])
        out = []
        for c in ctxs:
            reg, dW = _coarsen(fine, c, draws)
            if c.problem.is_forward:
                out.append(_run_forward(c, reg, dW, scen, record) + (reg, dW))
            else:
                out.append(_run_backward(c, reg, dW, record) + (reg, dW))
        return out

    if workers > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, range(len(sizes))))
    else:
        results = [work(k) for k in range(len(sizes))]
    levels = []
    for li in range(len(ctxs)):
        parts = [r[li] for r in results]
        cost = np.concatenate([p[0] for p in parts], axis=1)
        finite = np.concatenate([p[1] for p in parts])
        levels.append((cost, finite, [p[2] for p in parts], [p[3] for p in parts],
                       [p[4] for p in parts]))
    return levels


def _finite_costs(cost: NDArray, finite: NDArray) -> tuple[NDArray, int]:
    excluded = int(np.sum(~finite))
    if excluded > MAX_EXCLUDED * finite.size:
        raise BlowUpError(f"{excluded} of {finite.size} paths blew up (limit "
                          f"{MAX_EXCLUDED:.0%})")
    return cost[:, finite], excluded


def default_workers() -> int:
    import os

    return max(1, len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity")
               else os.cpu_count() or 1)


# -- public operations ----------------------------------------------------------------

def simulate_closed_loop(policy: EquilibriumPolicy, num_paths: int, steps: int | None = None,
                         seed=None, x=None, i0=None, workers: int = 1) -> PathBundle:
    """Simulate the equilibrium state, the leader adjoint and all controls jointly."""
    steps = policy.grid.steps if steps is None else int(steps)
    ctx = _context(policy.problem, policy, steps, x, i0)
    cost, finite, recs, regs, dWs = _simulate([ctx], [EQUILIBRIUM], num_paths, seed, workers,
                                              record=True)[0]
    cost, excluded = _finite_costs(cost, finite)
    data = {k: np.concatenate([r.data[k] for r in recs])[finite] for k in recs[0].data}
    reg = np.concatenate(regs)[finite]
    dW = np.concatenate([d.T for d in dWs])[finite]
    return PathBundle(ctx.grid, reg, dW, data["phi"], data["Y"], data["Z"], data["u2"],
                      data["ups"], cost[0], data.get("X"), data.get("u1"), excluded,
                      seed if isinstance(seed, int) else None)


def _control_scenario(u1, u2) -> Scenario:
    def part(u):
        if u is None:
            return 0.0, None
        if isinstance(u, str):
            if u != "equilibrium":
                raise ValueError(f"unknown control spec {u!r}")
            return 1.0, None
        return 0.0, np.asarray(u, dtype=float)

    if isinstance(u1, str) and u1 == "reaction":
        a2, w = part(u2)
        return Scenario(a1=0.0, a2=a2, w=w, feedback=True, ay=a2)
    a1, v = part(u1)
    a2, w = part(u2)
    return Scenario(a1=a1, a2=a2, v=v, w=w)


def estimate_cost(p: ProblemData, u1=None, u2=None, num_paths: int = 10_000,
                  steps: int | None = None, seed=None, policy: EquilibriumPolicy | None = None,
                  x=None, i0=None, workers: int = 1, tag: str = "J") -> CostEstimate:
    """Monte Carlo estimate of the game cost for the given controls.

    Each control spec is ``None`` (zero), ``"equilibrium"`` (needs
    ``policy``), or a deterministic table ``(steps, D, m)`` constant per cell
    and regime.  ``u1="reaction"`` plays the follower's feedback reaction to
    ``u2``; with a deterministic ``u2`` this needs the follower adjoint, so
    pass the reaction's ``Yw`` via :func:`reaction_scenario` instead.
    For backward problems the estimate is the leader functional ``J_L`` at
    the equilibrium.
    """
    steps = (policy.grid.steps if policy is not None else p.grid_steps) if steps is None else int(steps)
    if not p.is_forward:
        if policy is None:
            raise UnsupportedError("backward problems are simulated at the equilibrium only")
        scen = EQUILIBRIUM
        tag = "J_L"
    else:
        scen = _control_scenario(u1, u2)
    ctx = _context(p, policy, steps, x, i0)
    cost, finite, *_ = _simulate([ctx], [scen], num_paths, seed, workers)[0]
    cost, excluded = _finite_costs(cost, finite)
    return CostEstimate.from_samples(cost[0], tag, excluded)


def energy_weights(p: ProblemData, steps: int, i0: int | None = None) -> NDArray:
    """``h p_i(s_j)``: weights with ``E sum_j h |v(s_j, alpha(s_j))|^2 = sum w |v|^2``."""
    grid = p.grid(steps)
    i0 = p.i0 if i0 is None else i0
    prob = kolmogorov(p.generator, initial_distribution(i0, p.D), grid)[:-1]
    return grid.h * prob


def random_directions(p: ProblemData, count: int, dim: int, steps: int, rng: np.random.Generator,
                      i0: int | None = None) -> tuple[NDArray, int]:
    """Standard normal per (cell, regime), scaled to unit expected energy.

    Degenerate draws (zero energy) are rejected and redrawn; the number of
    redraws is returned.
    """
    w = energy_weights(p, steps, i0)
    out = np.empty((count, steps, p.D, dim))
    redrawn = 0
    for k in range(count):
        while True:
            v = rng.standard_normal((steps, p.D, dim))
            e = float(np.sum(w[..., None] * v * v))
            if e > 1e-14:
                break
            redrawn += 1
        out[k] = v / np.sqrt(e)
    return out, redrawn


@dataclass
class ProbeReport:
    """Paired differences ``J(perturbed) - J(equilibrium)`` with standard errors."""

    eps: float
    follower_diff: NDArray
    follower_se: NDArray
    follower_se_unpaired: NDArray
    leader_diff: NDArray
    leader_se: NDArray
    leader_se_unpaired: NDArray
    eps_ratio: float | None = None
    follower_diff_ratio: NDArray | None = None
    skipped: list = field(default_factory=list)
    base: CostEstimate | None = None
    k: float = 3.0

    @property
    def follower_ok(self) -> NDArray:
        return self.follower_diff >= -self.k * self.follower_se

    @property
    def leader_ok(self) -> NDArray:
        return self.leader_diff <= self.k * self.leader_se

    @property
    def follower_rate(self) -> float:
        return float(np.mean(self.follower_ok)) if self.follower_ok.size else float("nan")

    @property
    def leader_rate(self) -> float:
        return float(np.mean(self.leader_ok)) if self.leader_ok.size else float("nan")

    @property
    def scaling_ratio(self) -> float | None:
        """``sum diff(eps_ratio) / sum diff(eps)`` over follower directions."""
        if self.follower_diff_ratio is None:
            return None
        return float(np.sum(self.follower_diff_ratio) / np.sum(self.follower_diff))


def _paired(cost: NDArray, base: int, idx: Sequence[int]):
    d = cost[idx] - cost[base]
    n = cost.shape[1]
    diff = d.mean(axis=1)
    se = d.std(axis=1, ddof=1) / np.sqrt(n)
    se_u = np.sqrt(cost[idx].var(axis=1, ddof=1) + cost[base].var(ddof=1)) / np.sqrt(n)
    return diff, se, se_u


def saddle_probe(policy: EquilibriumPolicy, eps: float = 0.1, num_directions: int = 20,
                 num_paths: int = 100_000, seed=None, steps: int | None = None,
                 eps_ratio: float | None = 0.2, workers: int = 1, x=None, i0=None,
                 leader: bool = True) -> ProbeReport:
    """Check the equilibrium inequalities along random directions.

    Follower side: ``J(u1* + eps v, u2*) - J(u1*, u2*)`` should be
    nonnegative.  Leader side: with the follower reacting optimally to
    ``u2* + eps w``, ``J - J(u1*, u2*)`` should be nonpositive.  The
    reaction's adjoint is ``Y* + eps Yw`` by linearity, where ``Yw`` solves
    the homogeneous follower adjoint equation driven by ``w``.  All
    scenarios share chains and Brownian increments.
    """
    p = policy.problem
    if not p.is_forward:
        raise UnsupportedError("saddle probes need a forward problem")
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    steps = policy.grid.steps if steps is None else int(steps)
    N = policy.grid.steps
    if N % steps:
        raise ValueError(f"probe steps {steps} must divide the Riccati steps {N}")
    ss = seed_sequence(seed)
    dir_seed, path_seed = ss.spawn(2)
    rng = np.random.default_rng(dir_seed)
    i0 = p.i0 if i0 is None else int(i0)
    V, _ = random_directions(p, num_directions, p.m1, steps, rng, i0)
    Wd, _ = random_directions(p, num_directions if leader else 0, p.m2, steps, rng, i0)
    scen = [EQUILIBRIUM]
    fol = []
    for v in V:
        fol.append(len(scen))
        scen.append(Scenario(v=eps * v))
    fol_r = []
    if eps_ratio is not None:
        for v in V:
            fol_r.append(len(scen))
            scen.append(Scenario(v=eps_ratio * v))
    lead, skipped = [], []
    for k, w in enumerate(Wd):
        try:
            react = follower_reaction(policy, expand_cells(w, steps, N), homogeneous=True)
        except SolverError as exc:
            skipped.append((k, str(exc)))
            continue
        Yw = sample_backward_table(react.Y, steps)
        lead.append(len(scen))
        scen.append(Scenario(a1=0.0, w=eps * w, feedback=True, Yw=eps * Yw))
    ctx = _context(p, policy, steps, x, i0)
    cost, finite, *_ = _simulate([ctx], scen, num_paths, path_seed, workers)[0]
    cost, excluded = _finite_costs(cost, finite)
    fd, fse, fseu = _paired(cost, 0, fol)
    if lead:
        ld, lse, lseu = _paired(cost, 0, lead)
    else:
        ld = lse = lseu = np.zeros(0)
    fr = _paired(cost, 0, fol_r)[0] if fol_r else None
    return ProbeReport(eps, fd, fse, fseu, ld, lse, lseu, eps_ratio, fr, skipped,
                       CostEstimate.from_samples(cost[0], "J", excluded))


@dataclass
class ResidualSummary:
    max: float
    mean: float
    count: int


def stationarity_residual(bundle: PathBundle, policy: EquilibriumPolicy,
                          u2_shift: float | NDArray = 0.0) -> ResidualSummary:
    """``|-Hhat' phi* + S2 Y* + T21 Z* + T22 u2* + rho2|`` over all paths and nodes.

    ``u2_shift`` perturbs the recorded leader control, to confirm that the
    residual detects a non-equilibrium control.
    """
    steps = bundle.grid.steps
    b = _sample_blocks(policy, steps)
    nodes = np.arange(steps + 1)[None, :]
    r = bundle.regimes

    def at(k):
        return b["blk_" + k][nodes, r]

    u2 = bundle.u2 + u2_shift
    res = (-np.einsum("pjab,pja->pjb", at("Hhat"), bundle.phi_star)
           + np.einsum("pjab,pjb->pja", at("S2"), bundle.Y)
           + np.einsum("pjab,pjb->pja", at("T21"), bundle.Z)
           + np.einsum("pjab,pjb->pja", at("T22"), u2) + at("rho2"))
    norm = np.linalg.norm(res, axis=-1)
    return ResidualSummary(float(norm.max()), float(norm.mean()), int(norm.size))


def upsilon_relation(bundle: PathBundle, policy: EquilibriumPolicy) -> float:
    """Max of ``|u2* + T22^{-1} T21 Z* - upsilon*|`` over the bundle."""
    steps = bundle.grid.steps
    b = _sample_blocks(policy, steps)
    nodes = np.arange(steps + 1)[None, :]
    r = bundle.regimes
    T22, T21 = b["blk_T22"][nodes, r], b["blk_T21"][nodes, r]
    v = bundle.u2 + np.linalg.solve(T22, np.einsum("pjab,pjb->pja", T21, bundle.Z)[..., None])[..., 0]
    return float(np.max(np.abs(v - bundle.upsilon)))


def decoupling_drift(bundle: PathBundle, policy: EquilibriumPolicy) -> tuple[NDArray, NDArray]:
    """Cumulative drift mismatch of ``Y*`` along the paths.

    Returns the path mean and standard error, per node, of
    ``Y*(s_j) - Y*(0) - sum_{l<j} h [Ahat Y* + Ft Z* + Hhat upsilon* + fhat](s_l)``.
    The jump part of ``Y*`` is a compensated martingale, so the mean is
    ``O(h)`` up to sampling noise.
    """
    steps = bundle.grid.steps
    cell, stage = _sample_index(policy.grid.steps, steps)
    tb = policy.system._tables
    r = bundle.regimes[:, :-1]
    nodes = np.arange(steps)[None, :]

    def at(k):
        return tb[k][cell, stage][nodes, r]

    Y, Z, ups = bundle.Y[:, :-1], bundle.Z[:, :-1], bundle.upsilon[:, :-1]
    drift = (np.einsum("pjab,pjb->pja", at("Ahat"), Y) + np.einsum("pjab,pjb->pja", at("Ft"), Z)
             + np.einsum("pjab,pjb->pja", at("Hhat"), ups) + at("fhat"))
    cum = np.concatenate([np.zeros_like(drift[:, :1]), np.cumsum(drift * bundle.grid.h, axis=1)], 1)
    dev = bundle.Y - bundle.Y[:, :1] - cum
    n = dev.shape[0]
    return dev.mean(axis=0), dev.std(axis=0, ddof=1) / np.sqrt(n)


# -- value check ------------------------------------------------------------------------

@dataclass
class ValueRow:
    x: float
    V: float
    J_coarse: CostEstimate
    J_fine: CostEstimate
    J_rich: float
    se_rich: float
    candidates: dict[str, float]
    k: float = 3.0

    @property
    def tolerance(self) -> float:
        """``k`` standard errors plus the observed step-halving drift.

        A rounding floor of a few hundred ulps covers estimates without
        sampling variance.
        """
        floor = 256 * np.finfo(float).eps * max(abs(self.J_rich), abs(self.V), 1.0)
        return self.k * self.se_rich + abs(self.J_fine.mean - self.J_coarse.mean) + floor

    def agrees(self, value: float) -> bool:
        return abs(self.J_rich - value) <= self.tolerance

    @property
    def closest(self) -> str:
        return min(self.candidates, key=lambda k: abs(self.candidates[k] - self.J_rich))


@dataclass
class ValueCheck:
    rows: list[ValueRow]

    def agree(self, name: str) -> bool:
        return all(r.agrees(r.candidates[name]) for r in self.rows)

    @property
    def winner(self) -> str | None:
        """The candidate that agrees at every ``x`` and is closest most often."""
        names = list(self.rows[0].candidates)
        ok = [n for n in names if self.agree(n)]
        if len(ok) == 1:
            return ok[0]
        if not ok:
            return None
        err = {n: sum(abs(r.candidates[n] - r.J_rich) for r in self.rows) for n in ok}
        return min(err, key=err.get)


def value_check(policy: EquilibriumPolicy, xs: Sequence[float], num_paths: int = 100_000,
                seed=None, steps: int | None = None,
                alternatives: dict[str, Sequence[float]] | None = None,
                workers: int = 1) -> ValueCheck:
    """Compare Monte Carlo equilibrium costs with the closed-form value.

    Each ``x`` is simulated on the grid with ``steps`` cells and on the grid
    with half as many, using the same chains and summed Brownian increments;
    the Richardson combination ``2 J(h) - J(2h)`` removes the first-order
    bias.  A candidate agrees when it lies within 3 standard errors of the
    extrapolation plus the observed ``|J(h) - J(2h)|``.  ``alternatives`` maps a label to polynomial coefficients
    ``(c0, c1, c2)`` in ``x`` for rival closed forms.
    """
    from .equilibrium import value_functions

    p = policy.problem
    if p.n != 1:
        raise UnsupportedError("value_check takes scalar initial states")
    steps = policy.grid.steps if steps is None else int(steps)
    if steps % 2:
        raise ValueError("steps must be even")
    ss = seed_sequence(seed).spawn(len(xs))
    rows = []
    for xv, s in zip(xs, ss):
        fine = _context(p, policy, steps, [xv])
        coarse = _context(p, policy, steps // 2, [xv])
        (cf, ff, *_), (cc, fc, *_) = _simulate([fine, coarse], [EQUILIBRIUM], num_paths, s,
                                               workers)
        ok = ff & fc
        cf, cc = _finite_costs(cf, ok)[0][0], _finite_costs(cc, ok)[0][0]
        rich = 2 * cf - cc
        vs = value_functions(policy, [xv])
        V = vs.V if p.is_forward else vs.V_L
        cands = {"formula": V}
        for name, coef in (alternatives or {}).items():
            cands[name] = float(np.polyval(list(coef)[::-1], xv))
        rich_est = CostEstimate.from_samples(rich)
        rows.append(ValueRow(float(xv), V, CostEstimate.from_samples(cc, tag="J(2h)"),
                             CostEstimate.from_samples(cf, tag="J(h)"), rich_est.mean,
                             rich_est.se, cands))
    return ValueCheck(rows)


def discretization_budget(policy: EquilibriumPolicy, num_paths: int, steps: int | None = None,
                          seed=None, workers: int = 1) -> tuple[CostEstimate, CostEstimate]:
    """Equilibrium cost at ``h`` and ``h/2`` on shared chains and Brownian paths."""
    p = policy.problem
    steps = policy.grid.steps // 2 if steps is None else int(steps)
    fine = _context(p, policy, 2 * steps)
    coarse = _context(p, policy, steps)
    (cf, ff, *_), (cc, fc, *_) = _simulate([fine, coarse], [EQUILIBRIUM], num_paths, seed, workers)
    ok = ff & fc
    tag = "J" if p.is_forward else "J_L"
    return (CostEstimate.from_samples(_finite_costs(cc, ok)[0][0], tag),
            CostEstimate.from_samples(_finite_costs(cf, ok)[0][0], tag))


def budget_ok(coarse: CostEstimate, fine: CostEstimate, k: float = 3.0) -> bool:
    """``|J(h) - J(h/2)| <= k (SE(h) + SE(h/2))``, with a rounding floor.

    The floor, a few hundred ulps of the cost, matters only when the
    estimates have no sampling variance at all.
    """
    floor = 256 * np.finfo(float).eps * max(abs(coarse.mean), abs(fine.mean), 1.0)
    return abs(fine.mean - coarse.mean) <= k * (coarse.se + fine.se) + floor


# -- convexity probes --------------------------------------------------------------------

PROBE_STEPS = 100


def convexity_probe(p: ProblemData, num_probes: int, paths: int, rng=None,
                    steps: int | None = None, workers: int = 1) -> ConvexityReport:
    """Ratios ``J0(0,i;u1,0)/E int|u1|^2`` and ``J0(0,i;0,u2)/E int|u2|^2``.

    The homogeneous problem (zero forcing and terminal linear term, ``x = 0``)
    is simulated under random unit-energy deterministic probes, all sharing
    chains and Brownian increments, once for every initial regime ``i``.
    Cost and control energy are both estimated on the same paths and the
    ratio of their means is reported with a delta-method standard error,
    floored at the rounding level of the ratio.  Ratio arrays have shape
    ``(D, num_probes)``.
    """
    if not p.is_forward:
        raise UnsupportedError("convexity probes need a forward problem")
    if num_probes < 1 or paths < 2:
        raise ValueError("need positive probe and path counts")
    q = p.homogeneous()
    steps = q.grid(PROBE_STEPS if steps is None else int(steps)).steps
    h = q.grid(steps).h
    streams = seed_sequence(rng).spawn(q.D)
    ratios = np.empty((2, q.D, num_probes))
    ses = np.empty_like(ratios)
    redrawn = 0
    for i, ss in enumerate(streams):
        dir_seed, path_seed = ss.spawn(2)
        g = np.random.default_rng(dir_seed)
        U1, red1 = random_directions(q, num_probes, q.m1, steps, g, i + 1)
        U2, red2 = random_directions(q, num_probes, q.m2, steps, g, i + 1)
        redrawn += red1 + red2
        scen = [Scenario(a1=0.0, a2=0.0, v=u) for u in U1]
        scen += [Scenario(a1=0.0, a2=0.0, w=u) for u in U2]
        ctx = _context(q, None, steps, i0=i + 1)
        cost, finite, _, regs, _ = _simulate([ctx], scen, paths, path_seed, workers)[0]
        cost, _ = _finite_costs(cost, finite)
        reg = np.concatenate(regs)[finite][:, :-1]
        occ = np.zeros((reg.shape[0], steps, q.D))
        np.put_along_axis(occ, reg[..., None], 1.0, axis=-1)
        norms = np.concatenate([np.sum(U1**2, -1), np.sum(U2**2, -1)]) * h
        energy = occ.reshape(occ.shape[0], -1) @ norms.reshape(len(scen), -1).T
        ratio, se = _ratio(cost, energy.T)
        ratios[:, i] = ratio.reshape(2, num_probes)
        ses[:, i] = se.reshape(2, num_probes)
    r1, r2 = ratios
    return ConvexityReport(num_probes, float(r1.min()), float(r2.max()), r1, ses[0], r2, ses[1],
                           r1.min(axis=1), r2.max(axis=1), redrawn)


def _ratio(num: NDArray, den: NDArray) -> tuple[NDArray, NDArray]:
    """Ratio of row means with its delta-method standard error."""
    n = num.shape[1]
    mn, md = num.mean(axis=1), den.mean(axis=1)
    r = mn / md
    se = (num - r[:, None] * den).std(axis=1, ddof=1) / (np.sqrt(n) * np.abs(md))
    return r, np.maximum(se, 64 * np.finfo(float).eps * np.abs(r))
