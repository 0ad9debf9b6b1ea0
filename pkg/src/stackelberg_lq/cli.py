"""Command-line driver: problem file in, CSV tables and reports out.

Exit codes: 0 success, 2 bad input (arguments or problem file), 3 solver
failure, 4 a verification check failed.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import io
from .coefficients import one_dim_rewrite
from .equilibrium import EquilibriumPolicy, solve_equilibrium, value_functions
from .errors import ProblemFormatError, SolverError, UnsupportedError
from .model import ProblemData, read_problem
from .montecarlo import (budget_ok, convexity_probe, default_workers, discretization_budget,
                         saddle_probe, simulate_closed_loop, stationarity_residual,
                         value_check)
from .riccati import lambda_limit_study, solvability_certificate, solve_follower_cdre

EXIT_OK, EXIT_PARSE, EXIT_SOLVER, EXIT_VERIFY = 0, 2, 3, 4
OUT_ENV = "STACKELBERG_LQ_OUT"
SUBCOMMANDS = ("solve-follower", "solve-leader", "equilibrium", "verify", "lambda-study",
               "certify")
DEFAULT_LAMBDAS = (10.0, 1e2, 1e3, 1e4)


class ConfigError(ValueError):
    """Run configuration violates its invariants."""


@dataclass
class RunConfig:
    """Validated settings for one pipeline stage."""

    subcommand: str
    problem: Path
    steps: int | None = None
    paths: int = 10_000
    seed: int = 0
    lambdas: tuple[float, ...] = DEFAULT_LAMBDAS
    out: Path = Path(".")
    workers: int = 1
    tol: float = 1e-8
    residual_tol: float = 1e-9
    k_se: float = 3.0
    mc_steps: int | None = None
    xs: tuple[float, ...] | None = None
    candidates: dict[str, tuple[float, ...]] = field(default_factory=dict)
    directions: int = 20
    eps: float = 0.1
    probes: int = 50
    every: int = 1

    def __post_init__(self):
        if self.subcommand not in SUBCOMMANDS:
            raise ConfigError(f"unknown subcommand {self.subcommand!r}")
        if self.steps is not None and self.steps < 10:
            raise ConfigError("--steps must be at least 10")
        if self.subcommand == "verify" and self.paths < 100:
            raise ConfigError("--paths must be at least 100 for verify")
        if self.paths < 1 or self.workers < 1 or self.every < 1:
            raise ConfigError("--paths, --workers and --every must be positive")
        if self.mc_steps is not None and self.mc_steps < 2:
            raise ConfigError("--mc-steps must be at least 2")
        if any(b <= a for a, b in zip(self.lambdas, self.lambdas[1:])):
            raise ConfigError("--lambdas must be strictly ascending")


# -- argument parsing -----------------------------------------------------------------

def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers: {text!r}") from exc


def _candidate(text: str) -> tuple[str, tuple[float, ...]]:
    name, sep, coef = text.partition("=")
    if not sep or not name:
        raise argparse.ArgumentTypeError("expected NAME=c0,c1,c2")
    return name, _floats(coef)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stackelberg-lq",
        description="Solve and verify regime-switching linear-quadratic Stackelberg games.")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    helps = {
        "solve-follower": "solve the follower Riccati system (riccati_P.csv)",
        "solve-leader": "solve the leader Riccati system (riccati_Sigma.csv)",
        "equilibrium": "solve everything and tabulate phi and the value functions",
        "verify": "equilibrium plus Monte Carlo verification (verify_report.txt)",
        "lambda-study": "convergence of the lambda-family to Sigma (lambda_study.csv)",
        "certify": "positivity certificate for scalar leader problems",
    }
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name, help=helps[name])
        sp.add_argument("problem", type=Path, help="problem file")
        sp.add_argument("--steps", type=int, help="Riccati grid steps (default: from file)")
        sp.add_argument("--paths", type=int, default=10_000, help="Monte Carlo paths")
        sp.add_argument("--seed", type=int, default=0, help="root random seed")
        sp.add_argument("--lambdas", type=_floats, default=DEFAULT_LAMBDAS,
                        help="ascending comma-separated lambda values")
        sp.add_argument("--out", type=Path, default=Path(os.environ.get(OUT_ENV, ".")),
                        help=f"output directory (default: ${OUT_ENV} or .)")
        sp.add_argument("--workers", type=int, default=default_workers(),
                        help="Monte Carlo worker threads")
        sp.add_argument("--tol", type=float, default=1e-8,
                        help="certificate margin and lambda monotonicity tolerance")
        sp.add_argument("--residual-tol", type=float, default=1e-9,
                        help="stationarity residual tolerance")
        sp.add_argument("--k-se", type=float, default=3.0, help="standard errors allowed")
        sp.add_argument("--mc-steps", type=int, help="Monte Carlo steps (default: <= 100)")
        sp.add_argument("--xs", type=_floats, help="initial states for the value check")
        sp.add_argument("--candidate", type=_candidate, action="append", default=[],
                        metavar="NAME=c0,c1,c2",
                        help="rival closed-form value c0 + c1 x + c2 x^2 (repeatable)")
        sp.add_argument("--directions", type=int, default=20, help="saddle probe directions")
        sp.add_argument("--eps", type=float, default=0.1, help="saddle probe scale")
        sp.add_argument("--probes", type=int, default=50, help="convexity probes")
        sp.add_argument("--every", type=int, default=1, help="write every k-th node")
    return parser


def parse_config(argv: Sequence[str] | None = None) -> RunConfig:
    parser = build_parser()
    a = parser.parse_args(argv)
    try:
        return RunConfig(a.subcommand, a.problem, a.steps, a.paths, a.seed, tuple(a.lambdas),
                         a.out, a.workers, a.tol, a.residual_tol, a.k_se, a.mc_steps,
                         a.xs, dict(a.candidate), a.directions, a.eps, a.probes, a.every)
    except ConfigError as exc:
        parser.error(str(exc))


# -- stages --------------------------------------------------------------------------------

def _mc_steps(cfg: RunConfig, N: int) -> int:
    """Largest divisor of ``N`` not above 100, unless given explicitly."""
    if cfg.mc_steps is not None:
        return cfg.mc_steps
    return max(d for d in range(1, min(N, 100) + 1) if N % d == 0)


def _write_P(cfg: RunConfig, sol) -> Path:
    return io.write_matrix_csv(cfg.out / "riccati_P.csv", "follower Riccati solution P(s)",
                               sol.grid, sol.values, cfg.every)


def _write_sigma(cfg: RunConfig, sol) -> Path:
    return io.write_matrix_csv(cfg.out / "riccati_Sigma.csv", "leader Riccati solution Sigma(s)",
                               sol.grid, sol.values, cfg.every)


def _write_equilibrium(cfg: RunConfig, pol: EquilibriumPolicy) -> list[Path]:
    out = [_write_sigma(cfg, pol.sigma)]
    if pol.P is not None:
        out.append(_write_P(cfg, pol.P))
    out.append(io.write_matrix_csv(cfg.out / "phi_table.csv", "leader adjoint offset phi(s)",
                                   pol.grid, pol.phi.values, cfg.every))
    p = pol.problem
    rows = []
    for i in range(1, p.D + 1):
        v = value_functions(pol, p.x, i)
        row = {"regime": i}
        row.update({f"x{k + 1}": float(xv) for k, xv in enumerate(p.x)})
        row.update(v.as_dict())
        rows.append(row)
    out.append(io.write_records(cfg.out / "values.csv",
                                "value functions at the problem's initial state", rows))
    return out


def _lambda_study(cfg: RunConfig, pol: EquilibriumPolicy) -> tuple[list[Path], bool, list[str]]:
    study = lambda_limit_study(pol.tb, pol.lb, pol.hat, pol.problem.generator, cfg.lambdas,
                               sigma=pol.sigma, tol=cfg.tol)
    rows = [{"lambda": r.lam, "distance": r.distance, "monotone_gap": r.monotone_gap,
             "monotone": r.monotone, "min_eig": r.min_eig,
             "min_eig_plus_T11t": r.min_eig_plus_T11t, "max_substeps": r.max_substeps,
             "error": r.error or ""} for r in study.rows]
    path = io.write_records(cfg.out / "lambda_study.csv",
                            "distance between inverse lambda-solutions and Sigma", rows)
    ok = study.strictly_decreasing() and study.monotone()
    lines = [f"lambda={r.lam:g} distance={r.distance:.6e} gap={r.monotone_gap:.3e}"
             + (f" error: {r.error}" if r.error else "") for r in study.rows]
    lines.append(f"strictly decreasing: {study.strictly_decreasing()}; "
                 f"monotone within {cfg.tol:g}: {study.monotone()}")
    return [path], ok, lines


def _certify(cfg: RunConfig, pol: EquilibriumPolicy) -> tuple[bool, list[str]]:
    cert = solvability_certificate(one_dim_rewrite(pol.problem, pol.hat, pol.lb, pol.tb),
                                   tol=0.0)
    ok = bool(np.all(cert.min_eig > cfg.tol)) if cfg.tol > 0 else cert.passed
    lines = [f"regime {i}: min eigenvalue {v:.17g}" for i, v in cert.margins().items()]
    lines.append(f"certificate {'PASS' if ok else 'FAIL'}")
    return ok, lines


@dataclass
class Check:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


def verify(cfg: RunConfig, pol: EquilibriumPolicy) -> list[Check]:
    """Monte Carlo verification of a solved equilibrium."""
    p = pol.problem
    N = pol.grid.steps
    steps = _mc_steps(cfg, N)
    k = cfg.k_se
    seeds = np.random.SeedSequence(cfg.seed).spawn(5)
    checks = []

    bundle = simulate_closed_loop(pol, min(cfg.paths, 1000), steps, seeds[0],
                                  workers=cfg.workers)
    res = stationarity_residual(bundle, pol)
    checks.append(Check("stationarity residual", res.max < cfg.residual_tol,
                        f"max {res.max:.3e} over {res.count} nodes (tol {cfg.residual_tol:g})"))

    xs = cfg.xs if cfg.xs is not None else tuple(float(v) for v in p.x[:1])
    if p.n == 1:
        vsteps = steps if steps % 2 == 0 else 2 * steps
        vc = value_check(pol, xs, cfg.paths, seeds[1], vsteps, cfg.candidates, cfg.workers)
        for r in vc.rows:
            r.k = k
            cand = ", ".join(f"{n}={v:.10g}" for n, v in r.candidates.items())
            checks.append(Check(f"value at x={r.x:g}", r.agrees(r.V),
                                f"MC {r.J_rich:.10g} +/- {r.se_rich:.3g} "
                                f"(h: {r.J_fine.mean:.10g}, 2h: {r.J_coarse.mean:.10g}, "
                                f"tolerance {r.tolerance:.3g}); {cand}"))
        if cfg.candidates:
            winner = vc.winner
            checks.append(Check("value resolution", winner is not None,
                                f"winner: {winner}; agreeing: "
                                + ", ".join(n for n in vc.rows[0].candidates if vc.agree(n))))

    coarse, fine = discretization_budget(pol, cfg.paths, steps, seeds[2], cfg.workers)
    gap = abs(fine.mean - coarse.mean)
    checks.append(Check("discretization budget", budget_ok(coarse, fine, k),
                        f"|J(h)-J(h/2)| = {gap:.3e} vs {k:g}(SE+SE) = "
                        f"{k * (coarse.se + fine.se):.3e}"))

    if p.is_forward:
        pr = saddle_probe(pol, cfg.eps, cfg.directions, cfg.paths, seeds[3], steps,
                          workers=cfg.workers)
        pr.k = k
        checks.append(Check("follower inequalities", pr.follower_rate == 1.0,
                            f"{pr.follower_rate:.0%} of {pr.follower_ok.size} hold at {k:g} SE"))
        checks.append(Check("leader inequalities", pr.leader_rate >= 0.95,
                            f"{pr.leader_rate:.0%} of {pr.leader_ok.size} hold at {k:g} SE"
                            + (f"; {len(pr.skipped)} skipped" if pr.skipped else "")))
        conv = convexity_probe(p, cfg.probes, min(cfg.paths, 8192), seeds[4],
                               workers=cfg.workers)
        checks.append(Check(
            "convexity evidence", conv.convex_ok(0.0, k) and conv.concave_ok(0.0, k),
            f"min u1 ratio {conv.min_ratio_u1:.6g}, max u2 ratio {conv.max_ratio_u2:.6g} "
            f"over {conv.num_probes} probes per regime ({conv.label})"))
    return checks


def run(cfg: RunConfig) -> int:
    """Execute one stage; returns the exit status."""
    try:
        p = read_problem(cfg.problem)
    except OSError as exc:
        print(f"error: cannot read {cfg.problem}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_PARSE
    except ProblemFormatError as exc:
        print(f"error: {cfg.problem}: {exc}", file=sys.stderr)
        return EXIT_PARSE
    try:
        cfg.out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"error: cannot create {cfg.out}: {exc}", file=sys.stderr)
        return EXIT_PARSE
    try:
        return _run(cfg, p)
    except (SolverError, UnsupportedError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


def _run(cfg: RunConfig, p: ProblemData) -> int:
    status = EXIT_OK
    lines: list[str] = []
    if cfg.subcommand == "solve-follower":
        if not p.is_forward:
            raise UnsupportedError("backward problems have no follower Riccati equation")
        sol = solve_follower_cdre(p, cfg.steps)
        _write_P(cfg, sol)
        lines.append(f"max ODE residual {sol.meta['max_residual']:.3e}")
    else:
        pol = solve_equilibrium(p, cfg.steps)
        if cfg.subcommand == "solve-leader":
            _write_sigma(cfg, pol.sigma)
            if pol.P is not None:
                _write_P(cfg, pol.P)
            lines.append(f"max cond(That) {pol.sigma.meta['max_cond_That']:.3e}")
        elif cfg.subcommand == "equilibrium":
            _write_equilibrium(cfg, pol)
        elif cfg.subcommand == "lambda-study":
            _, ok, more = _lambda_study(cfg, pol)
            lines += more
            status = EXIT_OK if ok else EXIT_VERIFY
        elif cfg.subcommand == "certify":
            ok, more = _certify(cfg, pol)
            lines += more
            status = EXIT_OK if ok else EXIT_VERIFY
        elif cfg.subcommand == "verify":
            _write_equilibrium(cfg, pol)
            checks = verify(cfg, pol)
            lines += [c.line() for c in checks]
            ok = all(c.passed for c in checks)
            lines.append(f"overall: {'PASS' if ok else 'FAIL'}")
            report = [f"# verification report for {cfg.problem.name}",
                      f"# seed={cfg.seed} paths={cfg.paths}"] + lines
            (cfg.out / "verify_report.txt").write_text("\n".join(report) + "\n")
            status = EXIT_OK if ok else EXIT_VERIFY
    for ln in lines:
        print(ln)
    return status


def main(argv: Sequence[str] | None = None) -> int:
    return run(parse_config(argv))


if __name__ == "__main__":
    sys.exit(main())
