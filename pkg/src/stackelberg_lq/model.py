"""Game data, problem files and the convexity certificate.

Two kinds of problem are supported.

``forward``
    The full zero-sum game: state coefficients ``A, B1, B2, C, D1, D2, b,
    sigma``, weights ``Q, R1, R2, M`` and terminal linear term ``m``.
``backward``
    A leader-side backward LQ problem given directly by its reduced blocks
    ``Ahat, Chat, Hhat, G, S1, S2, T11, T12, T22`` and forcing ``fhat, q,
    rho1, rho2``.

Problem file layout::

    [meta]
    T = 1
    n = 1
    m1 = 1
    m2 = 1
    D = 2
    grid_steps = 1000
    kind = forward            # optional

    [generator]
    -0.5 0.5
    0.7 -0.7                  # or: rates = -0.5 0.5; 0.7 -0.7

    [regime 1]
    B2 = 1
    R1 = 5
    A@0:0.5 = 1               # piecewise-constant in time
    A@0.5:1 = 2

    [initial]
    x = 1
    i = 1

Matrices are row-major literals ``r11 r12; r21 r22``.  Missing
coefficients default to zero, except the control weights, which are
required.
"""

from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping

import numpy as np
from numpy.typing import NDArray

from .errors import DimensionError, ProblemFormatError
from .grid import PiecewiseConstant, TimeGrid, make_grid
from .regime import Generator, validate_generator

SYM_TOL = 1e-12

FORWARD_KEYS: dict[str, tuple[str, ...]] = {
    "A": ("n", "n"), "B1": ("n", "m1"), "B2": ("n", "m2"), "C": ("n", "n"),
    "D1": ("n", "m1"), "D2": ("n", "m2"), "b": ("n",), "sigma": ("n",),
    "Q": ("n", "n"), "R1": ("m1", "m1"), "R2": ("m2", "m2"), "M": ("n", "n"),
    "m": ("n",),
}
BACKWARD_KEYS: dict[str, tuple[str, ...]] = {
    "Ahat": ("n", "n"), "Chat": ("n", "n"), "Hhat": ("n", "m2"),
    "G": ("n", "n"), "S1": ("n", "n"), "S2": ("m2", "n"), "T11": ("n", "n"),
    "T12": ("n", "m2"), "T22": ("m2", "m2"), "fhat": ("n",), "q": ("n",),
    "rho1": ("n",), "rho2": ("m2",), "m": ("n",),
}
SYMMETRIC = {"Q", "R1", "R2", "M", "G", "T11", "T22"}
TERMINAL = {"M", "m"}
REQUIRED = {"forward": {"R1", "R2"}, "backward": {"T22"}}
META_INT = ("n", "m1", "m2", "D", "grid_steps")


def keys_for(kind: str) -> dict[str, tuple[str, ...]]:
    if kind == "forward":
        return FORWARD_KEYS
    if kind == "backward":
        return BACKWARD_KEYS
    raise ProblemFormatError(f"unknown problem kind {kind!r}")


@dataclass(frozen=True)
class ProblemData:
    """Immutable description of one game (or reduced backward problem).

    Coefficients are stored as :class:`PiecewiseConstant` tables over a
    common set of interior breakpoints, values of shape ``(pieces, D, ...)``.
    Terminal data ``M`` and ``m`` are constant in time.
    """

    kind: str
    T: float
    n: int
    m1: int
    m2: int
    generator: Generator
    coeffs: Mapping[str, PiecewiseConstant]
    x: NDArray
    i0: int
    grid_steps: int = 1000

    def __post_init__(self):
        object.__setattr__(self, "coeffs", MappingProxyType(dict(self.coeffs)))
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float).reshape(self.n))
        if not 1 <= self.i0 <= self.D:
            raise ProblemFormatError(f"initial regime {self.i0} outside 1..{self.D}")

    # -- construction -------------------------------------------------------
    @classmethod
    def build(cls, kind: str, T: float, generator: Generator | NDArray, x, i0: int = 1,
              grid_steps: int = 1000, knots=(), **coefs) -> "ProblemData":
        """Create a problem from per-regime arrays.

        Each coefficient is an array of shape ``(D, ...)`` (constant in time)
        or ``(pieces, D, ...)`` together with ``knots``.  Dimensions are
        inferred from the arrays; absent coefficients are zero.
        """
        g = generator if isinstance(generator, Generator) else Generator(np.asarray(generator, float))
        validate_generator(g)
        D = g.num_regimes
        spec = keys_for(kind)
        unknown = set(coefs) - set(spec)
        if unknown:
            raise ProblemFormatError(f"unknown coefficient(s) {sorted(unknown)}")
        x = np.atleast_1d(np.asarray(x, dtype=float))
        dims = {"n": x.size}
        npieces = len(knots) + 1
        arrays = {}
        for key, val in coefs.items():
            a = np.asarray(val, dtype=float)
            rank = len(spec[key])
            if a.ndim == 1:
                # per-regime scalars for a 1x1 (or length-1) coefficient
                a = a.reshape((D,) + (1,) * rank)
            if a.ndim == rank + 1:
                a = np.broadcast_to(a, (npieces,) + a.shape).copy()
            if a.ndim != rank + 2 or a.shape[1] != D or a.shape[0] != npieces:
                raise DimensionError(key, ("pieces", D) + spec[key], a.shape)
            for sym, size in zip(spec[key], a.shape[2:]):
                if dims.setdefault(sym, size) != size:
                    raise DimensionError(key, tuple(dims.get(s, "?") for s in spec[key]), a.shape[2:])
            arrays[key] = a
        dims.setdefault("m1", 0 if kind == "backward" else 1)
        dims.setdefault("m2", 1)
        tables = {}
        for key, sh in spec.items():
            shape = tuple(dims[s] for s in sh)
            a = arrays.get(key, np.zeros((npieces, D) + shape))
            if key in SYMMETRIC:
                a = _symmetrize(key, a)
            tables[key] = PiecewiseConstant(knots, a)
        return cls(kind, float(T), dims["n"], dims["m1"], dims["m2"], g, tables, x, int(i0),
                   int(grid_steps))

    # -- accessors ----------------------------------------------------------
    @property
    def D(self) -> int:
        return self.generator.num_regimes

    @property
    def is_forward(self) -> bool:
        return self.kind == "forward"

    def coef(self, key: str) -> PiecewiseConstant:
        return self.coeffs[key]

    def on_cells(self, key: str, grid: TimeGrid) -> NDArray:
        """Coefficient per grid cell and regime, shape ``(steps, D, ...)``."""
        return self.coeffs[key].on_cells(grid)

    def terminal(self, key: str) -> NDArray:
        """Terminal data (``M`` or ``m``) per regime."""
        return self.coeffs[key].values[-1]

    def breakpoints(self) -> list[float]:
        pts = set(float(t) for t in self.generator.knots)
        for tab in self.coeffs.values():
            pts.update(float(t) for t in tab.knots)
        return sorted(pts)

    def grid(self, steps: int | None = None) -> TimeGrid:
        """Uniform grid with at least ``steps`` cells containing every breakpoint."""
        steps = self.grid_steps if steps is None else int(steps)
        return make_grid(self.T, self.breakpoints(), steps)

    def replace(self, **changes) -> "ProblemData":
        """Copy with some fields or coefficients replaced.

        Coefficient keys take per-regime arrays constant in time.
        """
        coefs = {k: changes.pop(k) for k in list(changes) if k in keys_for(self.kind)}
        new = dataclasses.replace(self, **changes)
        if coefs:
            tables = dict(new.coeffs)
            for k, v in coefs.items():
                old = tables[k]
                v = np.asarray(v, dtype=float)
                if v.ndim == 1 and v.size == self.D:
                    v = v.reshape((self.D,) + (1,) * (old.values.ndim - 2))
                a = np.broadcast_to(v, old.values.shape).copy()
                tables[k] = PiecewiseConstant(old.knots, a)
            new = dataclasses.replace(new, coeffs=tables)
        return new

    def homogeneous(self) -> "ProblemData":
        """The problem with zero forcing, zero terminal linear term and ``x = 0``."""
        zeros = {k: 0.0 for k in ("b", "sigma", "m", "fhat", "q", "rho1", "rho2")
                 if k in self.coeffs}
        return self.replace(x=np.zeros(self.n), **zeros)


def _symmetrize(key: str, a: NDArray, line: int | None = None) -> NDArray:
    asym = np.max(np.abs(a - np.swapaxes(a, -1, -2)), initial=0.0)
    if asym > SYM_TOL:
        raise ProblemFormatError(f"{key} is not symmetric (asymmetry {asym:.3e})", line)
    return 0.5 * (a + np.swapaxes(a, -1, -2))


@dataclass
class ConvexityReport:
    """Sampled evidence for the uniform convexity / concavity conditions.

    A necessary-condition check only: ratios of the homogeneous cost to the
    control energy over random deterministic regime-indexed probes.
    """

    num_probes: int
    min_ratio_u1: float
    max_ratio_u2: float
    ratios_u1: NDArray
    se_u1: NDArray
    ratios_u2: NDArray
    se_u2: NDArray
    per_regime_u1: NDArray
    per_regime_u2: NDArray
    redrawn: int = 0
    label: str = "necessary-condition evidence"

    def convex_ok(self, level: float = 1.0, k: float = 3.0) -> bool:
        """Every follower ratio is at least ``level`` up to ``k`` standard errors."""
        return bool(np.all(self.ratios_u1 >= level - k * self.se_u1))

    def concave_ok(self, level: float = -1.0, k: float = 3.0) -> bool:
        return bool(np.all(self.ratios_u2 <= level + k * self.se_u2))


def probe_convexity(p: ProblemData, num_probes: int, paths: int, rng, steps: int | None = None,
                    workers: int = 1) -> ConvexityReport:
    """Monte Carlo probe of the convexity (follower) and concavity (leader) conditions."""
    from .montecarlo import convexity_probe

    return convexity_probe(p, num_probes, paths, rng, steps=steps, workers=workers)


# -- problem files ------------------------------------------------------------

_SECTION = re.compile(r"^\[\s*([A-Za-z]+)(?:\s+(\d+))?\s*\]$")
_KEY = re.compile(r"^([A-Za-z_][A-Za-z0-9_]*)(?:@([^=\s]+))?\s*=\s*(.*)$")


def parse_literal(text: str, line: int | None = None) -> NDArray:
    """Parse ``r11 r12; r21 r22`` into a 2-D float array."""
    rows = [r for r in text.strip().rstrip(";").split(";")]
    out = []
    for r in rows:
        toks = r.replace(",", " ").split()
        if not toks:
            raise ProblemFormatError("empty matrix row", line)
        try:
            out.append([float(t) for t in toks])
        except ValueError as exc:
            raise ProblemFormatError(f"bad number in {text.strip()!r}", line) from exc
    widths = {len(r) for r in out}
    if len(widths) != 1:
        raise ProblemFormatError(f"ragged matrix literal {text.strip()!r}", line)
    return np.array(out, dtype=float)


def _fit_shape(key: str, a: NDArray, shape: tuple[int, ...], line: int) -> NDArray:
    if len(shape) == 1:
        if a.size == shape[0] and (a.shape[0] == 1 or a.shape[1] == 1):
            return a.reshape(shape)
        raise DimensionError(key, shape, a.shape, line)
    if a.shape != shape:
        raise DimensionError(key, shape, a.shape, line)
    return a


def _interval(spec: str, key: str, line: int) -> tuple[float, float]:
    try:
        lo, hi = (float(v) for v in spec.split(":"))
    except ValueError as exc:
        raise ProblemFormatError(f"bad time interval @{spec} on {key}", line) from exc
    if not lo < hi:
        raise ProblemFormatError(f"empty time interval @{spec} on {key}", line)
    return lo, hi


def load_problem(source: str) -> ProblemData:
    """Parse problem-file text into a validated :class:`ProblemData`."""
    section = None
    meta: dict[str, tuple[str, int]] = {}
    gen_rows: list[tuple[str, int]] = []
    gen_keyed: list[tuple[tuple[float, float] | None, str, int]] = []
    regimes: dict[int, list[tuple[str, tuple[float, float] | None, str, int]]] = {}
    initial: dict[str, tuple[str, int]] = {}

    for no, raw in enumerate(source.splitlines(), start=1):
        text = raw.split("#", 1)[0].strip()
        if not text:
            continue
        m = _SECTION.match(text)
        if m:
            name, idx = m.group(1).lower(), m.group(2)
            if name == "regime":
                if idx is None:
                    raise ProblemFormatError("regime section needs an index", no)
                section = ("regime", int(idx))
                regimes.setdefault(int(idx), [])
            elif name in ("meta", "generator", "initial") and idx is None:
                section = (name, None)
            else:
                raise ProblemFormatError(f"unknown section [{text[1:-1]}]", no)
            continue
        if section is None:
            raise ProblemFormatError("content before the first section", no)
        km = _KEY.match(text)
        if section[0] == "generator":
            if km:
                if km.group(1) != "rates":
                    raise ProblemFormatError(f"unknown generator key {km.group(1)!r}", no)
                iv = _interval(km.group(2), "rates", no) if km.group(2) else None
                gen_keyed.append((iv, km.group(3), no))
            else:
                gen_rows.append((text, no))
            continue
        if not km:
            raise ProblemFormatError(f"expected 'key = value', got {text!r}", no)
        key, iv_text, value = km.group(1), km.group(2), km.group(3)
        if section[0] == "meta":
            if iv_text:
                raise ProblemFormatError("meta keys cannot be time-dependent", no)
            meta[key] = (value.strip(), no)
        elif section[0] == "initial":
            initial[key] = (value.strip(), no)
        else:
            iv = _interval(iv_text, key, no) if iv_text else None
            regimes[section[1]].append((key, iv, value, no))

    def meta_get(key, conv, default=None):
        if key not in meta:
            if default is None:
                raise ProblemFormatError(f"[meta] is missing {key!r}")
            return default
        val, no = meta[key]
        try:
            return conv(val)
        except ValueError as exc:
            raise ProblemFormatError(f"bad value for {key}: {val!r}", no) from exc

    kind = meta_get("kind", str, "forward").lower()
    spec = keys_for(kind)
    T = meta_get("T", float)
    if not T > 0:
        raise ProblemFormatError("T must be positive", meta["T"][1])
    dims = {"n": meta_get("n", int), "m1": meta_get("m1", int, 0 if kind == "backward" else -1),
            "m2": meta_get("m2", int), "D": meta_get("D", int)}
    if dims["m1"] < 0:
        raise ProblemFormatError("[meta] is missing 'm1'")
    for k in ("n", "m2", "D"):
        if dims[k] < 1:
            raise ProblemFormatError(f"{k} must be positive", meta[k][1])
    steps = meta_get("grid_steps", int, 1000)
    unknown = set(meta) - {"T", "kind", *META_INT}
    if unknown:
        k = sorted(unknown)[0]
        raise ProblemFormatError(f"unknown meta key {k!r}", meta[k][1])
    D = dims["D"]

    # generator
    if gen_rows and gen_keyed:
        raise ProblemFormatError("mix of bare rows and 'rates =' in [generator]", gen_rows[0][1])
    if gen_rows:
        gen_keyed = [(None, "; ".join(r for r, _ in gen_rows), gen_rows[0][1])]
    if not gen_keyed:
        raise ProblemFormatError("missing [generator] section")
    gen_pieces = []
    for iv, val, no in gen_keyed:
        lam = parse_literal(val, no)
        if lam.shape != (D, D):
            raise DimensionError("generator", (D, D), lam.shape, no)
        gen_pieces.append((iv, lam, no))

    # regimes
    if sorted(regimes) != list(range(1, D + 1)):
        raise ProblemFormatError(f"expected sections [regime 1]..[regime {D}], got {sorted(regimes)}")

    knots: set[float] = set()
    for iv, _, _ in gen_pieces:
        if iv:
            knots.update(iv)
    entries: dict[str, dict[int, list]] = {}
    for r, items in regimes.items():
        for key, iv, value, no in items:
            if key not in spec:
                raise ProblemFormatError(f"unknown coefficient {key!r} for a {kind} problem", no)
            if iv and key in TERMINAL:
                raise ProblemFormatError(f"terminal data {key} cannot be time-dependent", no)
            shape = tuple(dims[s] for s in spec[key])
            a = _fit_shape(key, parse_literal(value, no), shape, no)
            if key in SYMMETRIC:
                a = _symmetrize(key, a, no)
            if iv:
                if iv[0] < -1e-12 or iv[1] > T + 1e-12:
                    raise ProblemFormatError(f"interval @{iv[0]:g}:{iv[1]:g} outside [0, T]", no)
                knots.update(iv)
            entries.setdefault(key, {}).setdefault(r, []).append((iv, a, no))
    interior = sorted(t for t in knots if 1e-12 < t < T - 1e-12)
    cuts = [0.0] + interior + [T]
    mids = [(a + b) / 2 for a, b in zip(cuts[:-1], cuts[1:])]

    def resolve(pieces, mid, key):
        default, hit = None, None
        for iv, a, no in pieces:
            if iv is None:
                if default is not None:
                    raise ProblemFormatError(f"{key} given twice", no)
                default = a
            elif iv[0] <= mid < iv[1]:
                if hit is not None:
                    raise ProblemFormatError(f"overlapping intervals for {key}", no)
                hit = a
        return hit if hit is not None else default

    tables = {}
    for key, sh in spec.items():
        shape = tuple(dims[s] for s in sh)
        vals = np.zeros((len(mids), D) + shape)
        for r in range(1, D + 1):
            pieces = entries.get(key, {}).get(r, [])
            if not pieces and key in REQUIRED[kind]:
                raise ProblemFormatError(f"[regime {r}] is missing required {key}")
            for pi, mid in enumerate(mids):
                a = resolve(pieces, mid, key)
                if a is None and pieces:
                    raise ProblemFormatError(f"{key} in regime {r} does not cover s={mid:g}",
                                             pieces[0][2])
                if a is not None:
                    vals[pi, r - 1] = a
        tables[key] = PiecewiseConstant(interior, vals)

    gvals = np.zeros((len(mids), D, D))
    for pi, mid in enumerate(mids):
        lam = resolve(gen_pieces, mid, "generator")
        if lam is None:
            raise ProblemFormatError(f"generator does not cover s={mid:g}")
        gvals[pi] = lam
    gen = Generator(gvals, interior)
    validate_generator(gen)

    if "x" not in initial:
        if kind == "forward":
            raise ProblemFormatError("[initial] is missing x")
        x = np.zeros(dims["n"])
    else:
        val, no = initial["x"]
        x = _fit_shape("x", parse_literal(val, no), (dims["n"],), no)
    i0 = 1
    if "i" in initial:
        val, no = initial["i"]
        try:
            i0 = int(val)
        except ValueError as exc:
            raise ProblemFormatError(f"bad initial regime {val!r}", no) from exc
        if not 1 <= i0 <= D:
            raise ProblemFormatError(f"initial regime {i0} outside 1..{D}", no)
    return ProblemData(kind, T, dims["n"], dims["m1"], dims["m2"], gen, tables, x, i0, steps)


def read_problem(path) -> ProblemData:
    with open(path, encoding="utf-8") as fh:
        return load_problem(fh.read())


def _fmt(a: NDArray) -> str:
    a = np.atleast_2d(np.asarray(a, dtype=float))
    return "; ".join(" ".join(repr(float(v)) for v in row) for row in a)


def dump_problem(p: ProblemData) -> str:
    """Serialise a problem; numbers use the shortest round-trip representation."""
    lines = ["[meta]", f"kind = {p.kind}", f"T = {p.T!r}", f"n = {p.n}", f"m1 = {p.m1}",
             f"m2 = {p.m2}", f"D = {p.D}", f"grid_steps = {p.grid_steps}", "", "[generator]"]
    gk = [0.0] + list(p.generator.knots) + [p.T]
    if len(p.generator.pieces) == 1:
        lines.append(f"rates = {_fmt(p.generator.pieces[0])}")
    else:
        for lo, hi, lam in zip(gk[:-1], gk[1:], p.generator.pieces):
            lines.append(f"rates@{lo!r}:{hi!r} = {_fmt(lam)}")
    for r in range(p.D):
        lines += ["", f"[regime {r + 1}]"]
        for key in keys_for(p.kind):
            tab = p.coeffs[key]
            vec = len(keys_for(p.kind)[key]) == 1
            if tab.is_constant() or len(tab.values) == 1:
                v = tab.values[0, r]
                lines.append(f"{key} = {_fmt(v[None] if vec else v)}")
            else:
                ck = [0.0] + list(tab.knots) + [p.T]
                for lo, hi, v in zip(ck[:-1], ck[1:], tab.values[:, r]):
                    lines.append(f"{key}@{lo!r}:{hi!r} = {_fmt(v[None] if vec else v)}")
    lines += ["", "[initial]", f"x = {_fmt(p.x[None])}", f"i = {p.i0}", ""]
    return "\n".join(lines)
