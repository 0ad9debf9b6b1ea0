from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stackelberg_lq.errors import DimensionError, GeneratorError, ProblemFormatError
from stackelberg_lq.model import ProblemData, dump_problem, load_problem, probe_convexity

HEADER = """[meta]
T = 1
n = 1
m1 = 1
m2 = 1
D = 2
[generator]
-0.5 0.5
0.7 -0.7
"""


def _regimes(r1_first: str = "5") -> str:
    return (f"[regime 1]\nB2 = 1\nD1 = 2\nR1 = {r1_first}\nR2 = -1\nM = -1\n"
            "[regime 2]\nB2 = -2\nD1 = 1\nR1 = 2\nR2 = -4\nM = -1\n[initial]\nx = 1\n")


class TestLoadProblem:
    def test_first_example_coefficients(self, ex1):
        assert (ex1.n, ex1.m1, ex1.m2, ex1.D, ex1.kind) == (1, 1, 1, 2, "forward")
        for key, want in {"B2": [1, -2], "D1": [2, 1], "R1": [5, 2], "R2": [-1, -4],
                          "M": [-1, -1], "A": [0, 0], "C": [0, 0], "D2": [0, 0],
                          "B1": [0, 0]}.items():
            np.testing.assert_array_equal(ex1.coef(key).values[0].ravel(), want)
        np.testing.assert_array_equal(ex1.generator.pieces[0], [[-0.5, 0.5], [0.7, -0.7]])
        assert ex1.x[0] == 1.0 and ex1.i0 == 1

    def test_second_example_is_backward(self, ex2):
        assert ex2.kind == "backward" and ex2.m1 == 0
        np.testing.assert_array_equal(ex2.coef("G").values[0].ravel(), [3, 5])
        np.testing.assert_array_equal(ex2.coef("m").values[0].ravel(), [1, -1])

    def test_dimension_mismatch_names_key(self):
        with pytest.raises(DimensionError, match="R1"):
            load_problem(HEADER + _regimes("5; 2; 3"))

    def test_parse_error_has_line_number(self):
        text = HEADER + _regimes().replace("R2 = -1", "R2 -1")
        with pytest.raises(ProblemFormatError) as info:
            load_problem(text)
        assert info.value.line == text.splitlines().index("R2 -1") + 1

    def test_asymmetric_weight_rejected(self):
        text = HEADER.replace("n = 1", "n = 2") + _regimes().replace(
            "M = -1\n[regime 2]", "M = -1\nQ = 1 2; 0 1\n[regime 2]")
        text = text.replace("B2 = 1", "B2 = 1; 0").replace("B2 = -2", "B2 = -2; 0")
        text = text.replace("D1 = 2", "D1 = 2; 0").replace("D1 = 1", "D1 = 1; 0")
        text = text.replace("M = -1", "M = -1 0; 0 -1").replace("x = 1", "x = 1 0")
        with pytest.raises(ProblemFormatError, match="symmetric"):
            load_problem(text)

    def test_bad_generator(self):
        with pytest.raises(GeneratorError):
            load_problem(HEADER.replace("0.7 -0.7", "0.7 -0.5") + _regimes())

    def test_missing_required_weight(self):
        with pytest.raises(ProblemFormatError, match="R1"):
            load_problem(HEADER + _regimes().replace("R1 = 5\n", ""))

    def test_time_dependent_coefficient(self):
        text = HEADER + _regimes().replace("B2 = 1\n", "B2@0:0.5 = 1\nB2@0.5:1 = 3\n")
        p = load_problem(text)
        np.testing.assert_array_equal(p.coef("B2").knots, [0.5])
        assert p.coef("B2").at(0.2)[0, 0, 0] == 1 and p.coef("B2").at(0.7)[0, 0, 0] == 3
        assert p.grid(99).steps % 2 == 0


class TestRoundTrip:
    @pytest.mark.parametrize("name", ["ex1", "ex2"])
    def test_examples(self, name, request):
        p = request.getfixturevalue(name)
        q = load_problem(dump_problem(p))
        assert q.kind == p.kind and q.i0 == p.i0 and q.T == p.T
        for k in p.coeffs:
            np.testing.assert_array_equal(q.coef(k).values, p.coef(k).values)
        np.testing.assert_array_equal(q.generator.pieces, p.generator.pieces)

    @settings(max_examples=60, deadline=None)
    @given(vals=st.lists(st.decimals(-1000, 1000, places=6, allow_nan=False), min_size=6,
                         max_size=6),
           rate=st.decimals(0, 10, places=4))
    def test_finite_decimals_bit_exact(self, vals, rate):
        f = [float(v) for v in vals]
        r = float(rate)
        p = ProblemData.build("forward", 1.0, np.array([[-r, r], [r, -r]]), x=[f[0]],
                              B2=f[1:3], R1=[abs(f[3]) + 1, 2.0], R2=[-1.0, f[4]],
                              sigma=[f[5], 0.0])
        q = load_problem(dump_problem(p))
        for k in p.coeffs:
            np.testing.assert_array_equal(q.coef(k).values, p.coef(k).values)
        np.testing.assert_array_equal(q.x, p.x)


class TestBuild:
    def test_symmetrizes_within_tolerance(self):
        Q = np.array([[[1.0, 0.5 + 1e-14], [0.5, 2.0]]] * 2)
        p = ProblemData.build("forward", 1.0, np.zeros((2, 2)), x=[0.0, 0.0], Q=Q,
                              R1=[1.0, 1.0], R2=[-1.0, -1.0])
        q = p.coef("Q").values[0, 0]
        assert q[0, 1] == q[1, 0]

    def test_homogeneous_zeroes_forcing(self, ex1):
        h = ex1.replace(sigma=[1.0, 2.0]).homogeneous()
        assert np.all(h.x == 0) and np.all(h.coef("sigma").values == 0)


class TestConvexity:
    def test_first_example_identities(self, ex1):
        rep = probe_convexity(ex1, 10, 1024, 4)
        assert rep.ratios_u1.shape == (2, 10)
        assert np.all(np.isfinite(rep.ratios_u1)) and np.all(np.isfinite(rep.ratios_u2))
        assert rep.convex_ok(1.0) and rep.concave_ok(-1.0)
        assert rep.label == "necessary-condition evidence"

    def test_rejects_bad_counts(self, ex1):
        with pytest.raises(ValueError):
            probe_convexity(ex1, 0, 100, 0)
