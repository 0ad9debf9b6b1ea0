from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stackelberg_lq.errors import BlowUpError
from stackelberg_lq.grid import (PiecewiseConstant, TimeGrid, aligned_steps, fd_derivative,
                                 fd_weights, hermite, make_grid, node_view, rk4_backward,
                                 rk4_forward, stage_index, stage_view)
from stackelberg_lq.linalg import NotPositiveDefinite, cond, min_eig, spd_inverse, sym, tr


class TestLinalg:
    def test_spd_inverse(self):
        a = np.array([[[4.0, 1.0], [1.0, 3.0]], [[2.0, 0.0], [0.0, 5.0]]])
        inv, margin = spd_inverse(a)
        np.testing.assert_allclose(inv @ a, np.broadcast_to(np.eye(2), a.shape), atol=1e-14)
        np.testing.assert_array_equal(inv, tr(inv))
        assert margin == pytest.approx(min(min_eig(a)))

    def test_not_positive_definite_reports_index(self):
        a = np.stack([np.eye(2), np.diag([1.0, -1.0])])
        with pytest.raises(NotPositiveDefinite) as info:
            spd_inverse(a)
        assert info.value.index == (1,) and info.value.min_eig == -1.0

    def test_condition_ceiling(self):
        with pytest.raises(NotPositiveDefinite):
            spd_inverse(np.diag([1.0, 1e-9]), ceiling=1e6)

    def test_empty(self):
        inv, margin = spd_inverse(np.zeros((3, 0, 0)))
        assert inv.shape == (3, 0, 0) and margin == np.inf

    def test_cond(self):
        np.testing.assert_allclose(cond(np.array([np.diag([2.0, 0.5]), np.zeros((2, 2))])),
                                   [4.0, np.inf])

    @settings(max_examples=50)
    @given(arrays(np.float64, (3, 3), elements=st.floats(-2, 2)))
    def test_inverse_of_gram(self, m):
        a = m @ m.T + np.eye(3)
        inv, _ = spd_inverse(a)
        np.testing.assert_allclose(inv @ a, np.eye(3), atol=1e-10)
        np.testing.assert_array_equal(sym(inv), inv)


class TestGrid:
    def test_nodes_and_cells(self):
        g = TimeGrid(2.0, 8)
        assert g.h == 0.25 and g.nodes[-1] == 2.0
        assert g.cell_of(0.5) == 2 and g.cell_of(2.0) == 7 and g.cell_of(-1) == 0

    def test_invalid(self):
        with pytest.raises(ValueError):
            TimeGrid(0.0, 4)
        with pytest.raises(ValueError):
            TimeGrid(1.0, 0)

    def test_alignment(self):
        g = make_grid(1.0, [0.3, 0.5], 11)
        assert g.steps == 20 and g.breaks == (6, 10)
        assert g.segments() == [(0, 6), (6, 10), (10, 20)]
        assert aligned_steps(1.0, [], 7) == 7
        with pytest.raises(ValueError):
            aligned_steps(1.0, [1 / np.pi], 10, max_factor=2)

    def test_refined(self):
        g = make_grid(1.0, [0.5], 10).refined(3)
        assert g.steps == 30 and g.breaks == (15,)

    def test_piecewise_constant(self):
        f = PiecewiseConstant([0.5], np.array([[1.0], [2.0]]))
        assert f.at(0.49)[0] == 1.0 and f.at(0.5)[0] == 2.0
        np.testing.assert_array_equal(f.on_cells(TimeGrid(1.0, 4))[:, 0], [1, 1, 2, 2])
        assert not f.is_constant() and PiecewiseConstant.constant([3.0]).is_constant()
        with pytest.raises(ValueError):
            PiecewiseConstant([0.5], np.ones((3, 1)))

    def test_hermite_reproduces_cubics(self):
        p = np.polynomial.Polynomial([1.0, -2.0, 0.5, 3.0])
        dp = p.deriv()
        h = 0.7
        for theta in (0.0, 0.3, 0.5, 1.0):
            got = hermite(p(0), p(h), dp(0), dp(h), h, theta)
            assert got == pytest.approx(p(theta * h), abs=1e-13)

    def test_stage_views(self):
        v = np.arange(4.0)
        d = np.ones(3)
        st_ = stage_view(v, d, d, 1.0)
        np.testing.assert_allclose(st_[:, 1], [0.5, 1.5, 2.5])
        np.testing.assert_array_equal(node_view(st_), v)
        assert stage_index(0.5) == 1 and stage_index(0.25) is None

    @pytest.mark.parametrize("offsets", [(-1, 0, 1), (0, 1, 2, 3, 4), (-4, -3, -2, -1, 0)])
    def test_fd_weights_exact_on_polynomials(self, offsets):
        w = fd_weights(offsets)
        x = np.asarray(offsets, float)
        for k in range(len(offsets)):
            assert w @ x**k == pytest.approx(1.0 if k == 1 else 0.0, abs=1e-10)

    def test_fd_derivative(self):
        g = TimeGrid(1.0, 20)
        s = g.nodes
        np.testing.assert_allclose(fd_derivative(s**3, g), 3 * s**2, atol=1e-10)

    def test_fd_derivative_respects_breaks(self):
        g = make_grid(1.0, [0.5], 20)
        s = g.nodes
        v = np.where(s < 0.5, s, 2 * s - 0.5)
        d = fd_derivative(v, g)
        np.testing.assert_allclose(d[:10], 1.0, atol=1e-10)
        np.testing.assert_allclose(d[10:], 2.0, atol=1e-10)


class TestRungeKutta:
    @staticmethod
    def _errors(direction):
        errs = []
        for n in (10, 20, 40):
            g = TimeGrid(1.0, n)
            if direction == "backward":
                vals = rk4_backward(lambda j, th, v: -2.0 * v, np.array(1.0), g)[0]
                exact = np.exp(2.0 * (1.0 - g.nodes))
            else:
                vals = rk4_forward(lambda j, th, v: -2.0 * v, np.array(1.0), g)
                exact = np.exp(-2.0 * g.nodes)
            errs.append(np.max(np.abs(vals - exact)))
        return errs

    @pytest.mark.parametrize("direction", ["backward", "forward"])
    def test_fourth_order(self, direction):
        e = self._errors(direction)
        assert e[0] / e[1] == pytest.approx(16, abs=2)
        assert e[1] / e[2] == pytest.approx(16, abs=2)

    def test_time_dependent_rhs(self):
        g = TimeGrid(1.0, 50)
        vals = rk4_backward(lambda j, th, v: np.array(3 * g.time(j, th) ** 2), np.array(0.0), g)[0]
        np.testing.assert_allclose(vals, g.nodes**3 - 1.0, atol=1e-13)

    def test_substeps(self):
        g = TimeGrid(1.0, 10)
        vals, _, _, nsub = rk4_backward(lambda j, th, v: 50.0 * v, np.array(1.0), g,
                                        substeps=lambda j, v, d: 8)
        assert np.all(nsub == 8)
        assert vals[0] == pytest.approx(np.exp(-50.0), rel=1e-3)

    def test_blow_up(self):
        g = TimeGrid(1.0, 100)
        with pytest.raises(BlowUpError) as info:
            rk4_backward(lambda j, th, v: v * v, np.array(-4.0), g)
        assert info.value.last_valid >= 0.75
