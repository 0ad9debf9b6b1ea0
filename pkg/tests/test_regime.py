from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stackelberg_lq.errors import GeneratorError
from stackelberg_lq.grid import make_grid
from stackelberg_lq.regime import (Generator, RegimePath, compensator, initial_distribution,
                                   kolmogorov, regimes_on_grid, simulate_chain,
                                   simulate_jumps, stationary_distribution, substreams,
                                   validate_generator)


class TestValidateGenerator:
    def test_two_state_generator_is_valid(self, gen):
        assert validate_generator(gen) is gen

    def test_zero_generator_is_valid(self):
        validate_generator(Generator.constant(np.zeros((2, 2))))

    def test_row_sum_violation_names_the_row(self):
        with pytest.raises(GeneratorError, match="row 1"):
            validate_generator(Generator.constant(np.array([[-1.0, 2.0], [1.0, -1.0]])))

    def test_negative_off_diagonal(self):
        with pytest.raises(GeneratorError):
            validate_generator(Generator.constant(np.array([[1.0, -1.0], [1.0, -1.0]])))


class TestSimulateChain:
    def test_zero_generator_never_jumps(self):
        g = Generator.constant(np.zeros((2, 2)))
        path = simulate_chain(g, 1, 1.0, np.random.default_rng(0))
        assert path.num_jumps == 0
        assert all(path.state_at(t) == 1 for t in np.linspace(0, 1, 11))

    @pytest.mark.parametrize("i0, rate", [(1, 0.5), (2, 0.7)])
    def test_first_holding_time_is_exponential(self, gen, i0, rate):
        # P(no jump by T) = exp(-rate T); mean of min(tau, T) = (1 - exp(-rate T)) / rate
        n, T = 200_000, 1.0
        times, _ = simulate_jumps(gen, i0, T, n, np.random.default_rng(11))
        tau = np.minimum(times[:, 0] if times.shape[1] else np.full(n, np.inf), T)
        se = tau.std(ddof=1) / np.sqrt(n)
        assert abs(tau.mean() - (1 - np.exp(-rate * T)) / rate) < 3 * se
        stay = np.mean(tau >= T)
        se_p = np.sqrt(stay * (1 - stay) / n)
        assert abs(stay - np.exp(-rate * T)) < 3 * se_p

    def test_path_invariants(self, gen):
        rng = np.random.default_rng(3)
        for _ in range(200):
            path = simulate_chain(gen, 1, 5.0, rng)
            prev = path.i0
            for s in path.states:
                assert s != prev
                prev = s
            assert path.state_at(0.0) == 1
            # counters equal the recorded entries
            counts = path.counts(5.0, 2)
            assert counts.sum() == path.num_jumps
            for k in (1, 2):
                assert counts[k - 1] == sum(1 for s in path.states if s == k)

    def test_right_continuity(self):
        path = RegimePath(1, (0.3,), (2,), 1.0)
        assert path.state_at(0.3) == 2
        assert path.state_before(0.3) == 1

    def test_invalid_path_rejected(self):
        with pytest.raises(ValueError):
            RegimePath(1, (0.3,), (1,), 1.0)

    def test_grid_snapping_matches_single_paths(self, gen):
        grid = make_grid(1.0, [], 50)
        times, states = simulate_jumps(gen, 2, 1.0, 300, np.random.default_rng(5))
        reg = regimes_on_grid(2, times, states, grid)
        for p in range(300):
            ok = np.isfinite(times[p])
            path = RegimePath(2, tuple(times[p][ok]), tuple(states[p][ok] + 1), 1.0)
            np.testing.assert_array_equal(reg[p], path.on_grid(grid))

    def test_occupation_converges_to_stationary_law(self, gen):
        np.testing.assert_allclose(stationary_distribution(gen), [7 / 12, 5 / 12], atol=1e-14)
        T = 2000.0
        path = simulate_chain(gen, 1, T, np.random.default_rng(8))
        occ = sum(b - a for a, b, i in path.sojourns(T) if i == 1) / T
        assert abs(occ - 7 / 12) < 0.03


class TestCompensator:
    def test_zero_generator(self):
        g = Generator.constant(np.zeros((2, 2)))
        path = RegimePath(1, (), (), 1.0)
        for k in (1, 2):
            for t in (0.0, 0.5, 1.0):
                assert compensator(path, g, k, t) == 0.0

    def test_staying_in_state_one(self, gen):
        path = RegimePath(1, (), (), 1.0)
        assert compensator(path, gen, 2, 0.8) == pytest.approx(-0.5 * 0.8, abs=1e-15)
        assert compensator(path, gen, 1, 0.8) == 0.0

    def test_known_path(self, gen):
        path = RegimePath(1, (0.25, 0.75), (2, 1), 1.0)
        # N_2(1) = 1, time in state 1 = 0.5 -> 1 - 0.5 * 0.5
        assert compensator(path, gen, 2, 1.0) == pytest.approx(0.75, abs=1e-15)
        # N_1(1) = 1, time in state 2 = 0.5 -> 1 - 0.7 * 0.5
        assert compensator(path, gen, 1, 1.0) == pytest.approx(0.65, abs=1e-15)

    def test_bad_regime(self, gen):
        with pytest.raises(ValueError):
            compensator(RegimePath(1, (), (), 1.0), gen, 3, 0.5)

    def test_martingale_mean_zero(self, gen):
        rng = np.random.default_rng(21)
        n = 20_000
        vals = np.array([[compensator(simulate_chain(gen, 1, 1.0, rng), gen, k, 1.0)
                          for k in (1, 2)] for _ in range(n)])
        se = vals.std(axis=0, ddof=1) / np.sqrt(n)
        assert np.all(np.abs(vals.mean(axis=0)) < 3 * se)

    def test_piecewise_rates_split_exactly(self):
        g = Generator(np.array([[[-1.0, 1.0], [1.0, -1.0]], [[-3.0, 3.0], [1.0, -1.0]]]),
                      knots=[0.5])
        path = RegimePath(1, (), (), 1.0)
        assert compensator(path, g, 2, 1.0) == pytest.approx(-(0.5 * 1 + 0.5 * 3), abs=1e-14)


class TestKolmogorov:
    def test_matches_matrix_exponential(self, gen):
        from scipy.linalg import expm
        grid = make_grid(1.0, [], 100)
        p = kolmogorov(gen, initial_distribution(1, 2), grid)
        np.testing.assert_allclose(p[-1], np.array([1.0, 0.0]) @ expm(gen.pieces[0]), atol=1e-10)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-13)


@settings(max_examples=40, deadline=None)
@given(a=st.floats(0.0, 5.0), b=st.floats(0.0, 5.0), seed=st.integers(0, 2**32 - 1))
def test_simulated_states_stay_in_range(a, b, seed):
    g = Generator.constant(np.array([[-a, a], [b, -b]]))
    times, states = simulate_jumps(g, 1, 1.0, 50, np.random.default_rng(seed))
    ok = np.isfinite(times)
    assert np.all((states[ok] >= 0) & (states[ok] < 2))
    assert np.all(np.diff(np.where(ok, times, 2.0), axis=1) >= 0)


def test_substreams_are_reproducible():
    a = [g.random(3) for g in substreams(4, 3)]
    b = [g.random(3) for g in substreams(4, 3)]
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a[0], a[1])
