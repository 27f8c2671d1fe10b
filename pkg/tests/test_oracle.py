"""Reference integrator and closed forms."""

import os
import tempfile

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from neurlp.oracle import (ANALYTIC_NAMES, IvpProblem, analytic, linear_ode_rhs, lorenz, read_trajectory, rk4,
                           write_trajectory)


def exp_problem(h, n):
    return IvpProblem(1, lambda t, s: s, 0.0, [1.0], h, n)


class TestRk4:
    def test_exponential_step_polynomial(self):
        # one RK4 step on u' = u multiplies by the degree-4 Taylor polynomial of e^h
        h = 0.1
        amp = 1 + h + h**2 / 2 + h**3 / 6 + h**4 / 24
        out = rk4(exp_problem(h, 10))
        assert out.y.shape == (11, 1) and out.t[-1] == pytest.approx(1.0)
        assert out.y[-1, 0] == pytest.approx(amp**10, rel=1e-14)

    def test_exponential_near_e(self):
        # the global RK4 error at h = 0.1 is about 2.1e-6
        err = rk4(exp_problem(0.1, 10)).y[-1, 0] - np.e
        assert -2.2e-6 < err < -2.0e-6

    def test_cosine_after_hundred_steps(self):
        out = rk4(IvpProblem(2, linear_ode_rhs([1.0, 0.0, 1.0]), 0.0, [1.0, 0.0], 0.1, 100))
        assert out.y[-1, 0] == pytest.approx(np.cos(10.0), abs=1e-5)

    def test_lorenz_stays_bounded(self):
        out = rk4(IvpProblem(3, lorenz(), 0.0, [1.0, 1.0, 1.0], 0.01, 2500))
        assert not out.diverged and len(out.y) == 2501
        assert np.abs(out.y).max() < 60

    @pytest.mark.parametrize("coeffs, s0, exact", [
        ([1.0, 0.0, 1.0], [1.0, 0.0], lambda t: np.cos(t)),
        ([-1.0, 0.0, 1.0], [1.0, 0.0], lambda t: np.cosh(t)),
        ([1.0, 2.0, 1.0], [1.0, 0.0], lambda t: (1 + t) * np.exp(-t)),
        ([2.0, 3.0, 1.0], [0.0, 1.0], lambda t: np.exp(-t) - np.exp(-2 * t)),
    ])
    def test_unit_horizon_accuracy(self, coeffs, s0, exact):
        out = rk4(IvpProblem(2, linear_ode_rhs(coeffs), 0.0, s0, 0.01, 100))
        assert np.abs(out.y[:, 0] - exact(out.t)).max() <= 1e-6

    def test_fourth_order_convergence(self):
        errs = [abs(rk4(exp_problem(h, round(1 / h))).y[-1, 0] - np.e) for h in (0.1, 0.05, 0.025)]
        ratios = [errs[0] / errs[1], errs[1] / errs[2]]
        assert all(14 < r < 17 for r in ratios)

    def test_divergence_truncates(self):
        out = rk4(IvpProblem(1, lambda t, s: s**2, 0.0, [1.0], 0.5, 50))
        assert out.diverged
        assert np.all(np.isfinite(out.y)) and len(out.y) < 51 and len(out.t) == len(out.y)

    def test_time_dependent_forcing(self):
        # u' = cos t integrates exactly enough at h = 0.01
        out = rk4(IvpProblem(1, lambda t, s: np.array([np.cos(t)]), 0.0, [0.0], 0.01, 300))
        assert np.abs(out.y[:, 0] - np.sin(out.t)).max() <= 1e-9

    def test_rejects_bad_step(self):
        with pytest.raises(ValueError):
            exp_problem(0.0, 3)


class TestAnalytic:
    t = 0.1 * np.arange(100)

    @pytest.mark.parametrize("name, fn", [
        ("cos", lambda t: np.cos(t)),
        ("damped-sine", lambda t: np.exp(-0.1 * t) * np.sin(t)),
        ("cosh", lambda t: np.cosh(t)),
        ("sin", lambda t: np.sin(t)),
        ("exp", lambda t: np.exp(t)),
        ("constant", lambda t: np.ones_like(t)),
    ])
    def test_values(self, name, fn):
        np.testing.assert_allclose(analytic(name, self.t), fn(self.t), rtol=1e-15)

    @pytest.mark.parametrize("name", ANALYTIC_NAMES)
    def test_derivative_matches_fd(self, name):
        h = 1e-6
        fd = (analytic(name, self.t + h) - analytic(name, self.t - h)) / (2 * h)
        np.testing.assert_allclose(analytic(name, self.t, derivative=1), fd, rtol=1e-6, atol=1e-8)

    def test_unknown_name(self):
        with pytest.raises(KeyError, match="unknown analytic"):
            analytic("tan", self.t)


class TestCsv:
    @given(st.lists(st.floats(-1e300, 1e300, allow_nan=False), min_size=1, max_size=30), st.integers(1, 3))
    def test_round_trip_exact(self, values, dim):
        y = np.resize(np.array(values), (len(values), dim))
        t = np.arange(len(values)) * 0.1
        with tempfile.TemporaryDirectory() as d:
            path = os.path.join(d, "traj.csv")
            write_trajectory(path, t, y)
            t2, y2 = read_trajectory(path)
            header = open(path).readline().strip()
        assert header == ",".join(["t"] + [f"dim{i}" for i in range(dim)])
        assert np.array_equal(t2, t) and np.array_equal(y2, y)
