import numpy as np
import pytest

from mfgclab.measures import EmpiricalMeasure, gaussian_quantile_cloud
from mfgclab.models import MeanPoly2, QuadraticTerminalCost, ll_example_model
from mfgclab.monotonicity import (
    LambdaVec,
    MonotonicityError,
    TestDirection,
    direction_battery,
    mon_anti,
    mon_disp,
    mon_ll,
    mon_ll_difference_form,
    monotonicity_sweep,
    tolerance_scale,
)
from mfgclab.solver import Grid, PicardSettings, ValueAccess, solve_mfgc, terminal_field


def cloud(xs):
    xs = np.asarray(xs, dtype=float)
    return EmpiricalMeasure(xs[:, None], np.full(len(xs), 1.0 / len(xs)))


class TerminalAccess:
    """Access object exposing the terminal cost itself as the value slice."""

    def __init__(self, terminal: QuadraticTerminalCost, xs=None):
        self.terminal = terminal
        self.xs = np.linspace(-8.0, 8.0, 321) if xs is None else xs

    def field(self, t, mu):
        class _Model:
            g_eval = self.terminal

        return terminal_field(_Model, mu, self.xs, t)


class TestMonLLTerminal:
    def test_bilinear_terminal_cost(self):
        # g = a x^2 / 2 + b x E[xi]: the form equals b * mean(eta)^2.
        access = TerminalAccess(QuadraticTerminalCost(xx=1.0, xm=1.0))
        mu = cloud([0.4, -0.3, 1.1, 0.2])
        direction = TestDirection(mu.x, np.ones(4))
        assert mon_ll(access, 1.0, mu, direction) == pytest.approx(1.0, abs=1e-6)

    def test_mean_free_direction_vanishes(self):
        access = TerminalAccess(QuadraticTerminalCost(xx=1.0, xm=1.0))
        mu = cloud([0.4, -0.3, 1.1, 0.2])
        eta = np.array([1.0, -1.0, 0.5, -0.5])
        direction = TestDirection(mu.x, eta - eta.mean())
        assert mon_ll(access, 1.0, mu, direction) == pytest.approx(0.0, abs=1e-8)

    def test_quadratic_scaling_in_eta(self):
        access = TerminalAccess(QuadraticTerminalCost(xm=0.7))
        mu = cloud([0.0, 0.5, -0.5, 1.0])
        eta = np.array([1.0, 0.4, -0.2, 0.8])
        base = mon_ll(access, 1.0, mu, TestDirection(mu.x, eta))
        scaled = mon_ll(access, 1.0, mu, TestDirection(mu.x, 3.0 * eta))
        assert scaled == pytest.approx(9.0 * base, rel=2e-4, abs=2e-6)

    def test_direction_mismatch_rejected(self):
        access = TerminalAccess(QuadraticTerminalCost(xm=1.0))
        mu = cloud([0.0, 1.0])
        with pytest.raises(MonotonicityError):
            mon_ll(access, 1.0, mu, TestDirection(np.array([0.0, 2.0]), np.ones(2)))


class TestMonDispTerminal:
    def test_exact_cancellation(self):
        # a = -1, b = 0, lambda = 1: the two quadratic terms cancel.
        access = TerminalAccess(QuadraticTerminalCost(xx=-1.0))
        mu = cloud([0.3, -0.2, 0.9, 0.0])
        eta = np.array([0.5, -1.0, 0.25, 0.75])
        value = mon_disp(access, 1.0, mu, TestDirection(mu.x, eta), lam=1.0)
        assert value == pytest.approx(0.0, abs=1e-7)

    def test_marginal_displacement_monotone(self):
        # a = 1, b = -1, eta = 1, lambda = 0: b mean(eta)^2 + a mean(eta^2) = 0.
        access = TerminalAccess(QuadraticTerminalCost(xx=1.0, xm=-1.0))
        mu = cloud([0.1, 0.6, -0.4, 0.2])
        value = mon_disp(access, 1.0, mu, TestDirection(mu.x, np.ones(4)), lam=0.0)
        assert value == pytest.approx(0.0, abs=1e-6)

    def test_additive_in_lambda_exactly(self):
        access = TerminalAccess(QuadraticTerminalCost(xx=0.5, xm=0.2))
        mu = cloud([0.0, 1.0, -1.0, 0.5])
        eta = np.array([1.0, -0.5, 0.25, 0.0])
        direction = TestDirection(mu.x, eta)
        v0 = mon_disp(access, 1.0, mu, direction, lam=0.0)
        for lam in (0.5, 1.0, 2.0):
            expected = v0 + lam * np.mean(eta**2)
            assert mon_disp(access, 1.0, mu, direction, lam) == pytest.approx(expected, abs=1e-12)

    def test_nonnegative_lambda_required(self):
        access = TerminalAccess(QuadraticTerminalCost())
        mu = cloud([0.0, 1.0])
        with pytest.raises(MonotonicityError):
            mon_disp(access, 1.0, mu, TestDirection(mu.x, np.ones(2)), lam=-0.1)


class TestMonAntiTerminal:
    def test_pure_concave_terminal(self):
        # g = a x^2 / 2 with a = -1/2 and weights (1, 0, 1, 0):
        # value = (a + a^2) mean(eta^2) = -mean(eta^2)/4.
        access = TerminalAccess(QuadraticTerminalCost(xx=-0.5))
        mu = cloud([0.2, -0.7, 0.5, 1.0])
        eta = np.array([1.0, 0.5, -0.5, 2.0])
        value = mon_anti(access, 1.0, mu, TestDirection(mu.x, eta), LambdaVec(1, 0, 1, 0))
        assert value == pytest.approx(-0.25 * np.mean(eta**2), abs=1e-6)

    def test_zero_direction(self):
        access = TerminalAccess(QuadraticTerminalCost(xx=-0.5, xm=0.3))
        mu = cloud([0.0, 1.0, 2.0])
        value = mon_anti(access, 1.0, mu, TestDirection(mu.x, np.zeros(3)), LambdaVec(1, 1, 1, 0))
        assert value == 0.0

    def test_large_l3_dominates(self):
        access = TerminalAccess(QuadraticTerminalCost(xx=1.0, xm=0.5))
        mu = cloud([0.3, -0.3, 0.8])
        eta = np.array([1.0, 1.0, -0.5])
        value = mon_anti(access, 1.0, mu, TestDirection(mu.x, eta), LambdaVec(1, 1, 1, 50))
        assert value < 0.0

    def test_lambda_vec_validation(self):
        with pytest.raises(MonotonicityError):
            LambdaVec(0.0, 0.0, 1.0, 0.0)
        with pytest.raises(MonotonicityError):
            LambdaVec(1.0, 0.0, 1.0, -1.0)


class TestDifferenceForm:
    def test_identical_clouds_give_zero(self):
        access = TerminalAccess(QuadraticTerminalCost(xx=1.0, xm=0.5))
        mu = cloud([0.3, -0.2, 0.7])
        assert mon_ll_difference_form(access, 1.0, mu, mu) == 0.0

    def test_bilinear_terminal_closed_form(self):
        # g = b x E[xi]: the cross difference equals b (mean(x1) - mean(x2))^2.
        b = 0.8
        access = TerminalAccess(QuadraticTerminalCost(xm=b))
        mu1 = cloud([0.5, -0.1, 0.9, 0.3])
        mu2 = cloud([0.1, 0.2, -0.4, 0.0])
        value = mon_ll_difference_form(access, 1.0, mu1, mu2)
        expected = b * (mu1.mean() - mu2.mean()) ** 2
        assert value == pytest.approx(expected, abs=1e-12)

    def test_second_order_taylor_matches_mon_ll(self):
        access = TerminalAccess(QuadraticTerminalCost(xx=0.5, xm=0.6))
        mu1 = cloud([0.4, -0.3, 1.0, 0.1])
        eta = np.array([1.0, 0.5, -0.25, 0.75])
        eps = 0.05
        mu2 = mu1.shifted(eps * eta[:, None])
        diff = mon_ll_difference_form(access, 1.0, mu1, mu2)
        perturbative = mon_ll(access, 1.0, mu1, TestDirection(mu1.x, eta))
        assert diff == pytest.approx(eps**2 * perturbative, rel=0.2, abs=1e-9)


class TestBattery:
    def test_battery_is_normalised_and_deterministic(self):
        mu = cloud(np.linspace(-1.0, 2.0, 8))
        batt1 = direction_battery(mu, 12, seed=3)
        batt2 = direction_battery(mu, 12, seed=3)
        assert len(batt1) == 12
        for d1, d2 in zip(batt1, batt2):
            assert np.array_equal(d1.eta, d2.eta)
            assert np.sqrt(np.mean(d1.eta**2)) == pytest.approx(1.0)

    def test_battery_contains_sign_pairs_and_mean_free(self):
        mu = cloud(np.linspace(-1.0, 2.0, 8))
        batt = direction_battery(mu, 12, seed=0)
        assert np.array_equal(batt[0].eta, -batt[1].eta)
        assert abs(batt[2].eta.mean()) <= 1e-12  # noise direction is mean-free

    def test_degenerate_cloud_still_fills_battery(self):
        mu = cloud(np.zeros(6))  # powers of x all vanish
        batt = direction_battery(mu, 12, seed=1)
        assert len(batt) == 12


class TestSweepWithSolver:
    def test_ll_sweep_on_monotone_terminal(self):
        model = ll_example_model(
            c1=0.5, c2=0.05, c3=0.1, b1=MeanPoly2.linear(m2=0.75),
            f1_x=(0.0, 0.0, 0.125),
            terminal=QuadraticTerminalCost(xx=0.25, xm=0.1),
        )
        grid = Grid.with_cfl_steps(-6.0, 6.0, 61, 0.0, 0.25)
        pic = PicardSettings(max_iter=150, tol=1e-9, damping=0.6)
        flow = solve_mfgc(model, gaussian_quantile_cloud(16, 0.0, 1.0), grid, pic, seed=7)
        access = ValueAccess(model, grid, pic, seed=7, base_flow=flow, sweeps=6)
        tol = tolerance_scale(grid.dt, grid.dx, 16, 1e-3, c=0.2)
        report = monotonicity_sweep(flow, access, "ll", slices=3, battery_size=6,
                                    fd_eps=1e-3, tolerance=tol, seed=0)
        assert report.verdict, (report.minimum, tol)
        assert report.minimum >= -tol
        terminal_vals = [s["value"] for s in report.samples if s["level"] == grid.n_t]
        assert min(terminal_vals) >= -1e-8  # exact nonnegativity at t = T

    def test_sweep_rejects_unknown_kind(self):
        with pytest.raises(MonotonicityError):
            monotonicity_sweep(None, None, "bogus")
