#!/usr/bin/env python3

import unittest
import os
from unittest.mock import patch

import numpy as np

import sys
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from brute_force import brute_force_minimize, objective, random_instance
from loss_functions import LossKind
from mm_cd_solver import (FitProblem, MajorizerContext, SolverConfig, SolverError, cd_pass,
                          coordinate_update_1d, directional_derivatives, fit_penalized, kink_polish,
                          lambda_grid, lambda_max, lambda_path,
                          lasso_init, penalized_objective)
from penalties import PenaltySpec
from survival_data import (CoefficientVector, DataError, SurvivalDataset, build_design,
                           kaplan_meier_weights, sort_by_time)

SLOW = os.environ.get("RELERR_SLOW_TESTS") == "1"


def single_column_problem(y, kind, x=1.0):
    """Observations whose only nonzero design column is the env main effect."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    n = len(y)
    data = SurvivalDataset(y, np.ones(n, dtype=int), np.full((n, 1), x), np.zeros((n, 1)))
    design = build_design(data.env, data.genes)
    return data, design, kaplan_meier_weights(data.status)


def context_at(design, data, weights, kind, values, spec, config=None):
    problem = FitProblem(design, data, weights, kind)
    return MajorizerContext(problem, np.asarray(values, dtype=float), spec, config or SolverConfig(),
                            np.ones(design.d, dtype=bool), refresh=False)


class TestSolverConfig(unittest.TestCase):
    """Test cases for solver settings."""

    def test_defaults(self):
        """Test the default convergence rule."""
        config = SolverConfig()
        self.assertEqual(config.tol, 1e-6)
        self.assertEqual(config.max_mm_iters, 500)
        self.assertEqual(config.max_cd_passes, 1)
        self.assertEqual(config.newton_max, 20)
        self.assertEqual(config.refresh_every, 10)

    def test_validation(self):
        """Test invalid settings raise."""
        with self.assertRaises(ValueError):
            SolverConfig(tol=0.0)
        with self.assertRaises(ValueError):
            SolverConfig(max_mm_iters=0)


class TestCoordinateUpdate(unittest.TestCase):
    """Test cases for the one-dimensional Newton update."""

    def test_lpre_unit_predictor(self):
        """Test the LPRE slice with y = 2 converges to ln 2."""
        data, design, weights = single_column_problem(2.0, LossKind.LPRE)
        state = context_at(design, data, weights, LossKind.LPRE, [0.1, 0.0, 0.0], PenaltySpec.lasso(0.0))
        self.assertAlmostEqual(coordinate_update_1d(0, state), np.log(2.0), delta=1e-6)

    def test_quadratic_slice_one_step(self):
        """Test one Newton step solves the LS slice exactly."""
        rng = np.random.default_rng(1)
        data = SurvivalDataset(np.exp(rng.normal(size=10)), np.ones(10, dtype=int),
                               rng.normal(size=(10, 1)), rng.normal(size=(10, 1)))
        data = sort_by_time(data)
        design = build_design(data.env, data.genes)
        weights = kaplan_meier_weights(data.status)
        values = np.array([0.2, -0.1, 0.3])
        state = context_at(design, data, weights, LossKind.LS, values, PenaltySpec.lasso(0.0),
                           SolverConfig(newton_max=1))
        u = design.rows[:, 1]
        base = design.rows @ values - u * values[1]
        w = weights.weights
        expected = np.sum(w * u * (np.log(data.times) - base)) / np.sum(w * u * u)
        self.assertAlmostEqual(coordinate_update_1d(1, state), expected, places=10)

    def test_stationary_slice_unchanged(self):
        """Test an already stationary coordinate stays put."""
        data, design, weights = single_column_problem(1.0, LossKind.LPRE)
        state = context_at(design, data, weights, LossKind.LPRE, [1e-3, 0.0, 0.0], PenaltySpec.lasso(0.0))
        state.move(0, 0.0)
        self.assertEqual(coordinate_update_1d(0, state), 0.0)

    def test_nonfinite_derivative_flagged(self):
        """Test a failed update leaves the coordinate and records it."""
        data, design, weights = single_column_problem(2.0, LossKind.LPRE)
        state = context_at(design, data, weights, LossKind.LPRE, [0.5, 0.0, 0.0], PenaltySpec.lasso(0.0))
        with patch.object(state.surrogate, "eta_derivatives", return_value=(np.array([np.nan]), np.array([1.0]))):
            self.assertEqual(coordinate_update_1d(0, state), 0.5)
        self.assertEqual(state.failed, [0])


class TestCdPass(unittest.TestCase):
    """Test cases for a coordinate-descent pass."""

    def test_zero_column_driven_to_zero(self):
        """Test a column of zeros ends at zero."""
        data, design, weights = single_column_problem([1.5, 2.5], LossKind.LPRE)
        state = context_at(design, data, weights, LossKind.LPRE, [0.2, 0.7, -0.4], PenaltySpec.mcp(0.1))
        theta = cd_pass(CoefficientVector.like(design, [0.2, 0.7, -0.4]), state)
        self.assertEqual(theta.values[1], 0.0)
        self.assertEqual(theta.values[2], 0.0)

    def test_pass_does_not_increase_surrogate(self):
        """Test one pass on a frozen majorizer is a descent step."""
        for kind in LossKind:
            data, design, weights = random_instance(21, censor=0.2)
            start = np.array([0.3, -0.2, 0.4, 0.1, -0.3])
            spec = PenaltySpec.mcp(0.02)
            state = context_at(design, data, weights, kind, start, spec)

            def surrogate_total(values):
                penalty = 0.5 * np.sum(state.coefficients * values ** 2)
                return state.surrogate.value(design.rows[weights.weights > 0] @ values) + penalty

            before = surrogate_total(start)
            after = surrogate_total(cd_pass(CoefficientVector.like(design, start), state).values)
            self.assertLessEqual(after, before + 1e-12, msg=kind.value)

    def test_second_pass_revisits_entered(self):
        """Test coordinates that entered during the first pass keep moving in the second."""
        data, design, weights = random_instance(11, n=40, q=2, p=3)
        lam = 0.05 * lambda_max(design, data, weights, LossKind.LS)
        problem = FitProblem(design, data, weights, LossKind.LS)
        state = MajorizerContext(problem, np.zeros(design.d), PenaltySpec.lasso(lam), SolverConfig(),
                                 np.ones(design.d, dtype=bool), refresh=True)
        first = cd_pass(CoefficientVector.like(design, np.zeros(design.d)), state)
        entered = state.entered.copy()
        self.assertGreater(entered.sum(), 1)
        second = cd_pass(first, state)
        self.assertTrue(np.any(second.values[entered] != first.values[entered]))

        def lasso_objective(values):
            return state.surrogate.value(problem.eta(values)) + lam * np.abs(values).sum()

        self.assertLess(lasso_objective(second.values), lasso_objective(first.values))

    def test_extra_passes_reach_the_same_fit(self):
        """Test two CD passes per MM step end at the one-pass Lasso minimum."""
        data, design, weights = random_instance(13, n=40, q=2, p=3, censor=0.2)
        spec = PenaltySpec.lasso(0.05 * lambda_max(design, data, weights, LossKind.LS))
        one = fit_penalized(design, data, weights, LossKind.LS, spec)
        two = fit_penalized(design, data, weights, LossKind.LS, spec, SolverConfig(max_cd_passes=2))
        self.assertTrue(two.converged)
        self.assertAlmostEqual(two.objective, one.objective, delta=1e-8)


class TestOptimality(unittest.TestCase):
    """Test cases for directional derivatives and the kink finish."""

    def setUp(self):
        """Set up three log-times 1, 2, 3 on a unit predictor."""
        self.data, self.design, self.weights = single_column_problem(np.exp([1.0, 2.0, 3.0]), LossKind.LAD)
        self.problem = FitProblem(self.design, self.data, self.weights, LossKind.LAD)

    def test_directional_derivatives_at_median(self):
        """Test both one-sided slopes are positive at the LAD minimum."""
        plus, minus = directional_derivatives(self.problem, np.array([2.0, 0.0, 0.0]), PenaltySpec.lasso(0.0))
        self.assertAlmostEqual(plus[0], 1 / 3)
        self.assertAlmostEqual(minus[0], 1 / 3)

    def test_directional_derivatives_off_median(self):
        """Test a point above the median shows descent downwards."""
        plus, minus = directional_derivatives(self.problem, np.array([2.5, 0.0, 0.0]), PenaltySpec.lasso(0.0))
        self.assertAlmostEqual(plus[0], 1 / 3)
        self.assertAlmostEqual(minus[0], -1 / 3)

    def test_lad_median_is_exact(self):
        """Test the unpenalized LAD fit lands exactly on the median and is certified."""
        fit = fit_penalized(self.design, self.data, self.weights, LossKind.LAD, PenaltySpec.lasso(0.0))
        self.assertTrue(fit.converged)
        self.assertFalse(fit.stalled)
        self.assertAlmostEqual(fit.theta_hat.values[0], 2.0, places=12)

    def test_kink_polish_zeroes_small_coefficients(self):
        """Test a small coefficient above the null-fit threshold is set exactly to zero."""
        data, design, weights = random_instance(6, n=40, q=2, p=3, censor=0.2)
        spec = PenaltySpec.lasso(2.0 * lambda_max(design, data, weights, LossKind.LS))
        problem = FitProblem(design, data, weights, LossKind.LS)
        values = np.zeros(design.d)
        values[1] = 5e-5
        polished = kink_polish(problem, values, spec, SolverConfig(), np.ones(design.d, dtype=bool))
        self.assertIsNotNone(polished)
        self.assertTrue(polished.certified)
        np.testing.assert_array_equal(polished.values, np.zeros(design.d))
        self.assertLess(polished.objective, problem.objective(values, spec))


class TestFitPenalized(unittest.TestCase):
    """Test cases for the MM loop."""

    def test_single_observation_lpre(self):
        """Test the LPRE fit reaches e^eta = y."""
        data, design, weights = single_column_problem(np.e, LossKind.LPRE)
        fit = fit_penalized(design, data, weights, LossKind.LPRE, PenaltySpec.lasso(0.0))
        self.assertTrue(fit.converged)
        self.assertAlmostEqual(fit.theta_hat.values[0], 1.0, delta=1e-6)

    def test_above_lambda_max_is_zero(self):
        """Test full shrinkage converges immediately."""
        data, design, weights = random_instance(3, censor=0.2)
        for kind in LossKind:
            lam = 1.01 * lambda_max(design, data, weights, kind)
            fit = fit_penalized(design, data, weights, kind, PenaltySpec.mcp(lam))
            self.assertEqual(fit.theta_hat.nnz(), 0)
            self.assertTrue(fit.converged)
            self.assertLessEqual(fit.mm_iterations, 2)
            self.assertEqual(lasso_init(design, data, weights, kind, lam).nnz(), 0)

    def test_matches_brute_force_coordinates(self):
        """Test the unpenalized LPRE fit on n = 30, d = 5 against the oracle."""
        data, design, weights = random_instance(12, n=30)
        fit = fit_penalized(design, data, weights, LossKind.LPRE, PenaltySpec.lasso(0.0))
        oracle, _ = brute_force_minimize(objective("lpre", design.rows, data.times, weights.weights), design.d)
        np.testing.assert_allclose(fit.theta_hat.values, oracle, atol=1e-3)

    def _oracle_agreement(self, seeds):
        for seed in seeds:
            data, design, weights = random_instance(seed, n=int(15 + seed % 16), censor=0.15)
            for kind in LossKind:
                fit = fit_penalized(design, data, weights, kind, PenaltySpec.lasso(0.0))
                _, best = brute_force_minimize(objective(kind.value, design.rows, data.times, weights.weights),
                                               design.d)
                # the MM solver must do at least as well as the oracle
                self.assertLessEqual(fit.objective, best * (1 + 1e-6) + 1e-12,
                                     msg=f"seed={seed} kind={kind.value}")

    def test_oracle_objective(self):
        """Test unpenalized minima against the oracle on a few instances."""
        self._oracle_agreement(range(100, 104))

    @unittest.skipUnless(SLOW, "set RELERR_SLOW_TESTS=1")
    def test_oracle_objective_full(self):
        """Test unpenalized minima against the oracle on 25 instances."""
        self._oracle_agreement(range(200, 225))

    def test_mm_descent_and_stationarity(self):
        """Test 100 penalized fits have nonincreasing traces and coordinatewise stationary ends."""
        rng = np.random.default_rng(5)
        step = 10 * SolverConfig().tol
        for seed in range(25):
            data, design, weights = random_instance(seed, n=40, q=2, p=3, censor=0.2)
            for kind in LossKind:
                lam = 0.1 * lambda_max(design, data, weights, kind)
                spec = PenaltySpec.mcp(lam) if seed % 2 else PenaltySpec.lasso(lam)
                fit = fit_penalized(design, data, weights, kind, spec)
                msg = f"seed={seed} kind={kind.value} penalty={spec.kind.value}"
                self.assertTrue(np.all(np.diff(fit.objective_trace) <= 1e-10), msg=msg)
                base = penalized_objective(fit.theta_hat, design, data, weights, kind, spec)
                for j in rng.choice(design.d, size=min(20, design.d), replace=False):
                    for sign in (-1.0, 1.0):
                        values = fit.theta_hat.values.copy()
                        values[j] += sign * step
                        moved = penalized_objective(CoefficientVector.like(design, values), design, data,
                                                    weights, kind, spec)
                        self.assertGreaterEqual(moved, base - 1e-8, msg=f"{msg} j={j}")

    def test_hard_threshold_output(self):
        """Test tiny coefficients are exactly zero."""
        data, design, weights = random_instance(8, n=40, q=2, p=3)
        lam = 0.2 * lambda_max(design, data, weights, LossKind.LARE)
        fit = fit_penalized(design, data, weights, LossKind.LARE, PenaltySpec.mcp(lam))
        nonzero = fit.theta_hat.values[fit.theta_hat.values != 0]
        self.assertTrue(np.all(np.abs(nonzero) >= 1e-6))
        np.testing.assert_array_equal(fit.active_set, fit.theta_hat.support())

    def test_support_restriction(self):
        """Test coordinates outside the support stay at zero."""
        data, design, weights = random_instance(4)
        fit = fit_penalized(design, data, weights, LossKind.LS, PenaltySpec.lasso(0.0), support=[0, 2])
        self.assertEqual(set(fit.theta_hat.support()), {0, 2})

    def test_nan_objective_raises(self):
        """Test a NaN objective is a hard error with the iteration index."""
        data, design, weights = random_instance(4)
        with patch("mm_cd_solver.objective_from_eta", return_value=float("nan")):
            with self.assertRaises(SolverError) as ctx:
                fit_penalized(design, data, weights, LossKind.LPRE, PenaltySpec.lasso(0.1))
        self.assertEqual(ctx.exception.iteration, 0)

    def test_no_events(self):
        """Test all-censored data raises."""
        data = SurvivalDataset([1.0, 2.0], [0, 0], [[0.1], [0.2]], [[0.3], [0.4]])
        design = build_design(data.env, data.genes)
        with self.assertRaisesRegex(DataError, "no events"):
            fit_penalized(design, data, kaplan_meier_weights(data.status), LossKind.LARE, PenaltySpec.mcp(0.1))

    def test_stalled_fit_not_converged(self):
        """Test a fit whose every MM step is rejected reports a stall, not convergence."""
        data, design, weights = random_instance(4)
        with patch("mm_cd_solver._mm_step", side_effect=lambda *args: (args[1] + 100.0, 0)), \
                patch("mm_cd_solver.kink_polish", return_value=None):
            with self.assertLogs("mm_cd_solver", level="WARNING"):
                fit = fit_penalized(design, data, weights, LossKind.LS, PenaltySpec.lasso(0.0))
        self.assertTrue(fit.stalled)
        self.assertFalse(fit.converged)
        self.assertEqual(fit.mm_iterations, 0)
        self.assertEqual(len(fit.objective_trace), 1)
        np.testing.assert_array_equal(fit.theta_hat.values, np.zeros(design.d))

    def test_strong_effects_recovered(self):
        """Test three strong effects among 41 columns are selected in at least 45 of 50 replicates."""
        truth = [0, 1, 21]
        hits = 0
        for seed in range(50):
            rng = np.random.default_rng(1000 + seed)
            n = 200
            env = rng.standard_normal((n, 1))
            genes = rng.standard_normal((n, 20))
            theta = np.zeros(41)
            theta[truth] = 1.2
            times = np.exp(build_design(env, genes).rows @ theta + rng.standard_normal(n))
            status = (rng.uniform(size=n) >= 0.2).astype(int)
            status[np.argmin(times)] = 1
            data = sort_by_time(SurvivalDataset(times, status, env, genes))
            design = build_design(data.env, data.genes)
            weights = kaplan_meier_weights(data.status)
            lam = 0.1 * lambda_max(design, data, weights, LossKind.LPRE)
            fit = fit_penalized(design, data, weights, LossKind.LPRE, PenaltySpec.mcp(lam))
            hits += set(truth) <= set(fit.active_set.tolist())
        self.assertGreaterEqual(hits, 45)

    def test_deterministic(self):
        """Test repeated fits are bitwise identical."""
        data, design, weights = random_instance(9, n=40, q=2, p=3, censor=0.2)
        first = lasso_init(design, data, weights, LossKind.LARE, 0.01)
        second = lasso_init(design, data, weights, LossKind.LARE, 0.01)
        self.assertEqual(first.values.tobytes(), second.values.tobytes())

    def test_gene_permutation_equivariance(self):
        """Test permuting gene columns permutes a convex fit."""
        data, design, weights = random_instance(14, n=60, q=1, p=3)
        order = [2, 0, 1]
        permuted = SurvivalDataset(data.times, data.status, data.env, data.genes[:, order])
        permuted_design = build_design(permuted.env, permuted.genes)
        spec = PenaltySpec.lasso(0.005)
        fit = fit_penalized(design, data, weights, LossKind.LPRE, spec)
        other = fit_penalized(permuted_design, permuted, weights, LossKind.LPRE, spec)
        np.testing.assert_allclose(other.theta_hat.beta, fit.theta_hat.beta[order], atol=1e-4)
        np.testing.assert_allclose(other.theta_hat.xi, fit.theta_hat.xi[order], atol=1e-4)

    def test_scale_shift_with_intercept(self):
        """Test scaling y by c moves only the intercept (by ln c)."""
        data, design, weights = random_instance(15, n=40, intercept=True)
        c = 5.0
        scaled = SurvivalDataset(c * data.times, data.status, data.env, data.genes)
        for kind in (LossKind.LARE, LossKind.LPRE):
            fit = fit_penalized(design, data, weights, kind, PenaltySpec.lasso(0.0))
            other = fit_penalized(design, scaled, weights, kind, PenaltySpec.lasso(0.0))
            tol = 1e-5
            np.testing.assert_allclose(other.theta_hat.values[1:], fit.theta_hat.values[1:], atol=tol)
            self.assertAlmostEqual(other.theta_hat.values[0] - fit.theta_hat.values[0], np.log(c), delta=tol)


class TestLambdaPath(unittest.TestCase):
    """Test cases for the lambda path."""

    def test_grid(self):
        """Test log spacing and the degenerate grid."""
        grid = lambda_grid(2.0, 5, 0.01)
        self.assertAlmostEqual(grid[0], 2.0)
        self.assertAlmostEqual(grid[-1], 0.02)
        np.testing.assert_allclose(np.diff(np.log(grid)), np.log(0.01) / 4)
        np.testing.assert_array_equal(lambda_grid(0.0, 10, 0.1), [0.0])
        with self.assertRaises(ValueError):
            lambda_grid(1.0, 1, 0.1)

    def test_first_entry_empty(self):
        """Test the path starts at the empty model."""
        data, design, weights = random_instance(31, n=50, q=2, p=4, censor=0.2)
        for kind in LossKind:
            path = lambda_path(design, data, weights, kind, grid_size=10)
            self.assertEqual(len(path), 10)
            self.assertEqual(path[0].theta_hat.nnz(), 0)
            self.assertGreater(path[-1].theta_hat.nnz(), 0)

    def test_active_set_grows(self):
        """Test the active set is mostly nondecreasing along the path."""
        steps = grows = 0
        for seed in range(6):
            data, design, weights = random_instance(40 + seed, n=80, q=2, p=5, censor=0.2, scale=0.8)
            path = lambda_path(design, data, weights, LossKind.LARE, grid_size=20)
            sizes = [len(fit.active_set) for fit in path]
            steps += len(sizes) - 1
            grows += sum(b >= a for a, b in zip(sizes, sizes[1:]))
        self.assertGreaterEqual(grows / steps, 0.8)

    def test_warm_start_saves_iterations(self):
        """Test warm starts need fewer MM iterations than cold starts."""
        data, design, weights = random_instance(50, n=60, q=2, p=4, censor=0.2, scale=0.8)
        grid = lambda_grid(lambda_max(design, data, weights, LossKind.LPRE), 15, 0.05)
        warm = lambda_path(design, data, weights, LossKind.LPRE, grid=grid)
        cold = lambda_path(design, data, weights, LossKind.LPRE, grid=grid, warm_start=False)
        self.assertLess(sum(f.total_iterations for f in warm), sum(f.total_iterations for f in cold))


if __name__ == "__main__":
    unittest.main()
