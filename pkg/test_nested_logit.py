import math
import os
import unittest

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal, assert_array_less

from dataset import build_dataset, softmax
from errors import DatasetValidationError, NumericalError
from models import (
    CityConfig, Individual, LbfgsSettings, NlParams, Oracle, PopulationConfig, SimulationConfig, Zone,
)
from nested_logit import (
    NestedLogitModel, estimate_nl, nl_choice_probabilities, nl_gradient, nl_log_likelihood, nl_std_errors,
    nl_systematic_utility, null_log_likelihood, occupation_logsum,
)
from optim import finite_diff_gradient
from synthgen import simulate_dataset

TRUE_PARAMS = NlParams(alpha=[0.5] * 6, lam=1.2, beta_a=0.6, beta_acr=-0.1)


def zone(zone_id, jobs, x=0.0, y=0.0):
    return Zone(zone_id=zone_id, centroid_x_km=x, centroid_y_km=y, jobs=tuple(jobs))


def person(person_id, work, weight=1.0, has_car=0, home=0):
    return Individual(
        person_id=person_id, home_zone=home, work_zone=work, household_type=1, has_kids=0,
        has_car=has_car, gender=0, income_class=5, employment=1, weight=weight,
    )


def random_dataset(n_zones=10, n_individuals=50, seed=0):
    """Random jobs, accessibility and observed choices, including one empty zone."""
    rng = np.random.default_rng(seed)
    jobs = rng.integers(0, 20, size=(n_zones, 7))
    jobs[-1] = 0
    zones = [zone(j, jobs[j], x=float(j)) for j in range(n_zones)]
    people = [
        person(i, work=int(rng.integers(0, n_zones - 1)), weight=float(rng.uniform(0.5, 2.0)), has_car=int(rng.integers(0, 2)))
        for i in range(n_individuals)
    ]
    return build_dataset(zones, people, rng.normal(size=(n_individuals, n_zones)))


def simulated(n_individuals, rows=10, cols=10, seed=42, oracle=None):
    config = SimulationConfig(
        city=CityConfig(grid_rows=rows, grid_cols=cols),
        population=PopulationConfig(n_individuals=n_individuals),
        oracle=oracle or Oracle(nl=TRUE_PARAMS),
    )
    return simulate_dataset(config, seed)


class TestOccupationLogsum(unittest.TestCase):
    def test_collapses_to_log_total(self):
        """Test that zero constants and lambda 1 give the log of total jobs."""
        self.assertAlmostEqual(occupation_logsum([0.0] * 7, 1.0, (3, 0, 0, 0, 0, 0, 0)), math.log(3), places=12)

    def test_single_unit_term(self):
        """Test that a single job with zero constant has a zero logsum."""
        self.assertAlmostEqual(occupation_logsum([0.0] * 7, 2.0, (1, 0, 0, 0, 0, 0, 0)), 0.0, places=15)

    def test_weighted_constant(self):
        """Test that a constant of ln 2 counts its occupation's jobs twice."""
        alpha = [math.log(2), 0, 0, 0, 0, 0]
        self.assertAlmostEqual(occupation_logsum(alpha, 1.0, (1, 1, 0, 0, 0, 0, 0)), math.log(3), places=12)

    def test_empty_zone(self):
        """Test that a zone without jobs has a logsum of minus infinity."""
        self.assertEqual(occupation_logsum([0.0] * 6, 1.0, (0,) * 7), -math.inf)

    def test_nonpositive_lambda(self):
        """Test that lambda 0 is rejected."""
        with self.assertRaises(ValueError):
            occupation_logsum([0.0] * 6, 0.0, (1,) * 7)


class TestUtilitiesAndProbabilities(unittest.TestCase):
    def test_systematic_utility(self):
        """Test the utility of one zone against a hand computation."""
        params = NlParams(beta_a=0.567, beta_acr=-0.128)
        unit = zone(0, (1, 0, 0, 0, 0, 0, 0))
        self.assertAlmostEqual(nl_systematic_utility(params, 2.0, 1, unit), 0.878, places=12)

    def test_accessibility_disabled(self):
        """Test that zero accessibility coefficients leave only the logsum."""
        self.assertAlmostEqual(
            nl_systematic_utility(NlParams(), 17.0, 1, zone(0, (3, 0, 0, 0, 0, 0, 0))), math.log(3), places=12
        )

    def test_empty_zone_utility(self):
        """Test that a zone without jobs gets minus infinity."""
        self.assertEqual(nl_systematic_utility(TRUE_PARAMS, 1.0, 0, zone(0, (0,) * 7)), -math.inf)

    def _two_zone(self, jobs_a, jobs_b, access=(0.0, 0.0)):
        zones = [zone(0, jobs_a), zone(1, jobs_b)]
        return build_dataset(zones, [person(1, work=0)], np.array([access]))

    def test_identical_zones(self):
        """Test that two identical zones split the probability evenly."""
        data = self._two_zone((1,) * 7, (1,) * 7, access=(0.3, 0.3))
        assert_allclose(nl_choice_probabilities(TRUE_PARAMS, 0, data), [0.5, 0.5], atol=1e-15)

    def test_excluded_zone(self):
        """Test that a zone without jobs gets probability zero."""
        data = self._two_zone((1, 0, 0, 0, 0, 0, 0), (0,) * 7)
        assert_array_equal(nl_choice_probabilities(TRUE_PARAMS, 0, data), [1.0, 0.0])

    def test_size_variable(self):
        """Test that with lambda 1 the probabilities are proportional to job counts."""
        data = self._two_zone((1, 0, 0, 0, 0, 0, 0), (0, 2, 0, 0, 0, 0, 0))
        assert_allclose(nl_choice_probabilities(NlParams(), 0, data), [1 / 3, 2 / 3], atol=1e-15)

    def test_equal_alpha_depends_on_total_jobs_only(self):
        """Test that equal constants make the logsum a function of total jobs."""
        data = random_dataset(seed=3)
        params = NlParams(alpha=[0.0] * 6, lam=1.0, beta_a=0.3, beta_acr=0.2)
        totals = data.jobs.sum(axis=1)
        for row in range(5):
            slope = params.beta_a + params.beta_acr * data.has_car[row]
            with np.errstate(divide="ignore"):
                expected = softmax(slope * data.accessibility_values[row] + np.log(totals))
            assert_allclose(nl_choice_probabilities(params, row, data), expected, rtol=0, atol=1e-12)

    def test_zero_job_zone_has_zero_probability(self):
        """Test that zones without jobs get zero probability for everyone."""
        data = random_dataset(seed=4)
        rng = np.random.default_rng(9)
        for _ in range(10):
            params = NlParams.from_free_vector(rng.normal(size=9))
            self.assertEqual(nl_choice_probabilities(params, 0, data)[-1], 0.0)


class TestLogLikelihood(unittest.TestCase):
    def test_weighted_half(self):
        """Test that a weight of 2 doubles the log-likelihood of a fifty-fifty choice."""
        data = build_dataset([zone(0, (1,) * 7), zone(1, (1,) * 7)], [person(1, work=0, weight=2.0)], np.zeros((1, 2)))
        self.assertAlmostEqual(nl_log_likelihood(TRUE_PARAMS, data), 2 * math.log(0.5), places=12)

    def test_single_zone_is_perfect(self):
        """Test that a single zone gives log-likelihood 0 and a zero gradient."""
        data = build_dataset([zone(0, (4,) * 7)], [person(1, work=0), person(2, work=0)], np.ones((2, 1)))
        self.assertEqual(nl_log_likelihood(TRUE_PARAMS, data), 0.0)
        assert_array_equal(nl_gradient(TRUE_PARAMS, data), np.zeros(9))

    def test_uniform_model(self):
        """Test that zero coefficients over equal zones give the uniform log-likelihood."""
        zones = [zone(j, (1,) * 7) for j in range(4)]
        people = [person(i, work=i) for i in range(3)]
        data = build_dataset(zones, people, np.zeros((3, 4)))
        self.assertAlmostEqual(nl_log_likelihood(NlParams(), data), 3 * math.log(0.25), places=12)
        self.assertAlmostEqual(null_log_likelihood(data), 3 * math.log(0.25), places=12)

    def test_null_excludes_empty_zones(self):
        """Test that the null log-likelihood counts only zones with jobs."""
        zones = [zone(j, (1,) * 7) for j in range(4)] + [zone(4, (0,) * 7)]
        data = build_dataset(zones, [person(1, work=0, weight=2.0)], np.zeros((1, 5)))
        self.assertAlmostEqual(null_log_likelihood(data), 2 * math.log(0.25), places=12)

    def test_zero_probability_choice_names_person(self):
        """Test that choosing an empty zone raises with the person id."""
        zones = [zone(0, (1,) * 7), zone(1, (0,) * 7)]
        data = build_dataset(zones, [person(1, work=0), person(77, work=1)], np.zeros((2, 2)))
        with self.assertRaises(NumericalError) as ctx:
            nl_log_likelihood(TRUE_PARAMS, data)
        self.assertIn("77", str(ctx.exception))

    def test_requires_observed_choices(self):
        """Test that the log-likelihood needs observed work zones."""
        data = build_dataset([zone(0, (1,) * 7)], [person(1, work=None)], np.zeros((1, 1)))
        with self.assertRaises(DatasetValidationError):
            nl_log_likelihood(TRUE_PARAMS, data)

    def test_weight_scaling_is_linear(self):
        """Test that scaling every weight scales the log-likelihood."""
        data = random_dataset(seed=5)
        doubled = build_dataset(
            data.zones,
            [p.model_copy(update={"weight": 2.0 * p.weight}) for p in data.individuals],
            data.accessibility,
        )
        self.assertEqual(nl_log_likelihood(TRUE_PARAMS, doubled), 2.0 * nl_log_likelihood(TRUE_PARAMS, data))


class TestGradient(unittest.TestCase):
    def test_matches_finite_differences(self):
        """Test the analytic gradient against central differences."""
        data = random_dataset()
        rng = np.random.default_rng(11)
        for _ in range(20):
            x = rng.normal(scale=0.5, size=9)
            analytic = nl_gradient(NlParams.from_free_vector(x), data)
            numeric = finite_diff_gradient(lambda v: nl_log_likelihood(NlParams.from_free_vector(v), data), x, h=1e-6)
            scale = max(1.0, float(np.max(np.abs(analytic))))
            self.assertLess(float(np.max(np.abs(analytic - numeric))) / scale, 1e-6)

    def test_beta_a_component_is_logit_score(self):
        """Test the beta_A gradient against the weighted logit score."""
        zones = [zone(0, (1,) * 7), zone(1, (2,) * 7)]
        access = np.array([[1.0, -0.5], [0.2, 0.7]])
        people = [person(1, work=0, weight=1.5), person(2, work=1, weight=0.5)]
        data = build_dataset(zones, people, access)
        params = NlParams(beta_a=0.8)
        expected = 0.0
        for n, p in enumerate(people):
            probs = nl_choice_probabilities(params, n, data)
            expected += p.weight * (access[n, p.work_zone] - probs @ access[n])
        self.assertAlmostEqual(nl_gradient(params, data)[7], expected, places=12)


class TestEstimation(unittest.TestCase):
    def test_single_parameter_matches_grid_search(self):
        """Test that a one-coefficient logit lands on the grid-search maximum."""
        rng = np.random.default_rng(21)
        zones = [zone(j, (3,) * 7) for j in range(5)]
        access = rng.normal(size=(200, 5))
        utilities = 0.7 * access
        probs = np.exp(utilities) / np.exp(utilities).sum(axis=1, keepdims=True)
        choices = [int(rng.choice(5, p=p)) for p in probs]
        people = [person(i, work=c) for i, c in enumerate(choices)]
        data = build_dataset(zones, people, access)

        result = estimate_nl(data)
        self.assertTrue(result.converged)

        chosen = access[np.arange(200), choices]

        def ll(betas):
            u = betas[:, None, None] * access[None, :, :]
            return (betas[:, None] * chosen[None, :]).sum(axis=1) - np.log(np.exp(u).sum(axis=2)).sum(axis=1)

        grid = np.linspace(-3, 3, 6001)
        best = grid[np.argmax(ll(grid))]
        fine = np.linspace(best - 1e-3, best + 1e-3, 2001)
        best = fine[np.argmax(ll(fine))]
        self.assertAlmostEqual(result.params.beta_a, best, delta=1e-4)

    def test_result_fields(self):
        """Test that a converged estimate fills the likelihoods, standard errors and t-values."""
        data = simulated(600, rows=5, cols=5, seed=3)
        result = estimate_nl(data)
        self.assertTrue(result.converged)
        self.assertGreaterEqual(result.ll_final, result.ll_null)
        self.assertEqual(result.n_obs, 600)
        self.assertEqual(result.dataset_fingerprint, data.fingerprint)
        self.assertAlmostEqual(result.rho_squared, 1 - result.ll_final / result.ll_null)
        self.assertTrue(result.hessian_ok)
        self.assertTrue(all(s > 0 for s in result.std_errors))
        self.assertAlmostEqual(result.t_against_1, (result.params.lam - 1) / result.std_errors[6])

    def test_weight_scaling_keeps_argmax(self):
        """Test that doubling every weight leaves the estimate unchanged."""
        data = simulated(400, rows=4, cols=4, seed=8)
        doubled = build_dataset(
            data.zones,
            [p.model_copy(update={"weight": 2.0 * p.weight}) for p in data.individuals],
            data.accessibility,
        )
        a = estimate_nl(data).params.to_free_vector()
        b = estimate_nl(doubled).params.to_free_vector()
        assert_allclose(a, b, atol=1e-6)

    def test_warm_start_at_optimum(self):
        """Test that starting at a previous optimum takes fewer iterations and lands on it."""
        data = simulated(800, rows=5, cols=5, seed=4)
        settings = LbfgsSettings(tol=1e-7)
        cold = estimate_nl(data, settings=settings)
        warm = estimate_nl(data, init=cold.params, settings=settings)
        self.assertLess(warm.iterations, cold.iterations)
        assert_allclose(warm.params.to_free_vector(), cold.params.to_free_vector(), atol=1e-3)

    def test_iteration_cap_flags_non_convergence(self):
        """Test that a one-iteration cap returns an unconverged result."""
        data = simulated(300, rows=4, cols=4, seed=5)
        result = estimate_nl(data, settings=LbfgsSettings(max_iter=1))
        self.assertFalse(result.converged)
        self.assertEqual(result.iterations, 1)

    def test_model_wrapper_probabilities(self):
        """Test that the model wrapper gives rows that sum to one."""
        data = random_dataset(seed=6)
        model = NestedLogitModel(TRUE_PARAMS)
        log_p = model.log_probabilities(data)
        assert_allclose(np.exp(log_p).sum(axis=1), np.ones(data.n_individuals), atol=1e-12)
        self.assertEqual(model.model_kind, "nested_logit")

    def test_recovery_moderate_sample(self):
        """Test that 2,000 simulated choices recover the true parameters within three standard errors."""
        data = simulated(2000, seed=42)
        result = estimate_nl(data)
        self.assertTrue(result.converged)
        self.assertAlmostEqual(result.params.beta_a, TRUE_PARAMS.beta_a, delta=0.15)
        self.assertGreater(result.ll_final, nl_log_likelihood(NlParams(), data))
        self.assertTrue(result.hessian_ok)
        truth = np.array(TRUE_PARAMS.values())
        estimate = np.array(result.params.values())
        self.assertTrue(np.all(np.abs(estimate - truth) <= 5 * np.array(result.std_errors)))

    @unittest.skipUnless(os.getenv("WORKLOC_SLOW_TESTS"), "set WORKLOC_SLOW_TESTS=1 to run")
    def test_recovery_full_sample(self):
        """Test that 5,000 simulated individuals recover every parameter with significant t-values.

        Every estimate lies within 3 std errors of the truth and every |t| exceeds 2.
        lambda and beta_a are also within 10% of the truth. The occupation constants
        and beta_acr carry std errors of the same order as 10% of their values at this
        sample size, so they are held to the std-error bound only.
        """
        data = simulated(5000, seed=42)
        result = estimate_nl(data)
        self.assertTrue(result.converged)
        self.assertTrue(result.hessian_ok)
        std = np.array(result.std_errors)
        estimate = np.array(result.params.values())
        truth = np.array(TRUE_PARAMS.values())
        assert_array_less(np.abs(estimate - truth), 3 * std)
        assert_array_less(2.0, np.abs(result.t_values))
        relative = np.abs(estimate - truth) / np.abs(truth)
        assert_array_less(relative[[6, 7]], 0.10)

    def test_std_errors_recomputable(self):
        """Test that nl_std_errors at the estimate reproduces the std errors stored on the result."""
        data = simulated(1500, rows=5, cols=5, seed=7)
        result = estimate_nl(data)
        self.assertTrue(result.converged)
        self.assertTrue(result.hessian_ok)
        assert_allclose(nl_std_errors(result.params, data), result.std_errors, rtol=1e-12)


if __name__ == "__main__":
    unittest.main()
