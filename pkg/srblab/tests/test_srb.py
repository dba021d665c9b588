import math

import numpy as np
from django.test import SimpleTestCase
from scipy import stats

from srblab.cocycle import WeightedPointMeasure
from srblab.curves import CurveJet, is_strongly_bounded
from srblab.dynamics import CAT_EXPONENT, CatMap, IdentityMap, SurfaceMap
from srblab.exceptions import DomainError, InvariantViolation, PreconditionError
from srblab.srb import (INCONSISTENT, INSUFFICIENT, SRB_CONSISTENT, PsiObservable, SrbCandidate, apply_largeness,
                        arc_entropy_estimates, assess_candidate, cell_parameters,
                        basin_raster, check_seed_sources, exponent_histogram, exponent_partition, grid_wasserstein,
                        parse_seed, ruelle_check, run_pipeline, seed_curve, stretched_samples, verdict_for)

UNIT_BOX = (0.0, 1.0, 0.0, 1.0)
UNSTABLE_ANGLE = math.atan2(1.0, (1.0 + math.sqrt(5.0)) / 2.0)


class ExpansionMap(SurfaceMap):
    """x ↦ 2x on [−1, 1]², a source at the origin."""

    name = 'expansion'
    torus = False
    box = (-1.0, 1.0, -1.0, 1.0)

    def formula(self, x, y):
        return 2.0 * x, 2.0 * y

    def inverse_formula(self, x, y):
        return 0.5 * x, 0.5 * y

    def jacobian(self, x, y):
        one = np.ones(np.shape(x))
        zero = 0.0 * one
        return np.stack([np.stack([2.0 * one, zero], axis=-1), np.stack([zero, 2.0 * one], axis=-1)], axis=-2)


def candidate(projected, verdict=INCONSISTENT, chi1=0.5, entropy=0.5, b=0.1, chi2=math.nan):
    return SrbCandidate(measure=None, projected=projected, chi1=chi1, entropy=entropy, b_threshold=b,
                        verdict=verdict, chi2=chi2)


class SeedTests(SimpleTestCase):
    def test_seed_families(self):
        horizontal = seed_curve(CatMap(), 'h', 0.3, 0.01)
        np.testing.assert_allclose(horizontal.evaluate(0.0), [0.5, 0.3])
        np.testing.assert_allclose(horizontal.derivative(0.0, 1), [0.00999, 0.0])
        diagonal = seed_curve(CatMap(), 'd', 0.37, 0.01)
        np.testing.assert_allclose(diagonal.evaluate(0.0), [0.37, 0.37])
        self.assertTrue(is_strongly_bounded(diagonal, 0.01))

    def test_bad_seeds(self):
        with self.assertRaises(DomainError):
            seed_curve(CatMap(), 'z', 0.3, 0.01)
        with self.assertRaises(DomainError):
            seed_curve(CatMap(), 'h', 1.5, 0.01)

    def test_parse_seed(self):
        self.assertEqual(parse_seed('d:0.37'), ('d', 0.37))
        self.assertEqual(parse_seed(' v:1 '), ('v', 1.0))
        with self.assertRaises(DomainError):
            parse_seed('q:0.5')

    def test_seed_through_a_source_is_refused(self):
        through = CurveJet.segment((0.0, 0.0), (0.01, 0.0))
        with self.assertRaises(PreconditionError):
            check_seed_sources(ExpansionMap(), through, max_period=2)
        away = CurveJet.segment((0.5, 0.5), (0.01, 0.0))
        self.assertEqual(check_seed_sources(ExpansionMap(), away, max_period=2), 1)

    def test_cat_map_has_no_sources(self):
        self.assertEqual(check_seed_sources(CatMap(), seed_curve(CatMap(), 'd', 0.37, 0.01), max_period=2), 0)


class DistanceTests(SimpleTestCase):
    def test_diracs_half_apart_on_one_axis(self):
        mu = WeightedPointMeasure.dirac([0.2, 0.5])
        nu = WeightedPointMeasure.dirac([0.7, 0.5])
        self.assertAlmostEqual(grid_wasserstein(mu, nu, UNIT_BOX), 0.25)

    def test_distance_to_itself(self):
        mu = WeightedPointMeasure(np.random.default_rng(1).random((50, 2)))
        self.assertEqual(grid_wasserstein(mu, mu, UNIT_BOX), 0.0)

    def test_projective_atoms_use_the_base_point(self):
        mu = WeightedPointMeasure([[0.2, 0.5, 0.1]])
        nu = WeightedPointMeasure([[0.2, 0.5, 2.0]])
        self.assertEqual(grid_wasserstein(mu, nu, UNIT_BOX), 0.0)

    def test_grid_points_match_scipy_marginals(self):
        rng = np.random.default_rng(4)
        first = rng.integers(0, 64, size=(30, 2)) / 64.0
        second = rng.integers(0, 64, size=(20, 2)) / 64.0
        expected = np.mean([stats.wasserstein_distance(first[:, axis], second[:, axis]) for axis in range(2)])
        observed = grid_wasserstein(WeightedPointMeasure(first), WeightedPointMeasure(second), UNIT_BOX, 64)
        self.assertAlmostEqual(observed, expected, places=12)


class ExponentHistogramTests(SimpleTestCase):
    def test_two_modes(self):
        exponents = np.concatenate([np.full(100, 0.5), np.full(100, 1.0), [0.01]])
        partition = exponent_histogram(exponents, 0.1)
        self.assertEqual(len(partition.modes), 2)
        self.assertAlmostEqual(partition.modes[0], 0.5, delta=0.02)
        self.assertAlmostEqual(partition.modes[1], 1.0, delta=0.02)
        self.assertEqual(partition.outside_mass, 0.0)
        self.assertAlmostEqual(partition.mode_share(partition.modes[0]), 0.5)
        self.assertEqual(sum(row['count'] for row in partition.rows()), 201)

    def test_nothing_above_b(self):
        partition = exponent_histogram(np.array([0.01, 0.02]), 0.5)
        self.assertEqual(partition.modes, [])
        self.assertEqual(partition.outside_mass, 0.0)

    def test_cat_map_has_a_single_mode(self):
        partition = exponent_partition(CatMap(), 8, 50, 0.1)
        self.assertEqual(len(partition.lambda_estimate), 1)
        self.assertAlmostEqual(partition.lambda_estimate[0], CAT_EXPONENT, delta=0.02)
        self.assertEqual(partition.escaped_fraction, 0.0)
        self.assertEqual(partition.outside_mass, 0.0)


class VerdictTests(SimpleTestCase):
    def test_verdicts(self):
        self.assertEqual(verdict_for(0.96, 0.95, 0.1), SRB_CONSISTENT)
        self.assertEqual(verdict_for(0.96, 0.5, 0.1), INCONSISTENT)
        self.assertEqual(verdict_for(0.96, 0.96, 1.0), INCONSISTENT)
        self.assertEqual(verdict_for(0.96, 0.96, 0.1, stability=1.0), INCONSISTENT)
        self.assertEqual(verdict_for(math.nan, 0.5, 0.1), INSUFFICIENT)

    def test_consistent_candidate_needs_exponent_above_b(self):
        with self.assertRaises(InvariantViolation):
            candidate(None, SRB_CONSISTENT, chi1=0.05, entropy=0.05, b=0.1)

    def test_ruelle_check(self):
        self.assertTrue(ruelle_check(candidate(None, chi1=0.96, entropy=0.9, chi2=-0.96)).holds)
        failing = ruelle_check(candidate(None, chi1=0.96, entropy=1.5, chi2=-0.96))
        self.assertFalse(failing.holds)
        self.assertAlmostEqual(failing.margin, -0.54)
        with self.assertRaises(PreconditionError):
            ruelle_check(candidate(None, chi1=math.nan))


class CandidateTests(SimpleTestCase):
    def test_psi_on_the_unstable_direction(self):
        psi = PsiObservable(CatMap(), 1)
        self.assertAlmostEqual(float(psi(np.array([0.3, 0.2, UNSTABLE_ANGLE]))[0]), CAT_EXPONENT, places=9)
        with self.assertRaises(DomainError):
            PsiObservable(CatMap(), 0)

    def test_assess_a_measure_along_the_unstable_direction(self):
        grid = CatMap().grid(8)
        states = np.column_stack([grid, np.full(grid.shape[0], UNSTABLE_ANGLE)])
        result = assess_candidate(CatMap(), WeightedPointMeasure(states), 0.1, 40)
        self.assertAlmostEqual(result.chi1, CAT_EXPONENT, delta=1e-6)
        self.assertAlmostEqual(result.chi2, -CAT_EXPONENT, delta=1e-6)
        self.assertEqual(len(result.entropies), 3)
        self.assertEqual(result.entropy, max(result.entropies))
        self.assertEqual(result.label, 'compact')

    def test_assessment_needs_directions(self):
        with self.assertRaises(DomainError):
            assess_candidate(CatMap(), WeightedPointMeasure([[0.1, 0.2]]), 0.1, 10)

    def test_stretched_samples(self):
        stretches = np.array([[0.0, 1.0, 2.0, 3.0, 4.0], np.zeros(5), [0.0, 0.0, 0.0, 0.0, 3.7]])
        np.testing.assert_array_equal(stretched_samples(stretches, 0.9), [0, 2])

    def test_cell_parameters_split_each_sampling_cell(self):
        np.testing.assert_allclose(cell_parameters(4, [0, 3], 2), [-0.875, -0.625, 0.625, 0.875])
        np.testing.assert_allclose(cell_parameters(10, [4], 1), [-0.1])


class ArcEntropyTests(SimpleTestCase):
    def test_unstable_arcs_of_the_cat_map(self):
        sigma = CurveJet.segment((0.3, 0.4), 0.005 * np.array([math.cos(UNSTABLE_ANGLE), math.sin(UNSTABLE_ANGLE)]))
        centres = np.linspace(-0.9, 0.9, 10)
        estimates = arc_entropy_estimates(CatMap(), sigma, centres, np.ones(10), [6, 12], half_width=0.05)
        self.assertEqual(len(estimates), 3)
        for estimate in estimates:
            self.assertAlmostEqual(estimate, CAT_EXPONENT, delta=0.1 * CAT_EXPONENT)

    def test_identity_arcs_carry_no_entropy(self):
        sigma = CurveJet.segment((0.3, 0.4), (0.004, 0.0))
        estimates = arc_entropy_estimates(IdentityMap(), sigma, np.array([0.0, 0.5]), np.ones(2), [3], half_width=0.1)
        for estimate in estimates:
            self.assertAlmostEqual(estimate, 0.0, places=9)


class LargenessTests(SimpleTestCase):
    def test_fast_exponent_keeps_the_verdict(self):
        result = candidate(None, SRB_CONSISTENT, chi1=0.96, entropy=0.95)
        self.assertTrue(apply_largeness(result, 6))
        self.assertTrue(result.largeness_ok)
        self.assertEqual(result.verdict, SRB_CONSISTENT)

    def test_slow_exponent_demotes_the_verdict(self):
        result = candidate(None, SRB_CONSISTENT, chi1=0.3, entropy=0.3)
        self.assertFalse(apply_largeness(result, 2))
        self.assertFalse(result.largeness_ok)
        self.assertEqual(result.verdict, INCONSISTENT)

    def test_missing_exponent_is_not_judged(self):
        result = candidate(None, INSUFFICIENT, chi1=math.nan)
        self.assertIsNone(apply_largeness(result, 6))
        self.assertEqual(result.verdict, INSUFFICIENT)


class BasinTests(SimpleTestCase):
    def setUp(self):
        self.candidates = [candidate(WeightedPointMeasure.dirac([0.25, 0.25])),
                           candidate(WeightedPointMeasure.dirac([0.75, 0.75]))]

    def test_nearest_candidate_with_ties_to_the_lowest_index(self):
        raster = basin_raster(IdentityMap(), self.candidates, 2, 5, threshold=1.0)
        self.assertEqual(raster.labels.tolist(), [0, 0, 0, 1])
        self.assertEqual(raster.counts(), {0: 3, 1: 1})

    def test_far_points_are_unclassified(self):
        raster = basin_raster(IdentityMap(), self.candidates, 2, 5)
        self.assertEqual(raster.labels.tolist(), [0, -1, -1, 1])
        self.assertEqual(raster.classified_fraction, 0.0)
        self.assertEqual(len(raster.rows()), 4)

    def test_candidates_need_measures(self):
        with self.assertRaises(PreconditionError):
            basin_raster(IdentityMap(), [], 2, 5)
        with self.assertRaises(PreconditionError):
            basin_raster(IdentityMap(), self.candidates + [candidate(None)], 2, 5)


class PipelineTests(SimpleTestCase):
    def test_threshold_below_growth_is_refused(self):
        with self.assertRaises(PreconditionError):
            run_pipeline(CatMap(), seed_curve(CatMap(), 'd', 0.37, 0.01), 0.2, 6, 2, 1, 50, samples=40)

    def test_identity_has_no_stretched_samples(self):
        sigma = seed_curve(IdentityMap(), 'h', 0.3, 0.01)
        result = run_pipeline(IdentityMap(), sigma, 0.1, 3, 2, 1, 20, samples=20)
        self.assertEqual(result.verdict, INSUFFICIENT)
        self.assertIsNone(result.measure)
        self.assertIsNotNone(result.histogram)

    def test_cat_map_candidate(self):
        sigma = seed_curve(CatMap(), 'd', 0.37, 0.01)
        result = run_pipeline(CatMap(), sigma, 0.5, 6, 2, 1, 50, samples=40)
        self.assertEqual(result.verdict, SRB_CONSISTENT)
        self.assertIsNotNone(result.measure)
        self.assertIn(result.n, (6, 12))
        self.assertAlmostEqual(result.chi1, CAT_EXPONENT, delta=1e-3)
        self.assertAlmostEqual(result.chi1 + result.chi2, 0.0, delta=1e-6)
        self.assertLessEqual(abs(result.entropy - result.chi1), 0.1 * result.chi1)
        self.assertTrue(result.largeness_ok)
        self.assertEqual(set(result.defects), {'x', 'y'})
        self.assertGreaterEqual(result.delta_q, 0.0)
        self.assertIsNotNone(result.psi_echo)
        self.assertEqual(len(result.rows()), len(result.measure))
