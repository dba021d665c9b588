import math

import numpy as np
from django.test import SimpleTestCase

from srblab.cli import parse_set_spec
from srblab.cocycle import (BoxPartition, JoinPartition, LabelPartition, Partition, PointPartition,
                            WeightedPointMeasure, additive_process, additive_sum, cocycle_inequality_check,
                            cocycle_over_irreducibles, conditional_entropy_rate, empirical_measure, entropy_slope,
                            gibbs_diagnostic, invariance_defect, large_fraction, largeness_check,
                            misiurewicz_check, norm_process, positive_part, static_entropy)
from srblab.density import IntegerSet, borel_cantelli_select
from srblab.dynamics import CAT_EXPONENT, CatMap, surface_step
from srblab.exceptions import DomainError, PreconditionError


def shift(states):
    return states + 1.0


def cyclic(states):
    return np.mod(states + 1.0, 5.0)


def drop_low_bit(states):
    return np.floor(states / 2.0)


def identity(states):
    return states


class LowBitPartition(Partition):
    size = 2
    diameter = 1.0

    def assign_many(self, states):
        return np.asarray(states)[:, 0].astype(np.int64) % 2


class MeasureTests(SimpleTestCase):
    def test_weights_are_normalized_and_mass_kept(self):
        mu = WeightedPointMeasure([[0.1, 0.2], [0.3, 0.4]], [1.0, 3.0])
        np.testing.assert_allclose(mu.weights, [0.25, 0.75])
        self.assertEqual(mu.mass, 4.0)
        self.assertAlmostEqual(mu.integrate(lambda s: s[:, 0]), 0.25)

    def test_bad_measures_are_refused(self):
        with self.assertRaises(DomainError):
            WeightedPointMeasure(np.zeros((0, 2)))
        with self.assertRaises(DomainError):
            WeightedPointMeasure([[0.0], [1.0]], [1.0, -1.0])
        with self.assertRaises(DomainError):
            WeightedPointMeasure([[0.0], [1.0]], [0.0, 0.0])

    def test_projection_drops_the_direction(self):
        mu = WeightedPointMeasure([[0.1, 0.2, 1.0]])
        self.assertTrue(mu.is_projective)
        self.assertEqual(mu.projected().dim, 2)

    def test_empirical_measure_along_a_rotation(self):
        mu = WeightedPointMeasure.dirac([0.0])
        rotated = empirical_measure(mu, IntegerSet([1, 2, 3, 4], horizon=4), lambda s: np.mod(s + 0.25, 1.0))
        np.testing.assert_allclose(sorted(rotated.states[:, 0]), [0.0, 0.25, 0.5, 0.75])
        np.testing.assert_allclose(rotated.weights, [0.25] * 4)

    def test_empirical_measure_needs_a_nonempty_set(self):
        with self.assertRaises(DomainError):
            empirical_measure(WeightedPointMeasure.dirac([0.0]), IntegerSet([], horizon=4), shift)

    def test_invariance_defect(self):
        mu = WeightedPointMeasure.dirac([0.0])
        phi = lambda s: s[:, 0]
        self.assertEqual(invariance_defect(mu, IntegerSet([0, 1], horizon=5), phi, cyclic), 1.0)
        self.assertEqual(invariance_defect(mu, IntegerSet.interval(0, 4, horizon=5), phi, cyclic), 0.0)


class ProcessTests(SimpleTestCase):
    def setUp(self):
        self.cat = CatMap()
        self.norms = norm_process(surface_step(self.cat), self.cat.differential_many)
        self.point = np.array([[0.31, 0.27]])

    def test_additive_process_has_no_gap(self):
        process = additive_process(lambda s: np.sin(s[:, 0]), shift)
        np.testing.assert_allclose(process.subadditivity_gap(np.array([[0.3]]), 3, 4), [0.0], atol=1e-12)

    def test_norm_process_is_subadditive(self):
        gap = self.norms.subadditivity_gap(self.point, 5, 7)
        self.assertGreaterEqual(float(gap[0]), -1e-9)
        self.assertAlmostEqual(float(self.norms(self.point, 10)[0]), 10 * CAT_EXPONENT, places=9)

    def test_positive_part_clips_negative_sums(self):
        process = positive_part(additive_process(lambda s: -s[:, 0], shift))
        np.testing.assert_array_equal(process(np.array([[-3.0], [1.0]]), 2), [5.0, 0.0])

    def test_irreducible_sum_of_an_additive_process(self):
        phi = lambda s: s[:, 0]
        process = additive_process(phi, shift)
        F = IntegerSet.interval(2, 8, horizon=10)
        E = IntegerSet([2, 5, 8, 9], horizon=10)
        self.assertAlmostEqual(cocycle_over_irreducibles([0.0], F, E, process), 27.0)
        self.assertAlmostEqual(additive_sum([0.0], F, phi, shift), 27.0)

    def test_largeness(self):
        E = IntegerSet([0, 3, 5], horizon=5)
        self.assertTrue(largeness_check(self.point[0], E, self.norms, 0.9))
        check = largeness_check(self.point[0], E, self.norms, 1.0)
        self.assertFalse(check)
        self.assertLess(check.margin, 0.0)

    def test_largeness_needs_two_times(self):
        with self.assertRaises(PreconditionError):
            largeness_check(self.point[0], IntegerSet([3], horizon=5), self.norms, 0.0)

    def test_large_fraction(self):
        F = IntegerSet.interval(0, 9, horizon=9)
        self.assertEqual(large_fraction(self.point[0], F, self.norms, 5, 0.9), 1.0)

    def test_cocycle_inequality_with_a_constant_cocycle(self):
        process = additive_process(lambda s: np.ones(len(s)), identity, sup_one=1.0)
        F = IntegerSet.interval(1, 50, horizon=100)
        check = cocycle_inequality_check([0.0], F, F, process, N=10, M=1, phi1_sup=1.0)
        self.assertAlmostEqual(check.lhs, 0.98)
        self.assertAlmostEqual(check.rhs, -0.2)
        self.assertTrue(check.verdict)

    def test_cocycle_inequality_needs_ordered_horizons(self):
        process = additive_process(lambda s: np.ones(len(s)), identity)
        F = IntegerSet.interval(1, 5, horizon=10)
        with self.assertRaises(DomainError):
            cocycle_inequality_check([0.0], F, F, process, N=20, M=1, phi1_sup=1.0)


class PartitionTests(SimpleTestCase):
    def test_grid_for_a_diameter(self):
        partition = BoxPartition.for_diameter((0.0, 1.0, 0.0, 1.0), 0.1, torus=True)
        self.assertEqual(partition.resolution, (15, 15))
        self.assertLess(partition.diameter, 0.1)

    def test_torus_cells_wrap(self):
        partition = BoxPartition((0.0, 1.0, 0.0, 1.0), 10, torus=True)
        np.testing.assert_array_equal(partition.cell_indices(np.array([[-0.01, 0.55]])), [[9, 5]])

    def test_planar_cells_clip(self):
        partition = BoxPartition((0.0, 1.0, 0.0, 1.0), 10)
        np.testing.assert_array_equal(partition.cell_indices(np.array([[-0.5, 1.5]])), [[0, 9]])

    def test_static_entropy(self):
        partition = BoxPartition((0.0, 1.0, 0.0, 1.0), 2, torus=True)
        spread = WeightedPointMeasure([[0.1, 0.1], [0.1, 0.9], [0.9, 0.1], [0.9, 0.9]])
        clustered = WeightedPointMeasure([[0.1, 0.1], [0.2, 0.2], [0.3, 0.3]])
        self.assertAlmostEqual(static_entropy(spread, partition), math.log(4))
        self.assertEqual(static_entropy(clustered, partition), 0.0)

    def test_point_partition(self):
        mu = WeightedPointMeasure([[0.0], [1.0], [2.0], [3.0]])
        self.assertAlmostEqual(static_entropy(mu, PointPartition(4)), math.log(4))
        self.assertAlmostEqual(conditional_entropy_rate(mu, PointPartition(4), 3, cyclic), 0.0)

    def test_entropy_rate_of_the_full_shift(self):
        words = WeightedPointMeasure(np.arange(1024, dtype=float))
        for m in (1, 3, 6):
            with self.subTest(m=m):
                self.assertAlmostEqual(conditional_entropy_rate(words, LowBitPartition(), m, drop_low_bit),
                                       math.log(2))

    def test_entropy_slope_of_the_full_shift(self):
        words = WeightedPointMeasure(np.arange(1024, dtype=float))
        self.assertAlmostEqual(entropy_slope(words, LowBitPartition(), 1, 3, drop_low_bit), math.log(2))
        given = LabelPartition(1024, column=0)
        self.assertAlmostEqual(entropy_slope(words, LowBitPartition(), 1, 3, drop_low_bit, given=given), 0.0)
        with self.assertRaises(DomainError):
            entropy_slope(words, LowBitPartition(), 0, 3, drop_low_bit)

    def test_label_partition_reads_one_column(self):
        states = np.array([[0.3, 0.4, 2.0], [0.9, 0.1, 0.0]])
        np.testing.assert_array_equal(LabelPartition(3).assign_many(states), [2, 0])
        np.testing.assert_array_equal(LabelPartition(1, column=0).assign_many(np.array([[0.0], [0.0]])), [0, 0])

    def test_entropy_is_concave_under_mixtures(self):
        rng = np.random.default_rng(11)
        partition = BoxPartition((0.0, 1.0, 0.0, 1.0), 4, torus=True)
        for trial in range(25):
            mu = WeightedPointMeasure(rng.random((30, 2)), rng.random(30))
            nu = WeightedPointMeasure(rng.random((20, 2)) * 0.5, rng.random(20))
            t = float(rng.random())
            mixed = static_entropy(mu.mixture(nu, t), partition)
            average = t * static_entropy(mu, partition) + (1.0 - t) * static_entropy(nu, partition)
            with self.subTest(trial=trial):
                self.assertGreaterEqual(mixed, average - 1e-12)
                self.assertLessEqual(mixed, average + math.log(2) + 1e-12)

    def test_join_is_subadditive(self):
        rng = np.random.default_rng(5)
        coarse = BoxPartition((0.0, 1.0, 0.0, 1.0), 3, torus=True)
        shifted = BoxPartition((0.0, 1.0, 0.0, 1.0), 5, torus=True, offset=(0.5, 0.5))
        for trial in range(25):
            mu = WeightedPointMeasure(rng.random((40, 2)), rng.random(40))
            first, second = static_entropy(mu, coarse), static_entropy(mu, shifted)
            joined = static_entropy(mu, JoinPartition(coarse, shifted))
            with self.subTest(trial=trial):
                self.assertLessEqual(joined, first + second + 1e-12)
                self.assertGreaterEqual(joined, max(first, second) - 1e-12)
                self.assertAlmostEqual(static_entropy(mu, coarse | shifted), joined)

    def test_empirical_entropy_bound(self):
        words = WeightedPointMeasure(np.arange(1024, dtype=float))
        check = misiurewicz_check(words, IntegerSet.interval(0, 4, horizon=4), LowBitPartition(), 2, drop_low_bit)
        self.assertTrue(check.verdict)
        self.assertAlmostEqual(check.lhs, math.log(2))


class GibbsTests(SimpleTestCase):
    def setUp(self):
        E, _ = parse_set_spec('evens', 256)
        self.plan = borel_cantelli_select({0: E}, [1.0], beta=0.3)
        self.samples = WeightedPointMeasure([[0.1, 0.1], [0.2, 0.3], [0.6, 0.6], [0.9, 0.2]], [0.25] * 4)

    def test_single_cell_gives_zero_slack(self):
        report = gibbs_diagnostic(self.plan, self.samples, BoxPartition((0.0, 1.0, 0.0, 1.0), 1, torus=True),
                                  lambda s: np.zeros(len(s)), 0.0, identity)
        np.testing.assert_allclose(report.slacks, np.zeros(4), atol=1e-12)
        self.assertEqual(report.violation_fraction, 0.0)

    def test_coarse_partition_is_refused(self):
        with self.assertRaises(PreconditionError):
            gibbs_diagnostic(self.plan, self.samples, BoxPartition((0.0, 1.0, 0.0, 1.0), 1, torus=True),
                             lambda s: np.zeros(len(s)), 0.0, identity, scale=0.1)

    def test_missing_samples_give_an_empty_report(self):
        report = gibbs_diagnostic(self.plan, None, BoxPartition((0.0, 1.0, 0.0, 1.0), 4, torus=True),
                                  lambda s: np.zeros(len(s)), 0.0, identity)
        self.assertEqual(report.worst, -math.inf)
