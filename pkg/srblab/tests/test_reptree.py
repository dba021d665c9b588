import math

import numpy as np
from django.test import SimpleTestCase, tag

from srblab.curves import CurveJet, is_strongly_bounded
from srblab.dynamics import CAT_EXPONENT, CatMap, IdentityMap, StandardMap
from srblab.exceptions import PreconditionError
from srblab.reptree import (STEP_RATE, NodeBudget, build_tree, choose_scale, cover_dynamical_ball, geometric_set,
                            geometric_sets, label_sequences, lebgeo_diagnostic, local_cover_counts, log_stretches,
                            sample_parameters, sublevel_intervals)

EPSILON = 0.01
UNSTABLE = np.array([1.0, (math.sqrt(5.0) - 1.0) / 2.0]) / math.sqrt(1.0 + ((math.sqrt(5.0) - 1.0) / 2.0) ** 2)


def tilted_seed(epsilon=EPSILON):
    direction = np.array([1.0, 0.3]) / math.hypot(1.0, 0.3)
    return CurveJet.segment((0.3, 0.4), 0.999 * epsilon * direction)


class HelperTests(SimpleTestCase):
    def test_sample_parameters_are_jittered_cells(self):
        params = sample_parameters(10, seed=3)
        cells = np.floor((params + 1.0) * 5.0)
        np.testing.assert_array_equal(cells, np.arange(10))
        np.testing.assert_array_equal(params, sample_parameters(10, seed=3))

    def test_sublevel_intervals_of_a_linear_speed(self):
        polynomial = np.array([[0.0, 0.0], [1.0, 0.0]])
        intervals = sublevel_intervals(polynomial, 0.5, 2.0)
        self.assertEqual(len(intervals), 2)
        np.testing.assert_allclose(intervals, [(-1.0, -0.5), (0.5, 1.0)], atol=1e-9)

    def test_labels_of_the_identity_vanish(self):
        sigma = CurveJet.segment((0.3, 0.4), (0.004, 0.0))
        labels = label_sequences(IdentityMap(), 3, sigma, [-0.5, 0.0, 0.5], 2)
        self.assertEqual(labels.shape, (3, 2, 2))
        self.assertFalse(labels.any())

    def test_cat_labels(self):
        labels = label_sequences(CatMap(), 6, tilted_seed(), [0.0], 2)
        self.assertEqual(labels[0].tolist(), [[5, 5], [5, 5]])

    def test_log_stretches_along_the_unstable_direction(self):
        sigma = CurveJet.segment((0.3, 0.4), 0.005 * UNSTABLE)
        totals = log_stretches(CatMap(), sigma, [0.0, 0.5], 5)
        self.assertEqual(totals.shape, (2, 6))
        np.testing.assert_allclose(totals[:, 5], 5 * CAT_EXPONENT, atol=1e-9)

    def test_scale_of_the_cat_map(self):
        choice = choose_scale(CatMap(), 1, grid=4)
        self.assertEqual(choice.epsilon, 0.125)
        self.assertEqual(choice.rung, 1)
        self.assertTrue(choice.refined_agrees)


class TreePreconditionTests(SimpleTestCase):
    def test_scale_too_large(self):
        with self.assertRaises(PreconditionError):
            build_tree(CatMap(), 2, tilted_seed(0.3), 0.3, 1, samples=4)

    def test_seed_faster_than_scale(self):
        with self.assertRaises(PreconditionError):
            build_tree(CatMap(), 2, tilted_seed(0.02), EPSILON, 1, samples=4)

    def test_nonpositive_period(self):
        with self.assertRaises(PreconditionError):
            build_tree(CatMap(), 0, tilted_seed(), EPSILON, 1, samples=4)


class IdentityTreeTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.sigma = CurveJet.segment((0.3, 0.4), (0.004, 0.0))
        cls.tree = build_tree(IdentityMap(), 3, cls.sigma, EPSILON, 2, samples=40, node_budget=20000)

    def test_every_level_covers_the_samples(self):
        self.assertEqual(self.tree.built_depth, 2)
        self.assertEqual(self.tree.summary()['coverage'], [1.0, 1.0, 1.0])
        self.assertFalse(self.tree.truncated)

    def test_no_expansion_means_no_red_nodes(self):
        self.assertTrue(all(node.colour == 'blue' for node in self.tree.nodes))
        self.assertTrue(all(len(result.E) == 0 for result in geometric_sets(self.tree)))

    def test_rows_reference_their_parents(self):
        rows = self.tree.rows()
        ids = {row['node_id'] for row in rows}
        self.assertEqual(rows[0]['parent_id'], '')
        self.assertTrue(all(row['parent_id'] in ids for row in rows[1:]))

    def test_geometric_density_diagnostic_is_empty(self):
        diagnostic = lebgeo_diagnostic(self.tree, 0.1, 0.1)
        self.assertEqual(diagnostic.n_values, [3, 6])
        self.assertEqual(diagnostic.fractions, [0.0, 0.0])
        self.assertTrue(diagnostic.nonincreasing)
        self.assertIsNone(diagnostic.log_slope)

    def test_local_cover_counts(self):
        rows = local_cover_counts(self.tree, float(self.tree.params[0]))
        self.assertEqual([row.level for row in rows], [1, 2])
        for row in rows:
            self.assertGreaterEqual(row.count, 1)
            self.assertLessEqual(row.count, row.bound)

    def test_dynamical_ball_of_the_identity_is_one_piece(self):
        cover = cover_dynamical_ball(IdentityMap(), self.sigma, 0.0, 1, 3, EPSILON)
        self.assertEqual(cover.count, 1)
        self.assertTrue(cover.covered)
        self.assertTrue(cover.within_bound)
        self.assertEqual(cover.omega, 0.0)


class CatTreeTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.tree = build_tree(CatMap(), 6, tilted_seed(), EPSILON, 2, samples=40, node_budget=20000)
        cls.sets = geometric_sets(cls.tree)

    def test_coverage_and_red_nodes(self):
        self.assertEqual(self.tree.summary()['coverage'], [1.0, 1.0, 1.0])
        self.assertTrue(any(node.colour == 'red' for node in self.tree.nodes))

    def test_nodes_are_strongly_bounded_with_small_steps(self):
        for node in self.tree.nodes[1:]:
            self.assertLessEqual(node.step_rate, STEP_RATE * (1.0 + 1e-9))
            for curve in node.curves:
                self.assertTrue(is_strongly_bounded(curve, EPSILON))

    def test_geometric_sets_are_multiples_of_the_period(self):
        self.assertEqual(len(self.sets), 40)
        self.assertTrue(any(len(result.E) for result in self.sets))
        for result in self.sets:
            self.assertTrue(all(n % 6 == 0 and 0 < n <= 12 for n in result.E))
            self.assertAlmostEqual(result.tau, math.log(10.0) / 6)

    def test_geometric_times_are_certified(self):
        index = next(i for i, result in enumerate(self.sets) if len(result.E))
        verified = geometric_set(self.tree, float(self.tree.params[index]), verify=True)
        self.assertTrue(self.sets[index].E.issubset(verified.E))
        for certificate in verified.certificates.values():
            self.assertTrue(certificate.verdict)
            self.assertGreaterEqual(certificate.derivative, 1.5 * verified.alpha * EPSILON)

    def test_leaf_counts_against_the_valence_bound(self):
        for count, bound in self.tree.leaf_bound().values():
            self.assertLessEqual(count, bound)


@tag('slow')
class DeepCatTreeTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.tree = build_tree(CatMap(), 1, tilted_seed(), EPSILON, 4, samples=1000)

    def test_four_levels_cover_every_sample(self):
        self.assertFalse(self.tree.truncated)
        self.assertEqual(self.tree.built_depth, 4)
        self.assertEqual(self.tree.summary()['coverage'], [1.0] * 5)

    def test_node_curves_stay_near_the_unit_square(self):
        for node in self.tree.levels[-1]:
            self.assertTrue(np.all(np.abs(node.curve.evaluate(0.0)) < 2.0))
            self.assertTrue(np.all(np.isfinite(node.curve.coefficients)))


@tag('slow')
class StandardTreeTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.tree = build_tree(StandardMap(1.5), 4, tilted_seed(), EPSILON, 3, samples=1000)

    def test_three_levels_cover_every_sample(self):
        self.assertFalse(self.tree.truncated)
        self.assertEqual(self.tree.built_depth, 3)
        self.assertEqual(self.tree.summary()['coverage'], [1.0] * 4)

    def test_leaf_counts_against_the_valence_bound(self):
        bounds = self.tree.leaf_bound()
        self.assertTrue(bounds)
        for count, bound in bounds.values():
            self.assertLessEqual(count, bound)


class NodeBudgetTests(SimpleTestCase):
    def test_small_budget_truncates_the_tree(self):
        tree = build_tree(CatMap(), 1, tilted_seed(), EPSILON, 4, samples=200, node_budget=30)
        self.assertTrue(tree.truncated)
        self.assertTrue(tree.summary()['truncated'])
        self.assertLess(tree.built_depth, 4)
        self.assertLessEqual(len(tree.nodes), 30)
        self.assertEqual(tree.summary()['coverage'], [1.0] * (tree.built_depth + 1))

    def test_truncation_does_not_depend_on_threads(self):
        one = build_tree(CatMap(), 1, tilted_seed(), EPSILON, 4, samples=200, node_budget=30, threads=1)
        two = build_tree(CatMap(), 1, tilted_seed(), EPSILON, 4, samples=200, node_budget=30, threads=2)
        self.assertEqual(one.rows(), two.rows())

    def test_budget_is_shared_and_exhaustible(self):
        budget = NodeBudget(2)
        budget.take()
        budget.take()
        self.assertTrue(budget.exhausted)
