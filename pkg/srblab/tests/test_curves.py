import math
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from srblab.curves import (AffineMap, CurveJet, distortion, geometric_time_certificate, is_bounded,
                           is_strongly_bounded, oscillation, push, rescale, subdivide_tech, tech_overlap,
                           wrap_curve)
from srblab.dynamics import CAT_EXPONENT, CatMap, HenonMap, IdentityMap, IteratedMap, StandardMap
from srblab.exceptions import DomainError, EscapeError, PreconditionError

ALPHA = 4.0 / 81.0
UNSTABLE = np.array([1.0, (math.sqrt(5.0) - 1.0) / 2.0]) / math.sqrt(1.0 + ((math.sqrt(5.0) - 1.0) / 2.0) ** 2)


class CurveJetTests(SimpleTestCase):
    def test_segment_evaluates_linearly(self):
        gamma = CurveJet.segment((0.3, 0.4), (0.02, 0.01))
        np.testing.assert_allclose(gamma.evaluate(np.array([-1.0, 0.0, 0.5])),
                                   [[0.28, 0.39], [0.3, 0.4], [0.31, 0.405]])
        self.assertAlmostEqual(gamma.length(), 2.0 * math.hypot(0.02, 0.01))

    def test_pieces_of_one_polynomial_agree(self):
        flat = [0.1, 0.2, 0.3, 0.0, 0.0, 0.05]
        whole = CurveJet.from_pieces([(-1.0, 1.0, flat)])
        split = CurveJet.from_pieces([(-1.0, 0.0, flat), (0.0, 1.0, flat)])
        t = np.linspace(-1.0, 1.0, 11)
        np.testing.assert_allclose(split.evaluate(t), whole.evaluate(t), atol=1e-12)
        np.testing.assert_allclose(split.derivative(t, 1), whole.derivative(t, 1), atol=1e-12)

    def test_discontinuous_pieces_are_refused(self):
        with self.assertRaises(DomainError):
            CurveJet.from_pieces([(-1.0, 0.0, [0.0, 0.0, 1.0, 0.0]), (0.0, 1.0, [0.5, 0.0, 1.0, 0.0])])

    def test_pieces_must_cover_the_parameter_interval(self):
        with self.assertRaises(DomainError):
            CurveJet.from_pieces([(-1.0, 0.5, [0.0, 0.0, 1.0, 0.0])])

    def test_piece_file(self):
        with tempfile.TemporaryDirectory() as directory:
            path = Path(directory) / 'curve.txt'
            path.write_text("# low high coefficients\n-1 1 0.2 0.2 0.01 0.0\n")
            gamma = CurveJet.from_piece_file(path)
        self.assertEqual(len(gamma), 1)
        np.testing.assert_allclose(gamma.evaluate(1.0), [0.21, 0.2])

    def test_compose_with_reparametrization(self):
        gamma = CurveJet.from_polynomial([[0.0, 0.0], [1.0, 0.0], [0.0, 0.05]])
        part = gamma.compose(AffineMap(0.5, 0.25))
        t = np.linspace(-1.0, 1.0, 9)
        np.testing.assert_allclose(part.evaluate(t), gamma.evaluate(0.5 + 0.25 * t), atol=1e-12)

    def test_compose_refuses_maps_leaving_the_interval(self):
        gamma = CurveJet.segment((0.0, 0.0), (1.0, 0.0))
        with self.assertRaises(DomainError):
            gamma.compose(AffineMap(0.5, 0.75))


class BoundednessTests(SimpleTestCase):
    def test_gentle_parabola_is_bounded(self):
        gamma = CurveJet.from_polynomial([[0.0, 0.0], [1.0, 0.0], [0.0, 0.05]])
        self.assertTrue(is_bounded(gamma))
        self.assertLessEqual(distortion(gamma), 1.5)
        self.assertLessEqual(oscillation(gamma), math.pi / 6)

    def test_sharp_parabola_is_not_bounded(self):
        gamma = CurveJet.from_polynomial([[0.0, 0.0], [1.0, 0.0], [0.0, 0.5]])
        self.assertFalse(is_bounded(gamma))
        with self.assertRaises(PreconditionError):
            distortion(gamma)

    def test_strong_boundedness_needs_small_speed(self):
        gamma = CurveJet.segment((0.3, 0.4), (0.02, 0.01))
        self.assertTrue(is_strongly_bounded(gamma, 0.03))
        check = is_strongly_bounded(gamma, 0.02)
        self.assertFalse(check)
        self.assertEqual(check.detail, 'speed exceeds epsilon')

    def test_rescaling_keeps_strong_boundedness(self):
        gamma = CurveJet.from_polynomial([[0.0, 0.0], [1.0, 0.0], [0.0, 0.05]])
        self.assertTrue(is_strongly_bounded(gamma, 1.2))
        self.assertTrue(is_strongly_bounded(rescale(gamma, 0.5, 1.2), 0.6))

    def test_rescaling_factor_range(self):
        gamma = CurveJet.segment((0.0, 0.0), (1.0, 0.0))
        for a in (0.0, 1.5):
            with self.subTest(a=a), self.assertRaises(DomainError):
                rescale(gamma, a)


class SubdivisionTests(SimpleTestCase):
    def setUp(self):
        self.gamma = CurveJet.segment((0.0, 0.0), (0.3, 0.0))
        self.epsilon = 0.05
        self.pieces = subdivide_tech(self.gamma, self.epsilon)

    def test_pieces_cover_the_curve(self):
        t = np.linspace(-1.0, 1.0, 2001)
        covered = np.zeros(t.size, dtype=bool)
        for piece in self.pieces:
            low, high = piece.covered
            covered |= (t >= low - 1e-12) & (t <= high + 1e-12)
        self.assertTrue(covered.all())

    def test_pieces_are_strongly_bounded(self):
        colours = [piece.colour for piece in self.pieces]
        self.assertEqual(colours[:2], ['blue', 'blue'])
        reds = colours.count('red')
        self.assertLessEqual(reds, 6.0 * (0.3 / self.epsilon + 1.0))
        for piece in self.pieces:
            self.assertTrue(is_strongly_bounded(self.gamma.compose(piece.theta), self.epsilon))

    def test_overlap_is_small(self):
        self.assertLessEqual(tech_overlap(self.gamma, self.pieces, self.epsilon), 100)

    def test_slow_curve_is_refused(self):
        with self.assertRaises(PreconditionError):
            subdivide_tech(CurveJet.segment((0.0, 0.0), (0.01, 0.0)), self.epsilon)


class PushTests(SimpleTestCase):
    def test_linear_map_pushes_exactly(self):
        gamma = CurveJet.segment((0.1, 0.2), (0.01, 0.0))
        pushed = push(CatMap(), gamma)
        t = np.linspace(-1.0, 1.0, 17)
        expected = gamma.evaluate(t) @ np.array([[2.0, 1.0], [1.0, 1.0]]).T
        np.testing.assert_allclose(pushed.evaluate(t), expected, atol=1e-12)
        self.assertLessEqual(pushed.truncation, 1e-11)

    def test_nonlinear_push_within_reported_truncation(self):
        gamma = CurveJet.segment((0.3, 0.4), (0.02, 0.01))
        surface_map = StandardMap(1.5)
        pushed = push(surface_map, gamma)
        t = np.linspace(-1.0, 1.0, 33)
        points = gamma.evaluate(t)
        exact = np.stack(surface_map.formula(points[:, 0], points[:, 1]), axis=-1)
        error = np.linalg.norm(pushed.evaluate(t) - exact, axis=-1).max()
        self.assertLessEqual(error, pushed.truncation + 1e-12)

    def test_curve_in_a_far_translate_is_wrapped(self):
        gamma = CurveJet.segment((2200.3, -1500.6), (4.8e-7, 1e-7))
        pushed = push(IteratedMap(CatMap(), 3), gamma)
        self.assertEqual(len(pushed), 1)
        np.testing.assert_allclose(pushed.evaluate(0.0), [0.1, 0.4], atol=1e-9)
        np.testing.assert_allclose(pushed.derivative(0.0, 1), [13 * 4.8e-7 + 8e-7, 8 * 4.8e-7 + 5e-7], rtol=1e-9)

    def test_long_orbit_keeps_one_piece(self):
        gamma = CurveJet.segment((0.3, 0.4), 1e-12 * UNSTABLE)
        cube = IteratedMap(CatMap(), 3)
        for _ in range(8):
            gamma = push(cube, gamma)
            self.assertEqual(len(gamma), 1)
            self.assertTrue(np.all((gamma.evaluate(0.0) >= 0.0) & (gamma.evaluate(0.0) < 1.0)))
        self.assertAlmostEqual(gamma.speed_max() / (1e-12 * math.exp(24 * CAT_EXPONENT)), 1.0, places=6)

    def test_planar_curves_are_not_wrapped(self):
        gamma = CurveJet.segment((1.2, 0.1), (0.01, 0.0))
        self.assertIs(wrap_curve(HenonMap(), gamma), gamma)
        np.testing.assert_allclose(wrap_curve(CatMap(), gamma).evaluate(0.0), [0.2, 0.1])

    def test_long_torus_curve_is_refused(self):
        with self.assertRaises(PreconditionError):
            push(CatMap(), CurveJet.segment((0.5, 0.5), (0.4, 0.0)))

    def test_escaping_curve_on_planar_map(self):
        with self.assertRaises(EscapeError):
            push(HenonMap(), CurveJet.segment((2.9, 0.0), (0.2, 0.0)))


class GeometricTimeTests(SimpleTestCase):
    def test_expanding_direction_gives_a_certificate(self):
        sigma = CurveJet.segment((0.3, 0.3), 0.005 * UNSTABLE)
        certificate = geometric_time_certificate(CatMap(), sigma, 0.0, 2, ALPHA, 0.05)
        self.assertTrue(certificate.verdict)
        self.assertGreaterEqual(certificate.derivative, 1.5 * ALPHA * 0.05)
        self.assertGreaterEqual(certificate.semi_length, ALPHA * 0.05 * (1.0 - 1e-9))
        self.assertLessEqual(certificate.distortion_ratio, 9.0 / 4.0)
        self.assertEqual(len(certificate.iterates), 3)

    def test_slow_identity_curve_has_no_certificate(self):
        sigma = CurveJet.segment((0.3, 0.3), (0.001, 0.0))
        self.assertFalse(geometric_time_certificate(IdentityMap(), sigma, 0.0, 3, ALPHA, 0.05).verdict)

    def test_parameter_off_the_curve(self):
        sigma = CurveJet.segment((0.3, 0.3), (0.001, 0.0))
        with self.assertRaises(PreconditionError):
            geometric_time_certificate(IdentityMap(), sigma, 1.5, 3, ALPHA, 0.05)
