import math

import numpy as np
from django.test import SimpleTestCase

from srblab import taylor
from srblab.taylor import Jet


class JetTests(SimpleTestCase):
    def test_product_truncates(self):
        x = Jet.variable(1.0, 2)
        np.testing.assert_allclose((x * x).coefficients, [1.0, 2.0, 1.0])
        np.testing.assert_allclose((x * x * x).coefficients, [1.0, 3.0, 3.0])

    def test_sin_cos_series(self):
        a = 0.3
        x = Jet.variable(a, 4)
        s, c = taylor.sin(x), taylor.cos(x)
        np.testing.assert_allclose(s.coefficients, [math.sin(a), math.cos(a), -math.sin(a) / 2,
                                                    -math.cos(a) / 6, math.sin(a) / 24])
        np.testing.assert_allclose(c.coefficients, [math.cos(a), -math.sin(a), -math.cos(a) / 2,
                                                    math.sin(a) / 6, math.cos(a) / 24])

    def test_batched_derivatives(self):
        values = np.array([0.0, 1.0, 2.0])
        x = Jet.variable(values, 3, scale=2.0)
        y = 3.0 * x * x - x + 1.0
        np.testing.assert_allclose(y.derivative(1), 2.0 * (6.0 * values - 1.0))
        np.testing.assert_allclose(y.derivative(2), 24.0 * np.ones(3))
        np.testing.assert_allclose(y.evaluate(0.5), 3.0 * (values + 1.0) ** 2 - (values + 1.0) + 1.0)

    def test_plain_numbers_pass_through(self):
        self.assertEqual(taylor.sin(0.0), 0.0)
        self.assertEqual(taylor.cos(0.0), 1.0)

    def test_division_by_jet_is_refused(self):
        with self.assertRaises(TypeError):
            Jet.variable(1.0, 2) / Jet.variable(2.0, 2)
