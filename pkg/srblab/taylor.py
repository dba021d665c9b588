"""
Truncated Taylor series in one variable, batched over numpy arrays.

A ``Jet`` holds coefficients c_0..c_order of t ↦ Σ c_k t^k for a whole batch
of series at once (shape ``(order + 1, *batch)``). Arithmetic, ``sin`` and
``cos`` are exact up to the truncation order, so the closed-form formulas of
the built-in maps push curve jets without numerical differentiation.
"""

import math
from typing import Union

import numpy as np

Number = Union[float, int, np.ndarray]


class Jet:
    __slots__ = ('coefficients',)
    __array_ufunc__ = None

    def __init__(self, coefficients):
        self.coefficients = np.asarray(coefficients, dtype=float)

    @classmethod
    def variable(cls, value: Number, order: int, scale: Number = 1.0) -> 'Jet':
        """Jet of t ↦ value + scale·t."""
        value = np.asarray(value, dtype=float)
        coefficients = np.zeros((order + 1,) + value.shape)
        coefficients[0] = value
        if order >= 1:
            coefficients[1] = scale
        return cls(coefficients)

    @classmethod
    def constant(cls, value: Number, order: int) -> 'Jet':
        value = np.asarray(value, dtype=float)
        coefficients = np.zeros((order + 1,) + value.shape)
        coefficients[0] = value
        return cls(coefficients)

    @property
    def order(self) -> int:
        return self.coefficients.shape[0] - 1

    @property
    def value(self) -> np.ndarray:
        return self.coefficients[0]

    def derivative(self, k: int) -> np.ndarray:
        """k-th derivative at t = 0."""
        return self.coefficients[k] * math.factorial(k)

    def __add__(self, other):
        if isinstance(other, Jet):
            return Jet(self.coefficients + other.coefficients)
        coefficients = self.coefficients.copy()
        coefficients[0] = coefficients[0] + other
        return Jet(coefficients)

    __radd__ = __add__

    def __neg__(self):
        return Jet(-self.coefficients)

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if not isinstance(other, Jet):
            return Jet(self.coefficients * other)
        a, b = self.coefficients, other.coefficients
        product = np.zeros(np.broadcast_shapes(a.shape, b.shape))
        for k in range(self.order + 1):
            for i in range(k + 1):
                product[k] += a[i] * b[k - i]
        return Jet(product)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Jet):
            raise TypeError("Division by a jet is not supported")
        return Jet(self.coefficients / other)

    def sin_cos(self):
        """(sin, cos) of the series by the coupled recurrence k·s_k = Σ j·a_j·c_{k−j}."""
        a = self.coefficients
        s = np.zeros_like(a)
        c = np.zeros_like(a)
        s[0] = np.sin(a[0])
        c[0] = np.cos(a[0])
        for k in range(1, self.order + 1):
            for j in range(1, k + 1):
                s[k] += j * a[j] * c[k - j]
                c[k] -= j * a[j] * s[k - j]
            s[k] /= k
            c[k] /= k
        return Jet(s), Jet(c)

    def evaluate(self, t: Number) -> np.ndarray:
        """Horner evaluation of the truncated series."""
        result = np.zeros(np.broadcast_shapes(self.value.shape, np.shape(t)))
        for coefficient in self.coefficients[::-1]:
            result = result * t + coefficient
        return result


def sin(x):
    if isinstance(x, Jet):
        return x.sin_cos()[0]
    return np.sin(x)


def cos(x):
    if isinstance(x, Jet):
        return x.sin_cos()[1]
    return np.cos(x)
