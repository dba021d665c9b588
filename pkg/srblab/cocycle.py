"""
Empirical measures along Følner sets and cocycle sums.

Measures are finite families of weighted atoms; a state is a row of a numpy
array (x, y) on the surface, (x, y, angle) on the projective bundle, or a
single integer label for finite systems. Steps and observables are batch
functions of such arrays.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .density import (
    IntegerSet, boundary, closure_M, components, density_upto, irreducible_decomposition, minus_set,
)
from .exceptions import DomainError, InvariantViolation, PreconditionError

logger = logging.getLogger(__name__)

Step = Callable[[np.ndarray], np.ndarray]
Observable = Callable[[np.ndarray], np.ndarray]

MASS_TOLERANCE = 1e-12


class WeightedPointMeasure:
    """
    Probability measure with finitely many atoms.

    ``mass`` keeps the total weight before normalization, so a measure built
    from σ-length elements still knows λ(A).
    """

    __slots__ = ('states', 'weights', 'mass')

    def __init__(self, states, weights=None):
        states = np.asarray(states, dtype=float)
        if states.ndim == 1:
            states = states[:, None]
        if weights is None:
            weights = np.ones(states.shape[0])
        weights = np.asarray(weights, dtype=float)
        if weights.shape != (states.shape[0],):
            raise DomainError(f"{weights.shape[0]} weights for {states.shape[0]} atoms")
        if states.shape[0] == 0:
            raise DomainError("A measure needs at least one atom")
        if np.any(weights < 0) or not np.all(np.isfinite(weights)):
            raise DomainError("Atom weights must be finite and nonnegative")
        mass = float(weights.sum())
        if mass <= 0.0:
            raise DomainError("Atom weights must not all vanish")
        self.states = states
        self.weights = weights / mass
        self.mass = mass
        if abs(self.total - 1.0) > MASS_TOLERANCE:
            raise InvariantViolation(f"Normalized mass is {self.total!r}")

    @classmethod
    def dirac(cls, state) -> 'WeightedPointMeasure':
        return cls(np.atleast_2d(np.asarray(state, dtype=float)))

    @classmethod
    def uniform(cls, states) -> 'WeightedPointMeasure':
        return cls(states)

    def __len__(self) -> int:
        return self.states.shape[0]

    def __repr__(self):
        return f"WeightedPointMeasure(atoms={len(self)}, dim={self.dim})"

    @property
    def total(self) -> float:
        return float(self.weights.sum())

    @property
    def dim(self) -> int:
        return self.states.shape[1]

    @property
    def is_projective(self) -> bool:
        return self.dim == 3

    def integrate(self, phi: Observable) -> float:
        return float(self.weights @ np.asarray(phi(self.states), dtype=float))

    def projected(self) -> 'WeightedPointMeasure':
        """Push-forward to the surface (drops the direction)."""
        return self.with_states(self.states[:, :2])

    def with_states(self, states: np.ndarray) -> 'WeightedPointMeasure':
        measure = WeightedPointMeasure(states, self.weights)
        measure.mass = self.mass
        return measure

    def mixture(self, other: 'WeightedPointMeasure', t: float) -> 'WeightedPointMeasure':
        """t·self + (1 − t)·other."""
        if other.dim != self.dim:
            raise DomainError("Cannot mix measures on different state spaces")
        return WeightedPointMeasure(np.concatenate([self.states, other.states]),
                                    np.concatenate([t * self.weights, (1.0 - t) * other.weights]))

    def moments(self) -> Tuple[np.ndarray, np.ndarray]:
        """Per-coordinate first and second moments."""
        first = self.weights @ self.states
        second = self.weights @ self.states ** 2
        return first, second


def orbit(states: np.ndarray, step: Step, length: int) -> np.ndarray:
    """Array of shape (length + 1, N, d) holding T^k(states) for k = 0..length."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    path = np.empty((length + 1,) + states.shape)
    path[0] = states
    for k in range(length):
        path[k + 1] = step(path[k])
    return path


def empirical_measure(mu: WeightedPointMeasure, F: IntegerSet, step: Step) -> WeightedPointMeasure:
    """
    μ^F = (1/♯F) Σ_{k∈F} T^k_*μ.

    Raises:
        DomainError: F is empty
    """
    if len(F) == 0:
        raise DomainError("Empirical measure along an empty set")
    times = F.elements
    path = orbit(mu.states, step, int(times[-1]))
    states = path[times].reshape(-1, mu.dim)
    weights = np.tile(mu.weights / len(F), len(F))
    return WeightedPointMeasure(states, weights)


def invariance_defect(mu: WeightedPointMeasure, F: IntegerSet, phi: Observable, step: Step,
                      sup: Optional[float] = None) -> float:
    """
    |∫φ dμ^F − ∫φ∘T dμ^F|, asserted ≤ sup|φ|·♯∂F/♯F with two boundary
    points per connected component of F.

    Args:
        sup: Known sup|φ|; defaults to the largest |φ| met along the orbits
    """
    if len(F) == 0:
        raise DomainError("Invariance defect along an empty set")
    times = F.elements
    path = orbit(mu.states, step, int(times[-1]) + 1)
    values = np.stack([np.asarray(phi(layer), dtype=float) for layer in path])
    difference = values[times] - values[times + 1]
    defect = abs(float((difference.sum(axis=0) @ mu.weights) / len(F)))
    if sup is None:
        sup = float(np.abs(values).max())
    edges = 2 * len(components(F))
    bound = sup * edges / len(F)
    if defect > bound + 1e-12:
        raise InvariantViolation(f"Invariance defect {defect:.3e} exceeds sup|φ|·♯∂F/♯F = {bound:.3e}")
    return defect


@dataclass(frozen=True)
class SubadditiveProcess:
    """
    Φ = (φ_n) with φ_0 = 0 and φ_{n+m} ≤ φ_n + φ_m∘T^n.

    ``evaluator(states, n)`` returns φ_n on a batch of states.
    """

    evaluator: Callable[[np.ndarray, int], np.ndarray]
    step: Step
    is_additive: bool = False
    generator: Optional[Observable] = None
    sup_one: Optional[float] = None

    def __call__(self, states, n: int) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=float))
        if n == 0:
            return np.zeros(states.shape[0])
        return np.asarray(self.evaluator(states, n), dtype=float)

    def subadditivity_gap(self, states, n: int, m: int) -> np.ndarray:
        """φ_n(x) + φ_m(T^n x) − φ_{n+m}(x); nonnegative up to rounding."""
        states = np.atleast_2d(np.asarray(states, dtype=float))
        moved = orbit(states, self.step, n)[-1]
        return self(states, n) + self(moved, m) - self(states, n + m)


def additive_process(phi: Observable, step: Step, sup_one: Optional[float] = None) -> SubadditiveProcess:
    """φ_n = Σ_{k<n} φ∘T^k."""
    def evaluate(states, n):
        total = np.zeros(states.shape[0])
        for _ in range(n):
            total += phi(states)
            states = step(states)
        return total

    return SubadditiveProcess(evaluate, step, is_additive=True, generator=phi, sup_one=sup_one)


def norm_process(step: Step, differential: Callable[[np.ndarray], np.ndarray]) -> SubadditiveProcess:
    """φ_n(x) = log‖d_xT^n‖ from batch differentials, with periodic rescaling."""
    def evaluate(states, n):
        product = np.broadcast_to(np.eye(2), (states.shape[0], 2, 2)).copy()
        log_scale = np.zeros(states.shape[0])
        for k in range(n):
            product = np.einsum('nij,njk->nik', differential(states), product)
            states = step(states)
            if (k + 1) % 32 == 0:
                scale = np.linalg.norm(product, ord=2, axis=(1, 2))
                product /= scale[:, None, None]
                log_scale += np.log(scale)
        return log_scale + np.log(np.linalg.norm(product, ord=2, axis=(1, 2)))

    return SubadditiveProcess(evaluate, step)


def derivative_process(surface_map) -> SubadditiveProcess:
    """The derivative cocycle φ(x, v) = log‖d_xf v‖ on (x, y, angle) rows."""
    from .dynamics import derivative_generator, projective_step

    return additive_process(derivative_generator(surface_map), projective_step(surface_map))


def positive_part(process: SubadditiveProcess) -> SubadditiveProcess:
    """Φ⁺ = (max(φ_n, 0))_n, again subadditive."""
    return SubadditiveProcess(lambda states, n: np.maximum(process(states, n), 0.0), process.step,
                              sup_one=process.sup_one)


def _state_orbit(x, step: Step, length: int) -> np.ndarray:
    return orbit(np.atleast_2d(np.asarray(x, dtype=float)), step, length)[:, 0, :]


def _sum_over_intervals(path: np.ndarray, intervals: Sequence[Tuple[int, int]], process: SubadditiveProcess) -> float:
    by_length: Dict[int, List[int]] = {}
    for start, stop in intervals:
        by_length.setdefault(stop - start, []).append(start)
    total = 0.0
    for length, starts in sorted(by_length.items()):
        total += float(process(path[starts], length).sum())
    return total


def cocycle_over_irreducibles(x, F: IntegerSet, E: IntegerSet, process: SubadditiveProcess) -> float:
    """
    φ_E^F(x) = Σ φ_{b−a}(T^a x) over the E-irreducible intervals ⟦a, b⟦ of F⁻.

    For additive processes this is Σ_{k∈F⁻} φ(T^k x), whatever E is.
    """
    intervals = irreducible_decomposition(F, E)
    if not intervals:
        return 0.0
    path = _state_orbit(x, process.step, max(stop for _, stop in intervals))
    return _sum_over_intervals(path, intervals, process)


def additive_sum(x, F: IntegerSet, phi: Observable, step: Step) -> float:
    """φ^F(x) = Σ_{k∈F⁻} φ(T^k x), evaluated term by term."""
    times = minus_set(F).elements
    if times.size == 0:
        return 0.0
    path = _state_orbit(x, step, int(times[-1]))
    return float(np.asarray(phi(path[times]), dtype=float).sum())


@dataclass(frozen=True)
class LargenessCheck:
    ok: bool
    margin: float
    worst_pair: Optional[Tuple[int, int]] = None

    def __bool__(self):
        return self.ok


def largeness_check(x, E: IntegerSet, process: SubadditiveProcess, a: float, tolerance: float = 1e-9) -> LargenessCheck:
    """
    φ_{l−k}(T^k x) ≥ (l−k)·a for all consecutive k < l in E.

    Returns:
        LargenessCheck with the smallest φ_{l−k}(T^k x) − (l−k)·a and its pair
    """
    elements = E.elements
    if elements.size < 2:
        raise PreconditionError("Largeness needs at least two elements")
    path = _state_orbit(x, process.step, int(elements[-1]))
    starts, stops = elements[:-1], elements[1:]
    margins = np.empty(starts.size)
    for length in np.unique(stops - starts):
        chosen = np.flatnonzero(stops - starts == length)
        margins[chosen] = process(path[starts[chosen]], int(length)) - length * a
    worst = int(np.argmin(margins))
    margin = float(margins[worst])
    return LargenessCheck(margin >= -tolerance, margin, (int(starts[worst]), int(stops[worst])))


def large_fraction(x, F: IntegerSet, process: SubadditiveProcess, N: int, threshold: float) -> float:
    """δ_x^F(φ_N/N ≥ threshold): share of k ∈ F with φ_N(T^k x) ≥ N·threshold."""
    if len(F) == 0:
        raise DomainError("Fraction along an empty set")
    times = F.elements
    path = _state_orbit(x, process.step, int(times[-1]))
    values = process(path[times], N) / N
    return float(np.mean(values >= threshold))


@dataclass(frozen=True)
class InequalityCheck:
    lhs: float
    rhs: float
    verdict: bool

    @property
    def slack(self) -> float:
        return self.lhs - self.rhs


def cocycle_inequality_check(x, F: IntegerSet, E: IntegerSet, process: SubadditiveProcess, N: int, M: int,
                        phi1_sup: float) -> InequalityCheck:
    """
    φ_E^F(x)/♯F ≥ ∫ φ_N⁺/N dδ_x^F − (d_n(F∖E_M) + N·d_n(∂F) + 4M/N)/d_n(F) · sup|φ_1|.

    The horizon of F plays the role of n; E must be 0-large.
    """
    n = F.horizon
    if not n >= N >= M >= 1:
        raise DomainError(f"Need n ≥ N ≥ M ≥ 1, got n={n}, N={N}, M={M}")
    if len(E) >= 2 and not largeness_check(x, E, process, 0.0):
        raise PreconditionError("E is not 0-large for this process")
    lhs = cocycle_over_irreducibles(x, F, E, process) / len(F)
    times = F.elements
    path = _state_orbit(x, process.step, int(times[-1]))
    average = float(np.mean(np.maximum(process(path[times], N), 0.0) / N))
    defect = density_upto(F.difference(closure_M(E, M)), n)
    correction = (defect + N * density_upto(boundary(F), n) + 4.0 * M / N) / density_upto(F, n) * phi1_sup
    rhs = average - correction
    return InequalityCheck(lhs, rhs, lhs >= rhs - 1e-9)


# partitions

class Partition:
    """Finite partition of the state space; ``assign_many`` labels a batch of states."""

    size: int = 1
    diameter: float = math.inf

    def assign_many(self, states: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __or__(self, other: 'Partition') -> 'JoinPartition':
        return JoinPartition(self, other)


def _relabel(columns: np.ndarray) -> np.ndarray:
    """Dense labels for the distinct rows of ``columns``."""
    _, labels = np.unique(columns, axis=0, return_inverse=True)
    return labels.reshape(-1)


class BoxPartition(Partition):
    """
    Axis-aligned grid over a box, acting on the first two coordinates.

    The grid origin is shifted by ``offset`` cells; on the torus cells wrap,
    on a planar box the outer cells absorb the shift.
    """

    def __init__(self, box, resolution, torus: bool = False, offset=(0.0, 0.0)):
        self.box = tuple(float(v) for v in box)
        if np.isscalar(resolution):
            resolution = (resolution, resolution)
        self.resolution = (int(resolution[0]), int(resolution[1]))
        if min(self.resolution) < 1:
            raise DomainError(f"Partition resolution must be positive, got {self.resolution}")
        self.torus = torus
        self.offset = (float(offset[0]), float(offset[1]))
        self.widths = ((self.box[1] - self.box[0]) / self.resolution[0], (self.box[3] - self.box[2]) / self.resolution[1])
        self.size = self.resolution[0] * self.resolution[1]
        if torus:
            self.diameter = math.hypot(*self.widths)
        else:
            self.diameter = math.hypot((1.0 + self.offset[0]) * self.widths[0], (1.0 + self.offset[1]) * self.widths[1])

    @classmethod
    def for_diameter(cls, box, epsilon: float, torus: bool = False,
                     rng: Optional[np.random.Generator] = None) -> 'BoxPartition':
        """Finest-needed grid whose cells have diameter below ε, origin jittered by ``rng``."""
        factor = 1.0 if torus else 2.0
        resolution = tuple(int(math.floor(factor * math.sqrt(2.0) * (box[2 * i + 1] - box[2 * i]) / epsilon)) + 1
                           for i in range(2))
        offset = tuple(rng.random(2)) if rng is not None else (0.0, 0.0)
        return cls(box, resolution, torus, offset)

    def __repr__(self):
        return f"BoxPartition({self.resolution[0]}×{self.resolution[1]}, diameter={self.diameter:.3g})"

    def cell_indices(self, states: np.ndarray) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=float))
        indices = []
        for axis in range(2):
            scaled = (states[:, axis] - self.box[2 * axis]) / self.widths[axis] - self.offset[axis]
            cells = np.floor(scaled).astype(np.int64)
            if self.torus:
                cells = np.mod(cells, self.resolution[axis])
            else:
                cells = np.clip(cells, 0, self.resolution[axis] - 1)
            indices.append(cells)
        return np.stack(indices, axis=-1)

    def assign_many(self, states: np.ndarray) -> np.ndarray:
        cells = self.cell_indices(states)
        return cells[:, 0] * self.resolution[1] + cells[:, 1]


class PointPartition(Partition):
    """Partition of a finite system into its points, states being integer labels."""

    def __init__(self, size: int):
        self.size = int(size)
        self.diameter = 0.0

    def assign_many(self, states: np.ndarray) -> np.ndarray:
        return np.asarray(states, dtype=float).reshape(len(states), -1)[:, 0].astype(np.int64)


class LabelPartition(Partition):
    """Partition by an integer label carried in one coordinate of the states."""

    def __init__(self, size: int, column: int = -1):
        self.size = int(size)
        self.column = int(column)

    def assign_many(self, states: np.ndarray) -> np.ndarray:
        return np.asarray(states, dtype=float)[:, self.column].astype(np.int64)


class JoinPartition(Partition):
    """P ∨ Q."""

    def __init__(self, first: Partition, second: Partition):
        self.first = first
        self.second = second
        self.size = first.size * second.size
        self.diameter = min(first.diameter, second.diameter)

    def assign_many(self, states: np.ndarray) -> np.ndarray:
        return _relabel(np.stack([self.first.assign_many(states), self.second.assign_many(states)], axis=-1))


class IteratedPartition(Partition):
    """P^F = ⋁_{k∈F} T^{−k}P."""

    def __init__(self, base: Partition, times: Iterable[int], step: Step):
        self.base = base
        self.times = sorted(set(int(k) for k in times))
        if not self.times or self.times[0] < 0:
            raise DomainError("Iterated partition needs nonnegative times")
        self.step = step
        self.size = base.size ** len(self.times)
        self.diameter = base.diameter

    def assign_many(self, states: np.ndarray) -> np.ndarray:
        path = orbit(states, self.step, self.times[-1])
        return _relabel(np.stack([self.base.assign_many(path[k]) for k in self.times], axis=-1))


def static_entropy(mu: WeightedPointMeasure, partition: Partition) -> float:
    """H_μ(P) = −Σ μ(A) log μ(A), with 0·log 0 = 0."""
    labels = partition.assign_many(mu.states)
    _, inverse = np.unique(labels, return_inverse=True)
    masses = np.bincount(inverse.reshape(-1), weights=mu.weights)
    masses = masses[masses > 0]
    return float(max(0.0, -(masses * np.log(masses)).sum()))


def conditional_entropy_rate(mu: WeightedPointMeasure, partition: Partition, m: int, step: Step) -> float:
    """H_μ(P^m) − H_μ(P^{m−1}), the plug-in entropy rate at depth m."""
    if m < 1:
        raise DomainError(f"Depth must be positive, got {m}")
    deeper = static_entropy(mu, IteratedPartition(partition, range(m), step))
    if m == 1:
        return deeper
    return deeper - static_entropy(mu, IteratedPartition(partition, range(m - 1), step))


def entropy_slope(mu: WeightedPointMeasure, partition: Partition, low: int, high: int, step: Step,
                  given: Optional[Partition] = None) -> float:
    """(H_μ(Q ∨ P^high) − H_μ(Q ∨ P^low)) / (high − low), Q being ``given`` or the trivial partition."""
    if not 0 < low < high:
        raise DomainError(f"Need 0 < low < high, got {low} and {high}")

    def refined(m):
        iterated = IteratedPartition(partition, range(m), step)
        return iterated if given is None else JoinPartition(given, iterated)

    return (static_entropy(mu, refined(high)) - static_entropy(mu, refined(low))) / (high - low)


def misiurewicz_check(mu: WeightedPointMeasure, F: IntegerSet, partition: Partition, m: int,
                      step: Step) -> InequalityCheck:
    """
    (1/m)·H_{μ^F}(P^m) ≥ (1/♯F)·H_μ(P^F) − 3m·log♯P·♯∂F/♯F.

    Raises:
        InvariantViolation: the inequality fails
    """
    if len(F) == 0:
        raise DomainError("Entropy comparison along an empty set")
    lhs = static_entropy(empirical_measure(mu, F, step), IteratedPartition(partition, range(m), step)) / m
    total = static_entropy(mu, IteratedPartition(partition, F.elements.tolist(), step)) / len(F)
    rhs = total - 3.0 * m * math.log(max(partition.size, 1)) * len(boundary(F)) / len(F)
    check = InequalityCheck(lhs, rhs, lhs >= rhs - 1e-12)
    if not check.verdict:
        raise InvariantViolation(f"Entropy of the empirical measure {lhs:.6f} below the bound {rhs:.6f}")
    return check


@dataclass
class GibbsReport:
    """Per-sample log λ(P^F(x̂) ∩ A) + ψ^F(x̂) − δ·♯F; positive entries violate the Gibbs bound."""

    slacks: np.ndarray = field(default_factory=lambda: np.zeros(0))
    n: int = 0

    @property
    def violation_fraction(self) -> float:
        return float(np.mean(self.slacks > 0.0)) if self.slacks.size else 0.0

    @property
    def worst(self) -> float:
        return float(self.slacks.max()) if self.slacks.size else -math.inf


def gibbs_diagnostic(plan, sigma_measure: Optional[WeightedPointMeasure], partition: Partition, psi: Observable,
                     delta: float, step: Step, n: Optional[int] = None, scale: Optional[float] = None,
                     cell_measure: Optional[Callable[[np.ndarray], np.ndarray]] = None) -> GibbsReport:
    """
    Gibbs slack of every sample of A_n along F_n.

    Args:
        plan: FolnerPlan holding F_n
        sigma_measure: Samples of A_n, weighted by σ-length (``mass`` = λ(A_n))
        partition: Partition P
        psi: Potential ψ on the sample states
        delta: Allowed slack per time step
        step: Dynamics on the sample states
        n: Horizon; defaults to the last horizon of the plan
        scale: Largest admissible partition diameter
        cell_measure: Exact λ(P^F(x̂) ∩ A_n) per sample; defaults to the
            σ-length of the samples sharing the cell

    Raises:
        PreconditionError: the partition is coarser than ``scale``
    """
    if scale is not None and partition.diameter > scale:
        raise PreconditionError(f"Partition diameter {partition.diameter:.4g} exceeds the scale {scale:.4g}")
    if plan.is_empty or sigma_measure is None or len(sigma_measure) == 0:
        return GibbsReport()
    n = plan.subsequence[-1] if n is None else n
    F = plan.sets[n]
    if cell_measure is None:
        labels = IteratedPartition(partition, F.elements.tolist(), step).assign_many(sigma_measure.states)
        cell_mass = np.bincount(labels, weights=sigma_measure.weights)
        lengths = sigma_measure.mass * cell_mass[labels]
    else:
        lengths = np.asarray(cell_measure(sigma_measure.states), dtype=float)
    times = minus_set(F).elements
    potential = np.zeros(len(sigma_measure))
    if times.size:
        path = orbit(sigma_measure.states, step, int(times[-1]))
        for k in times:
            potential += np.asarray(psi(path[k]), dtype=float)
    slacks = np.log(lengths) + potential - delta * len(F)
    report = GibbsReport(slacks, n)
    logger.info(f"Gibbs diagnostic at n={n}: {report.violation_fraction:.3f} of {len(slacks)} samples violate")
    return report
