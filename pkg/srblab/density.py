"""
Integer sets at a finite horizon.

Densities, M-closures, boundaries and irreducible decompositions of subsets
of the nonnegative integers, the Følner fill of a set of positive upper
density, and the Borel–Cantelli selection of a Følner plan over a family of
sampled sets.

Asymptotic quantities are read on a checkpoint ladder n_k = ⌈ρ·n_{k−1}⌉:
an "upper density" is the largest d_n over the last few checkpoints.
"""

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Dict, Iterable, Iterator, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from .conf import lab_setting
from .exceptions import DomainError, InvariantViolation, PreconditionError
from .parallel import parallel_map

logger = logging.getLogger(__name__)


class IntegerSet:
    """
    Finite sorted set of nonnegative integers with an explicit horizon.

    Elements are stored once in a read-only numpy array. The horizon N bounds
    every element; densities d_n are only defined for 1 ≤ n ≤ N. Zero is
    allowed so that sets like [0, n) can be written directly.
    """

    __slots__ = ('_elements', 'horizon')

    def __init__(self, elements: Union[Iterable[int], np.ndarray] = (), horizon: Optional[int] = None):
        if not isinstance(elements, np.ndarray):
            elements = np.fromiter((int(value) for value in elements), dtype=np.int64)
        array = np.unique(elements.astype(np.int64, copy=False))
        if array.size and array[0] < 0:
            raise DomainError(f"IntegerSet elements must be nonnegative, got {array[0]}")
        largest = int(array[-1]) if array.size else 0
        if horizon is None:
            horizon = max(largest, 1)
        horizon = int(horizon)
        if horizon < 1:
            raise DomainError(f"Horizon must be positive, got {horizon}")
        if largest > horizon:
            raise DomainError(f"Element {largest} exceeds horizon {horizon}")
        array.setflags(write=False)
        self._elements = array
        self.horizon = horizon

    @classmethod
    def interval(cls, start: int, stop: int, horizon: Optional[int] = None) -> 'IntegerSet':
        """The closed interval [start, stop]."""
        if stop < start:
            return cls((), horizon if horizon is not None else max(start, 1))
        return cls(np.arange(start, stop + 1, dtype=np.int64), horizon if horizon is not None else stop)

    @classmethod
    def from_mask(cls, mask: np.ndarray, offset: int = 0, horizon: Optional[int] = None) -> 'IntegerSet':
        """Set of ``offset + i`` for every true ``mask[i]``."""
        mask = np.asarray(mask, dtype=bool)
        if horizon is None:
            horizon = max(offset + mask.size - 1, 1)
        return cls(np.flatnonzero(mask).astype(np.int64) + offset, horizon)

    @property
    def elements(self) -> np.ndarray:
        return self._elements

    def __len__(self) -> int:
        return int(self._elements.size)

    def __iter__(self) -> Iterator[int]:
        return iter(self._elements.tolist())

    def __contains__(self, value) -> bool:
        index = np.searchsorted(self._elements, value)
        return bool(index < self._elements.size and self._elements[index] == value)

    def __eq__(self, other) -> bool:
        if not isinstance(other, IntegerSet):
            return NotImplemented
        return self.horizon == other.horizon and np.array_equal(self._elements, other._elements)

    def __hash__(self) -> int:
        return hash((self.horizon, self._elements.tobytes()))

    def __repr__(self) -> str:
        if len(self) > 8:
            shown = ', '.join(str(v) for v in self._elements[:4].tolist()) + ', …, ' + str(int(self._elements[-1]))
        else:
            shown = ', '.join(str(v) for v in self._elements.tolist())
        return f"IntegerSet({{{shown}}}, horizon={self.horizon})"

    def key(self) -> Tuple[int, ...]:
        """Lexicographic sort key."""
        return tuple(self._elements.tolist())

    def count_upto(self, n: int) -> int:
        """Number of elements in [1, n]."""
        return int(np.searchsorted(self._elements, n, side='right') - np.searchsorted(self._elements, 1, side='left'))

    def count_between(self, start: int, stop: int) -> int:
        """Number of elements in [start, stop]."""
        return int(np.searchsorted(self._elements, stop, side='right') - np.searchsorted(self._elements, start, side='left'))

    def truncate(self, n: int) -> 'IntegerSet':
        """Elements ≤ n, with horizon n."""
        cut = np.searchsorted(self._elements, n, side='right')
        return IntegerSet(self._elements[:cut], n)

    def window(self, start: int, stop: int) -> 'IntegerSet':
        """Elements in [start, stop], keeping the horizon."""
        low = np.searchsorted(self._elements, start, side='left')
        high = np.searchsorted(self._elements, stop, side='right')
        return IntegerSet(self._elements[low:high], self.horizon)

    def with_horizon(self, horizon: int) -> 'IntegerSet':
        return IntegerSet(self._elements, horizon)

    def union(self, other: 'IntegerSet') -> 'IntegerSet':
        return IntegerSet(np.union1d(self._elements, other._elements), max(self.horizon, other.horizon))

    def intersection(self, other: 'IntegerSet') -> 'IntegerSet':
        return IntegerSet(np.intersect1d(self._elements, other._elements, assume_unique=True),
                          max(self.horizon, other.horizon))

    def difference(self, other: 'IntegerSet') -> 'IntegerSet':
        return IntegerSet(np.setdiff1d(self._elements, other._elements, assume_unique=True), self.horizon)

    def issubset(self, other: 'IntegerSet') -> bool:
        return bool(np.isin(self._elements, other._elements, assume_unique=True).all())

    __or__ = union
    __and__ = intersection
    __sub__ = difference


class HalfOpenInterval(NamedTuple):
    """The integer interval ⟦start, stop⟦."""

    start: int
    stop: int

    def __len__(self) -> int:
        return self.stop - self.start


@dataclass(frozen=True)
class DensityReport:
    """Upper and lower density read over a window of checkpoints."""

    upper: float
    lower: float
    samples: Tuple[Tuple[int, float], ...]

    def __post_init__(self):
        if not 0.0 <= self.lower <= self.upper <= 1.0:
            raise InvariantViolation(f"Inconsistent density report: lower={self.lower}, upper={self.upper}")


def density_upto(E: IntegerSet, n: int, exact: bool = False) -> Union[float, Fraction]:
    """
    Density d_n(E) = ♯(E ∩ [1, n]) / n.

    Args:
        E: Integer set
        n: Horizon of the count, 1 ≤ n ≤ E.horizon
        exact: Return a Fraction instead of a float

    Returns:
        The density, computed with a single division
    """
    n = int(n)
    if n < 1 or n > E.horizon:
        raise DomainError(f"Density horizon n={n} outside [1, {E.horizon}]")
    count = E.count_upto(n)
    if exact:
        return Fraction(count, n)
    return count / n


def closure_M(E: IntegerSet, M: int) -> IntegerSet:
    """Union of the intervals [a, b] with a, b ∈ E and b − a ≤ M."""
    if M < 1:
        raise DomainError(f"Closure size must be positive, got {M}")
    elements = E.elements
    if elements.size < 2:
        return E
    gaps = np.diff(elements)
    fill = (gaps > 1) & (gaps <= M)
    if not fill.any():
        return E
    starts = elements[:-1][fill]
    lengths = gaps[fill] - 1
    offsets = np.arange(int(lengths.sum()), dtype=np.int64) - np.repeat(np.cumsum(lengths) - lengths, lengths)
    inner = np.repeat(starts, lengths) + offsets + 1
    return IntegerSet(np.union1d(elements, inner), E.horizon)


def _edges(elements: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    gaps = np.diff(elements)
    left = np.ones(elements.size, dtype=bool)
    right = np.ones(elements.size, dtype=bool)
    left[1:] = gaps > 1
    right[:-1] = gaps > 1
    return left, right


def boundary(E: IntegerSet) -> IntegerSet:
    """Elements n of E with n − 1 ∉ E or n + 1 ∉ E."""
    elements = E.elements
    if elements.size == 0:
        return E
    left, right = _edges(elements)
    return IntegerSet(elements[left | right], E.horizon)


def components(E: IntegerSet) -> List[Tuple[int, int]]:
    """Connected components of E as closed intervals (a, b)."""
    elements = E.elements
    if elements.size == 0:
        return []
    left, right = _edges(elements)
    return list(zip(elements[left].tolist(), elements[right].tolist()))


def boundary_multiplicity(E: IntegerSet) -> int:
    """Two endpoints per component, singletons counted twice."""
    return 2 * len(components(E))


def minus_set(F: IntegerSet) -> IntegerSet:
    """F⁻ = {n ∈ F : n + 1 ∈ F}."""
    elements = F.elements
    if elements.size < 2:
        return IntegerSet((), F.horizon)
    return IntegerSet(elements[:-1][np.diff(elements) == 1], F.horizon)


def irreducible_decomposition(F: IntegerSet, E: IntegerSet) -> List[HalfOpenInterval]:
    """
    Split F⁻ into E-irreducible intervals ⟦a, b⟦ with a, b ∈ E and ⟦a, b⟦ ∩ E = {a}.

    Args:
        F: Set whose boundary lies in E
        E: Reference set

    Returns:
        Disjoint intervals, ordered, whose union is F⁻

    Raises:
        PreconditionError: if a boundary point of F is missing from E
    """
    outside = np.setdiff1d(boundary(F).elements, E.elements, assume_unique=True)
    if outside.size:
        logger.error(f"Boundary point {int(outside[0])} of F is not in E")
        raise PreconditionError(f"Boundary point {int(outside[0])} of F is not in E")
    inside = np.intersect1d(E.elements, F.elements, assume_unique=True)
    if inside.size < 2:
        return []
    starts = np.array([a for a, _ in components(F)], dtype=np.int64)
    component = np.searchsorted(starts, inside, side='right') - 1
    same = component[1:] == component[:-1]
    return [HalfOpenInterval(a, b) for a, b in zip(inside[:-1][same].tolist(), inside[1:][same].tolist())]


def checkpoint_ladder(start: int, horizon: int, ratio: Optional[float] = None) -> List[int]:
    """Geometric ladder n_0 = start, n_k = ⌈ρ·n_{k−1}⌉, ending exactly at ``horizon``."""
    ratio = float(ratio if ratio is not None else lab_setting('LADDER_RATIO'))
    if ratio <= 1.0:
        raise DomainError(f"Ladder ratio must exceed 1, got {ratio}")
    start = max(1, int(start))
    if start > horizon:
        raise DomainError(f"Ladder start {start} beyond horizon {horizon}")
    ladder = [start]
    while ladder[-1] < horizon:
        ladder.append(min(horizon, max(ladder[-1] + 1, math.ceil(ladder[-1] * ratio))))
    return ladder


def density_report(E: IntegerSet, window: Optional[int] = None, ladder: Optional[Sequence[int]] = None) -> DensityReport:
    """
    Finite-horizon upper and lower densities of E.

    Args:
        E: Integer set
        window: Number of trailing checkpoints the extremes are taken over
        ladder: Checkpoints; defaults to the geometric ladder from 1 to the horizon

    Returns:
        DensityReport with every sampled (n, d_n)
    """
    window = int(window if window is not None else lab_setting('DENSITY_WINDOW'))
    if ladder is None:
        ladder = checkpoint_ladder(1, E.horizon)
    samples = tuple((int(n), density_upto(E, n)) for n in ladder)
    tail = [value for _, value in samples[-window:]]
    return DensityReport(upper=max(tail), lower=min(tail), samples=samples)


def boundary_pattern_entropy(n: int, alpha: float) -> float:
    """δ with e^{nδ} = 2·Σ_{k ≤ ⌈nα⌉} C(n, k), from the exact binomial sum."""
    if n < 1:
        raise DomainError(f"n must be positive, got {n}")
    top = min(n, math.ceil(n * alpha))
    total = 2 * sum(math.comb(n, k) for k in range(top + 1))
    return math.log(total) / n


@dataclass
class FolnerFill:
    """Result of ``folner_fill``."""

    subsequence: List[int]
    F: IntegerSet
    report: DensityReport
    closure_levels: List[int]
    boundary_densities: List[Tuple[int, float]]
    filled_defects: List[Tuple[int, float]]
    intersection_density: float
    observed_upper: float
    M0: int = 0

    @property
    def final(self) -> int:
        return self.subsequence[-1]


def _snapped_ladder(E: IntegerSet, ratio: float) -> List[int]:
    """Ladder from the first positive element of E, each rung moved down onto E."""
    elements = E.elements[E.elements >= 1]
    points: List[int] = []
    target = int(elements[0])
    while True:
        snapped = int(elements[np.searchsorted(elements, target, side='right') - 1])
        if not points or snapped > points[-1]:
            points.append(snapped)
        if target >= E.horizon:
            return points
        target = min(E.horizon, max(target + 1, math.ceil(target * ratio)))


def folner_fill(E: IntegerSet, M0: Optional[int] = None, checkpoints: Optional[int] = None,
                ratio: Optional[float] = None, tolerance: Optional[float] = None) -> FolnerFill:
    """
    Fill E into a set F with small boundary: F = ⋃_k ⟦𝔫_{k−1}, 𝔫_k⟧ ∩ E_{M_k}.

    The rungs 𝔫_k are ladder values moved onto E, and the run ends at the
    rung of largest d_n(E) among the last ``checkpoints`` rungs (latest on
    ties). Closure levels grow like √𝔫_k and are doubled on a block until the
    running boundary density stops increasing.

    Args:
        E: Set with positive density at its horizon
        M0: Smallest closure level, must exceed 2/d̄(E); ⌊2/d̄(E)⌋ + 1 when omitted
        checkpoints: Window for the observed upper density
        ratio: Ladder ratio
        tolerance: Allowed shortfall of d_n(E ∩ F) below d̄(E)

    Returns:
        FolnerFill with the rungs, F, the density report of E on the rungs
        and the per-block tables
    """
    checkpoints = int(checkpoints if checkpoints is not None else lab_setting('DENSITY_WINDOW'))
    ratio = float(ratio if ratio is not None else lab_setting('LADDER_RATIO'))
    tolerance = float(tolerance if tolerance is not None else lab_setting('DENSITY_TOLERANCE'))

    if E.count_upto(E.horizon) == 0:
        logger.error("Følner fill refused: E has no element in [1, horizon]")
        raise PreconditionError("E too sparse: observed upper density is 0")

    rungs = _snapped_ladder(E, ratio)
    report = density_report(E, checkpoints, rungs)
    observed = report.upper
    if M0 is None:
        M0 = math.floor(2.0 / observed) + 1
    if M0 <= 2.0 / observed:
        raise PreconditionError(f"M0={M0} must exceed 2/d̄(E) = {2.0 / observed:.4f}")

    tail_start = max(0, len(rungs) - checkpoints)
    tail = [value for _, value in report.samples[tail_start:]]
    best = tail_start + max(i for i, value in enumerate(tail) if value == observed)
    subsequence = rungs[:best + 1]

    F = IntegerSet((subsequence[0],), E.horizon)
    accepted = [subsequence[0]]
    closure_levels: List[int] = []
    boundary_densities: List[Tuple[int, float]] = [(subsequence[0], 1.0 / subsequence[0])]
    level = int(M0)
    for stop in subsequence[1:]:
        start = accepted[-1]
        block = E.window(start, stop)
        level = max(level, math.isqrt(stop - 1) + 1)
        previous = boundary_densities[-1][1]
        while True:
            candidate = F.union(closure_M(block, level))
            current = len(boundary(candidate)) / stop
            if current <= previous or level >= stop - start:
                break
            level *= 2
        if current > previous and stop != subsequence[-1]:
            # rung too close to its predecessor; the block merges into the next one
            logger.debug(f"Rung {stop} skipped: boundary density {current:.5f} > {previous:.5f}")
            continue
        logger.debug(f"Block [{start}, {stop}]: closure level {level}, boundary density {current:.5f}")
        F = candidate
        accepted.append(stop)
        closure_levels.append(level)
        boundary_densities.append((stop, current))
    subsequence = accepted

    if not boundary(F).issubset(E):
        raise InvariantViolation("Følner fill produced a boundary point outside E")

    final = subsequence[-1]
    intersection = density_upto(E.intersection(F), final)
    if intersection < observed - tolerance:
        raise InvariantViolation(
            f"d_n(E ∩ F) = {intersection:.5f} below observed upper density {observed:.5f} − {tolerance}")
    if len(boundary_densities) > 2 and boundary_densities[-1][1] > boundary_densities[-2][1]:
        logger.warning(f"Boundary density rose at the final rung {final}")

    filled_defects: List[Tuple[int, float]] = []
    trial_level = int(M0)
    top = max(closure_levels or [M0])
    while True:
        filled = F.truncate(final).difference(closure_M(E, trial_level).truncate(final))
        filled_defects.append((trial_level, len(filled) / final))
        if trial_level >= top:
            break
        trial_level *= 2

    logger.info(f"Følner fill: {len(subsequence)} rungs to n={final}, d(E∩F)={intersection:.4f}, "
                f"d(∂F)={boundary_densities[-1][1]:.5f}")
    return FolnerFill(
        subsequence=subsequence,
        F=F,
        report=report,
        closure_levels=closure_levels,
        boundary_densities=boundary_densities,
        filled_defects=filled_defects,
        intersection_density=intersection,
        observed_upper=observed,
        M0=int(M0),
    )


@dataclass
class FolnerPlan:
    """
    Selected horizons 𝔫 with a common F_n and sample set A_n per horizon.

    ``delta[n]`` is the slack δ_n of the boundary-pattern count,
    ``weights[n]`` the weight of A_n.
    """

    subsequence: List[int] = field(default_factory=list)
    sets: Dict[int, IntegerSet] = field(default_factory=dict)
    selected_points: Dict[int, List[int]] = field(default_factory=dict)
    delta: Dict[int, float] = field(default_factory=dict)
    weights: Dict[int, float] = field(default_factory=dict)
    beta: float = 0.0
    verdict: str = 'ok'

    @property
    def is_empty(self) -> bool:
        return not self.subsequence

    def boundary_density(self, n: int) -> float:
        return len(boundary(self.sets[n])) / n

    def folner_checkpoints(self) -> List[int]:
        """Horizons along which d_n(∂F_n) does not increase."""
        kept: List[int] = []
        for n in self.subsequence:
            if not kept or self.boundary_density(n) <= self.boundary_density(kept[-1]):
                kept.append(n)
        return kept


def _observed_upper(E: IntegerSet, window: int) -> float:
    if E.count_upto(E.horizon) == 0:
        return 0.0
    return density_report(E, window, _snapped_ladder(E, lab_setting('LADDER_RATIO'))).upper


def borel_cantelli_select(family: Mapping[int, IntegerSet], weights: Union[Mapping[int, float], Sequence[float]],
                          beta: float, checkpoints: Optional[int] = None, tolerance: Optional[float] = None,
                          threads=None) -> FolnerPlan:
    """
    Select horizons n, a common set F_n and samples A_n.

    For each horizon the candidate patterns are the truncations F(x) ∩ [1, n]
    of the samples' own Følner fills. A pattern's sample set holds every
    eligible y with ∂F_n ⊆ E(y) and d_n(E(y) ∩ F_n) ≥ β − tolerance; the
    heaviest pattern wins, the lexicographically smallest on ties.

    Args:
        family: Sample index → E(x)
        weights: Sample weights summing to 1 (mapping or sequence by index)
        beta: Density threshold
        checkpoints: Window for observed upper densities
        tolerance: Allowed shortfall below beta
        threads: Worker count for the per-sample fills

    Returns:
        FolnerPlan; empty with an explicit verdict when no sample exceeds beta
    """
    checkpoints = int(checkpoints if checkpoints is not None else lab_setting('DENSITY_WINDOW'))
    tolerance = float(tolerance if tolerance is not None else lab_setting('DENSITY_TOLERANCE'))
    indices = sorted(family)
    weight_of = {index: float(weights[index]) for index in indices}
    if any(value < 0 for value in weight_of.values()):
        raise DomainError("Sample weights must be nonnegative")
    total = sum(weight_of.values())
    if abs(total - 1.0) > 1e-9:
        raise DomainError(f"Sample weights must sum to 1, got {total}")

    observed = dict(zip(indices, parallel_map(lambda i: _observed_upper(family[i], checkpoints), indices, threads)))
    eligible = [i for i in indices if observed[i] > beta and weight_of[i] > 0]
    if not eligible:
        logger.warning(f"No sample has observed upper density above beta={beta}")
        return FolnerPlan(beta=beta, verdict='empty: no sample exceeds beta')

    def fill(index):
        try:
            return folner_fill(family[index], math.floor(2.0 / observed[index]) + 1, checkpoints)
        except PreconditionError as exc:
            logger.warning(f"Sample {index} skipped: {exc}")
            return None

    fills = dict(zip(eligible, parallel_map(fill, eligible, threads)))
    horizons = sorted({n for result in fills.values() if result is not None for n in result.subsequence})

    plan = FolnerPlan(beta=beta)
    for n in horizons:
        patterns: Dict[Tuple[int, ...], IntegerSet] = {}
        for index, result in fills.items():
            if result is not None and n in result.subsequence:
                pattern = result.F.truncate(n)
                patterns.setdefault(pattern.key(), pattern)
        best = None
        for key in sorted(patterns):
            pattern = patterns[key]
            edge = boundary(pattern)
            members = [
                index for index in eligible
                if family[index].horizon >= n
                and edge.issubset(family[index])
                and density_upto(family[index].intersection(pattern), n) >= beta - tolerance
            ]
            weight = sum(weight_of[index] for index in members)
            if best is None or weight > best[0]:
                best = (weight, pattern, members)
        weight, pattern, members = best
        if not members:
            continue
        delta = boundary_pattern_entropy(n, len(boundary(pattern)) / n)
        if weight < math.exp(-n * delta) / n ** 2:
            logger.warning(f"Horizon {n} dropped: weight {weight:.3e} below e^(-nδ)/n²")
            continue
        plan.subsequence.append(n)
        plan.sets[n] = pattern
        plan.selected_points[n] = members
        plan.delta[n] = delta
        plan.weights[n] = weight

    if plan.is_empty:
        plan.verdict = 'empty: no admissible horizon'
    logger.info(f"Følner plan: {len(plan.subsequence)} horizons from {len(eligible)} eligible samples")
    return plan
