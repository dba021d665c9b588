"""
SRB candidates: from a seed curve to an entropy-versus-exponent verdict.

The pipeline samples the seed curve, keeps the samples whose orbits stretch
the tangent line beyond e^{nb}, reads their geometric times off the
reparametrization tree, selects a common Følner set with ``density``, and
averages the σ-length measure of the selected samples along it on the
projective bundle. The candidate's exponent and entropy are then compared.
"""

import logging
import math
import re
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .cocycle import (BoxPartition, GibbsReport, LabelPartition, WeightedPointMeasure, conditional_entropy_rate,
                      empirical_measure, entropy_slope, gibbs_diagnostic, invariance_defect)
from .conf import lab_setting
from .curves import CurveJet, SPEED_SAMPLES
from .density import FolnerPlan, borel_cantelli_select, density_upto
from .dynamics import (SurfaceMap, derivative_generator, find_periodic_sources, log_jacobian_many,
                       lyapunov_max_many, omega_q_many, projective_step, projective_step_many,
                       R_estimate, surface_step)
from .exceptions import DomainError, InvariantViolation, PreconditionError
from .parallel import parallel_map
from .reptree import LARGENESS_BASE, build_tree, geometric_sets, initial_states, log_stretches, sample_parameters

logger = logging.getLogger(__name__)

SRB_CONSISTENT = 'SRB-consistent'
INCONSISTENT = 'inconsistent'
INSUFFICIENT = 'insufficient-data'

EXPONENT_BIN = 0.02
MODE_MASS = 0.05
SOURCE_DISTANCE = 1e-6
WASSERSTEIN_RESOLUTION = 64
ENTROPY_REFINEMENTS = 3
R_HORIZON = 16
CHUNK = 256
MIN_CHI = 0.01
SEED_SPEED = 0.999
CANDIDATE_REFINEMENT = 16
ARC_POINTS = 1024
MAX_ARCS = 256
ARC_PUSH = 32
ENTROPY_SPAN = 2

SEED_PATTERN = re.compile(r'^(?P<kind>[hvd]):(?P<offset>[-+0-9.eE]+)$')


# observables

@dataclass
class PsiObservable:
    """ψ^q(x̂) = φ(x̂) − ω_q(x̂)/(r−1) on (x, y, angle) rows."""

    surface_map: SurfaceMap
    q: int
    degree: Optional[int] = None
    delta_q: float = 0.0

    def __post_init__(self):
        if self.q < 1:
            raise DomainError(f"q must be positive, got {self.q}")
        self.degree = int(self.degree or lab_setting('CURVE_DEGREE'))
        if self.degree < 2:
            raise DomainError(f"ψ^q needs r ≥ 2, got {self.degree}")

    def __call__(self, states) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=float))
        phi = derivative_generator(self.surface_map)(states)
        return phi - omega_q_many(self.surface_map, states, self.q) / (self.degree - 1)


# seeds

def seed_curve(surface_map: SurfaceMap, kind: str, offset: float, epsilon: float,
               degree: Optional[int] = None) -> CurveJet:
    """
    Straight seed of speed just below ε from the horizontal, vertical or
    diagonal family.

    ``offset`` is a fraction of the sample box: the height of a horizontal
    seed, the abscissa of a vertical one, the position along the diagonal for
    ``d``. The segment is centred in the box along its own direction.
    """
    if not 0.0 <= offset <= 1.0:
        raise DomainError(f"Seed offset must lie in [0, 1], got {offset}")
    xmin, xmax, ymin, ymax = surface_map.sample_box
    middle = np.array([0.5 * (xmin + xmax), 0.5 * (ymin + ymax)])
    if kind == 'h':
        base, direction = np.array([middle[0], ymin + offset * (ymax - ymin)]), np.array([1.0, 0.0])
    elif kind == 'v':
        base, direction = np.array([xmin + offset * (xmax - xmin), middle[1]]), np.array([0.0, 1.0])
    elif kind == 'd':
        base = np.array([xmin + offset * (xmax - xmin), ymin + offset * (ymax - ymin)])
        direction = np.array([1.0, 1.0]) / math.sqrt(2.0)
    else:
        raise DomainError(f"Unknown seed family '{kind}', expected h, v or d")
    return CurveJet.segment(base, SEED_SPEED * epsilon * direction, degree)


def parse_seed(text: str) -> Tuple[str, float]:
    """'h:0.3' → ('h', 0.3)."""
    match = SEED_PATTERN.match(text.strip())
    if not match:
        raise DomainError(f"Seed curve must look like h|v|d:OFFSET, got {text!r}")
    return match.group('kind'), float(match.group('offset'))


def check_seed_sources(surface_map: SurfaceMap, sigma: CurveJet, max_period: Optional[int] = None) -> int:
    """
    Refuse seeds passing within 1e−6 of a periodic source of low period.

    Returns:
        Number of sources examined

    Raises:
        PreconditionError: σ meets a source
    """
    max_period = int(max_period or lab_setting('SOURCE_MAX_PERIOD'))
    sources = find_periodic_sources(surface_map, max_period)
    if not sources:
        return 0
    points = sigma.evaluate(sigma.sample_parameters(SPEED_SAMPLES))
    for source in sources:
        gap = float(surface_map.distance(points, np.array(source.point)).min())
        if gap < SOURCE_DISTANCE:
            logger.error(f"Seed passes {gap:.2e} from the period-{source.period} source {source.point}")
            raise PreconditionError(f"Seed curve meets the periodic source {source.point} (period {source.period})")
    return len(sources)


# distances

def _cells(values: np.ndarray, low: float, high: float, resolution: int) -> np.ndarray:
    cells = np.floor((values - low) / (high - low) * resolution).astype(np.int64)
    return np.clip(cells, 0, resolution - 1)


def marginal_cdfs(states: np.ndarray, weights: Optional[np.ndarray], box, resolution: int) -> np.ndarray:
    """Binned CDFs of the two coordinates, shape (2, resolution)."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    weights = np.ones(states.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    weights = weights / weights.sum()
    cdfs = np.empty((2, resolution))
    for axis in range(2):
        cells = _cells(states[:, axis], box[2 * axis], box[2 * axis + 1], resolution)
        cdfs[axis] = np.cumsum(np.bincount(cells, weights=weights, minlength=resolution))
    return cdfs


def _cdf_distance(first: np.ndarray, second: np.ndarray, box, resolution: int) -> np.ndarray:
    """Mean over axes of Σ|ΔCDF|·width; broadcasts over leading dimensions."""
    widths = np.array([box[1] - box[0], box[3] - box[2]]) / resolution
    return (np.abs(first - second).sum(axis=-1) * widths).mean(axis=-1)


def grid_wasserstein(mu: WeightedPointMeasure, nu: WeightedPointMeasure, box, resolution: Optional[int] = None) -> float:
    """Mean of the two coordinate-marginal W1 distances after binning both measures on the grid."""
    resolution = resolution or WASSERSTEIN_RESOLUTION
    return float(_cdf_distance(marginal_cdfs(mu.states[:, :2], mu.weights, box, resolution),
                               marginal_cdfs(nu.states[:, :2], nu.weights, box, resolution), box, resolution))


# exponent partition

@dataclass
class ExponentPartition:
    """Histogram of finite-horizon exponents with its modes above b."""

    exponents: np.ndarray = field(repr=False)
    escaped: np.ndarray = field(repr=False)
    b: float
    bin_width: float
    edges: np.ndarray = field(repr=False)
    counts: np.ndarray = field(repr=False)
    modes: List[float] = field(default_factory=list)
    above_mass: float = 0.0
    outside_mass: float = 0.0

    @property
    def lambda_estimate(self) -> List[float]:
        return list(self.modes)

    @property
    def escaped_fraction(self) -> float:
        return float(self.escaped.mean()) if self.escaped.size else 0.0

    def mode_share(self, centre: float) -> float:
        """Fraction of {χ > b} within one bin of ``centre``."""
        finite = self.exponents[np.isfinite(self.exponents)]
        above = finite[finite > self.b]
        if not above.size:
            return 0.0
        return float(np.mean(np.abs(above - centre) <= self.bin_width))

    def rows(self) -> List[Dict[str, object]]:
        return [{'low': f"{low:.6g}", 'high': f"{high:.6g}", 'count': int(count)}
                for low, high, count in zip(self.edges[:-1], self.edges[1:], self.counts)]


def exponent_histogram(exponents: np.ndarray, b: float, bin_width: float = EXPONENT_BIN,
                       escaped: Optional[np.ndarray] = None) -> ExponentPartition:
    """
    Histogram of ``exponents`` with modes: local maxima above b holding at
    least 5% of the mass of {χ > b}.
    """
    exponents = np.asarray(exponents, dtype=float)
    escaped = np.zeros(exponents.shape, dtype=bool) if escaped is None else np.asarray(escaped, dtype=bool)
    finite = exponents[np.isfinite(exponents)]
    if not finite.size:
        return ExponentPartition(exponents, escaped, b, bin_width, np.zeros(1), np.zeros(0, dtype=np.int64))
    low = math.floor(finite.min() / bin_width) * bin_width
    high = (math.floor(finite.max() / bin_width) + 1) * bin_width
    edges = low + bin_width * np.arange(int(round((high - low) / bin_width)) + 1)
    counts, edges = np.histogram(finite, bins=edges)
    above = finite > b
    total_above = int(above.sum())
    padded = np.concatenate([[0], counts, [0]])
    modes = []
    for index, count in enumerate(counts):
        centre = 0.5 * (edges[index] + edges[index + 1])
        if centre <= b or count == 0 or count < MODE_MASS * total_above:
            continue
        if count > padded[index] and count >= padded[index + 2]:
            modes.append(float(centre))
    if modes and total_above:
        near = np.zeros(finite.shape, dtype=bool)
        for centre in modes:
            near |= np.abs(finite - centre) <= bin_width
        outside = float(np.sum(above & ~near)) / total_above
    else:
        outside = 1.0 if total_above else 0.0
    return ExponentPartition(exponents=exponents, escaped=escaped, b=b, bin_width=bin_width, edges=edges,
                             counts=counts, modes=modes, above_mass=total_above / exponents.size,
                             outside_mass=outside)


def _chunks(points: np.ndarray, size: int = CHUNK) -> List[np.ndarray]:
    return [points[start:start + size] for start in range(0, points.shape[0], size)]


def exponent_partition(surface_map: SurfaceMap, grid: int, n: int, b: float, bin_width: float = EXPONENT_BIN,
                       threads=None) -> ExponentPartition:
    """
    Finite-horizon χ on a grid² of points, binned, with the Λ estimate.

    Escaped planar orbits are left out of the histogram and counted apart.
    """
    if grid < 1 or n < 1:
        raise DomainError("exponent_partition needs grid ≥ 1 and n ≥ 1")
    points = surface_map.grid(grid)
    results = parallel_map(lambda chunk: lyapunov_max_many(surface_map, chunk, n), _chunks(points), threads)
    exponents = np.concatenate([exps for exps, _ in results])
    escaped = np.concatenate([lost for _, lost in results])
    partition = exponent_histogram(exponents, b, bin_width, escaped)
    logger.info(f"Exponent partition of {surface_map} on {grid}²: modes {partition.modes}, "
                f"outside mass {partition.outside_mass:.4f}")
    return partition


# candidates

@dataclass
class SrbCandidate:
    """A finite-horizon SRB candidate and its diagnostics."""

    measure: Optional[WeightedPointMeasure]
    projected: Optional[WeightedPointMeasure]
    chi1: float
    entropy: float
    b_threshold: float
    verdict: str
    chi2: float = math.nan
    stability: float = math.nan
    delta_q: float = 0.0
    entropies: List[float] = field(default_factory=list)
    gibbs_violation: float = 0.0
    psi_average: float = math.nan
    psi_echo: Optional[bool] = None
    defects: Dict[str, float] = field(default_factory=dict)
    label: str = ''
    n: int = 0
    largeness_ok: Optional[bool] = None
    histogram: Optional[ExponentPartition] = field(default=None, repr=False)

    def __post_init__(self):
        if self.verdict == SRB_CONSISTENT and not self.chi1 > self.b_threshold:
            raise InvariantViolation(f"SRB-consistent candidate with χ₁ = {self.chi1} ≤ b = {self.b_threshold}")

    def rows(self) -> List[Dict[str, object]]:
        if self.measure is None:
            return []
        rows = []
        for state, weight in zip(self.measure.states, self.measure.weights):
            rows.append({'x': f"{state[0]:.12g}", 'y': f"{state[1]:.12g}",
                         'angle': f"{state[2]:.12g}" if state.size > 2 else '', 'weight': f"{weight:.12g}"})
        return rows

    def summary_row(self) -> Dict[str, object]:
        return {'chi1': f"{self.chi1:.6g}", 'entropy': f"{self.entropy:.6g}", 'verdict': self.verdict,
                'stability': f"{self.stability:.6g}", 'delta_q': f"{self.delta_q:.6g}"}


def _exponent_rates(surface_map: SurfaceMap, states: np.ndarray, horizon: int) -> Tuple[np.ndarray, np.ndarray]:
    """Per-atom (1/H)·Σ_{k<H} φ along the forward orbit, and the escape mask."""
    totals = np.zeros(states.shape[0])
    escaped = np.zeros(states.shape[0], dtype=bool)
    for _ in range(horizon):
        with np.errstate(over='ignore', invalid='ignore', divide='ignore'):
            states, phi = projective_step_many(surface_map, states)
        escaped |= ~surface_map.in_domain(states[:, :2]) | ~np.isfinite(phi)
        states[escaped] = np.concatenate([0.5 * (np.array(surface_map.box[::2]) + np.array(surface_map.box[1::2])),
                                          [0.0]])
        totals += np.where(escaped, 0.0, phi)
    return totals / horizon, escaped


def entropy_estimates(surface_map: SurfaceMap, projected: WeightedPointMeasure, grid: Optional[int] = None,
                      depth: Optional[int] = None) -> List[float]:
    """Conditional entropy rates on grids of R, 2R and 4R cells per axis."""
    grid = int(grid or lab_setting('ENTROPY_GRID'))
    depth = int(depth or lab_setting('ENTROPY_DEPTH'))
    step = surface_step(surface_map)
    estimates = []
    for refinement in range(ENTROPY_REFINEMENTS):
        partition = BoxPartition(surface_map.sample_box, grid * 2 ** refinement, torus=surface_map.compact)
        estimates.append(conditional_entropy_rate(projected, partition, depth, step))
    return estimates


def _labelled_step(surface_map: SurfaceMap):
    """Surface step on (x, y, label) rows, keeping the label."""
    return lambda states: np.column_stack([surface_map.forward_many(states[:, :2]), states[:, 2]])


def _arc_times(surface_map: SurfaceMap, sigma: CurveJet, centres: np.ndarray, start: np.ndarray, side: float,
               half_width: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    First T ≥ k at which the arc of f^T∘σ of parameter half-width
    ``half_width`` around its centre is at least ``side`` long, and the
    speed of f^T∘σ at the centre. Gives up ARC_PUSH steps after k.
    """
    points = sigma.evaluate(centres)
    tangents = sigma.derivative(centres, 1)
    pushes = np.zeros(centres.size, dtype=np.int64)
    limit = start + ARC_PUSH
    while True:
        speeds = np.linalg.norm(tangents, axis=-1)
        active = (pushes < start) | ((2.0 * half_width * speeds < side) & (pushes < limit))
        active &= np.isfinite(speeds) & np.all(np.isfinite(points), axis=-1)
        if not active.any():
            return pushes, speeds
        with np.errstate(over='ignore', invalid='ignore'):
            tangents[active] = np.einsum('nij,nj->ni', surface_map.differential_many(points[active]),
                                         tangents[active])
            points[active] = surface_map.forward_many(points[active])
        pushes[active] += 1


def arc_entropy_estimates(surface_map: SurfaceMap, sigma: CurveJet, centres, weights, times,
                          half_width: float, grid: Optional[int] = None, depth: Optional[int] = None) -> List[float]:
    """
    Entropy rates of a candidate along its curves, on grids of R, 2R and 4R cells per axis.

    Every pair (sample, k) with k in ``times`` contributes one arc of
    f^T∘σ around the sample, T ≥ k being the first time an arc of parameter
    half-width at most ``half_width`` spans one cell side; the arc is then
    cut back to one cell side. With C the partition into arcs and m the
    entropy depth, the rate is (H(C ∨ P^{m+2}) − H(C ∨ P^m))/2.

    Args:
        surface_map: The map f
        sigma: Seed curve
        centres: Parameters of the selected samples
        weights: Their σ-length weights
        times: The Følner set F
        half_width: Largest parameter half-width of an arc
        grid: Coarsest resolution R, ``ENTROPY_GRID`` by default
        depth: Entropy depth m, ``ENTROPY_DEPTH`` by default

    Returns:
        One rate per grid, NaN where every arc escaped
    """
    grid = int(grid or lab_setting('ENTROPY_GRID'))
    depth = int(depth or lab_setting('ENTROPY_DEPTH'))
    centres = np.asarray(centres, dtype=float)
    weights = np.asarray(weights, dtype=float)
    times = np.asarray(times, dtype=np.int64)
    owner = np.repeat(np.arange(centres.size), times.size)
    start = np.tile(times, centres.size)
    if owner.size > MAX_ARCS:
        keep = np.unique(np.linspace(0, owner.size - 1, MAX_ARCS).round().astype(np.int64))
        owner, start = owner[keep], start[keep]
    arcs = owner.size
    arc_weights = weights[owner] / weights[owner].sum()
    labels = np.repeat(np.arange(arcs), ARC_POINTS)
    offsets = np.linspace(-1.0, 1.0, ARC_POINTS)
    box = surface_map.sample_box
    shortest = min(box[1] - box[0], box[3] - box[2])
    step = _labelled_step(surface_map)
    estimates = []
    for refinement in range(ENTROPY_REFINEMENTS):
        resolution = grid * 2 ** refinement
        side = shortest / resolution
        pushes, speeds = _arc_times(surface_map, sigma, centres[owner], start, side, half_width)
        with np.errstate(divide='ignore', invalid='ignore'):
            widths = np.where(speeds > 0.0, np.minimum(half_width, side / (2.0 * speeds)), half_width)
        widths = np.nan_to_num(widths, nan=half_width)
        parameters = np.clip(centres[owner][:, None] + widths[:, None] * offsets[None, :], -1.0, 1.0).reshape(-1)
        positions = sigma.evaluate(parameters)
        elements = np.linalg.norm(sigma.derivative(parameters, 1), axis=-1)
        rows = np.repeat(pushes, ARC_POINTS)
        for s in range(int(pushes.max(initial=0))):
            moving = rows > s
            with np.errstate(over='ignore', invalid='ignore'):
                positions[moving] = surface_map.forward_many(positions[moving])
        valid = np.all(np.isfinite(positions), axis=-1) & surface_map.in_domain(positions)
        if not valid.any():
            logger.warning(f"Every arc escaped on the {resolution}-cell grid")
            estimates.append(math.nan)
            continue
        lengths = np.bincount(labels[valid], weights=elements[valid], minlength=arcs)
        mass = np.zeros(labels.size)
        spans = np.maximum(lengths[labels[valid]], np.finfo(float).tiny)
        mass[valid] = arc_weights[labels[valid]] * elements[valid] / spans
        mu = WeightedPointMeasure(np.column_stack([positions[valid], labels[valid]]), mass[valid])
        partition = BoxPartition(box, resolution, torus=surface_map.compact)
        estimates.append(entropy_slope(mu, partition, depth, depth + ENTROPY_SPAN, step,
                                       given=LabelPartition(arcs)))
    return estimates


def verdict_for(chi1: float, entropy: float, b: float, stability: Optional[float] = None) -> str:
    if not (np.isfinite(chi1) and np.isfinite(entropy)):
        return INSUFFICIENT
    tolerance = lab_setting('VERDICT_TOLERANCE')
    if abs(entropy - chi1) / max(chi1, MIN_CHI) > tolerance or not chi1 > b:
        return INCONSISTENT
    if stability is not None and not stability < lab_setting('STABILITY_THRESHOLD'):
        return INCONSISTENT
    return SRB_CONSISTENT


def assess_candidate(surface_map: SurfaceMap, measure: WeightedPointMeasure, b: float, horizon: int,
                     stability: Optional[float] = None, entropy_grid: Optional[int] = None,
                     entropies: Optional[Sequence[float]] = None) -> SrbCandidate:
    """
    Exponents, entropy and verdict of a measure on the projective bundle.

    χ₁ is the atom-weighted mean of the accumulated φ rate over ``horizon``
    steps, χ₂ the Jacobian rate minus χ₁. Atoms whose orbit escapes are
    dropped and the weights renormalized. The entropy is the largest finite
    value of ``entropies``, computed from the atoms when not given.
    """
    if not measure.is_projective:
        raise DomainError("Candidates live on the projective bundle: atoms need (x, y, angle)")
    if horizon < 1:
        raise DomainError(f"Exponent horizon must be positive, got {horizon}")
    rates, escaped = _exponent_rates(surface_map, measure.states.copy(), horizon)
    kept = ~escaped
    if not kept.any():
        logger.warning("Every atom of the candidate escaped")
        return SrbCandidate(measure, measure.projected(), math.nan, math.nan, b, INSUFFICIENT,
                            label=surface_map.label)
    if escaped.any():
        logger.warning(f"{int(escaped.sum())} of {len(measure)} atoms escaped and were dropped")
        measure = WeightedPointMeasure(measure.states[kept], measure.weights[kept])
        rates = rates[kept]
    chi1 = float(measure.weights @ rates)
    jacobian = log_jacobian_many(surface_map, measure.states[:, :2], horizon)
    chi2 = float(measure.weights @ jacobian) - chi1
    projected = measure.projected()
    if entropies is None:
        entropies = entropy_estimates(surface_map, projected, entropy_grid)
    entropies = [float(value) for value in entropies]
    entropy = max((value for value in entropies if np.isfinite(value)), default=math.nan)
    verdict = verdict_for(chi1, entropy, b, stability)
    logger.info(f"Candidate: χ₁={chi1:.5f}, χ₂={chi2:.5f}, h={entropy:.5f} → {verdict}")
    return SrbCandidate(measure=measure, projected=projected, chi1=chi1, chi2=chi2, entropy=entropy,
                        b_threshold=b, verdict=verdict,
                        stability=math.nan if stability is None else stability, entropies=entropies,
                        label=surface_map.label)


@dataclass(frozen=True)
class RuelleCheck:
    margin: float
    backward_margin: float
    tolerance: float

    @property
    def holds(self) -> bool:
        return self.margin >= -self.tolerance and self.backward_margin >= -self.tolerance


def ruelle_check(candidate: SrbCandidate, tolerance: Optional[float] = None) -> RuelleCheck:
    """
    χ₁ − h ≥ −tolerance, and for the inverse map −χ₂ − h ≥ −tolerance.

    The tolerance defaults to the verdict tolerance relative to max(χ₁, 0.01).
    """
    if not np.isfinite(candidate.chi1):
        raise PreconditionError("Ruelle check needs a candidate with χ₁ computed")
    if tolerance is None:
        tolerance = lab_setting('VERDICT_TOLERANCE') * max(candidate.chi1, MIN_CHI)
    check = RuelleCheck(margin=candidate.chi1 - candidate.entropy,
                        backward_margin=-candidate.chi2 - candidate.entropy if np.isfinite(candidate.chi2) else math.inf,
                        tolerance=tolerance)
    if not check.holds:
        logger.warning(f"Ruelle margins {check.margin:.4f} / {check.backward_margin:.4f} below −{tolerance:.4f}")
    return check


def apply_largeness(candidate: SrbCandidate, p: int) -> Optional[bool]:
    """
    Record whether χ₁ ≥ log 10/p − tolerance; a candidate failing it cannot stay SRB-consistent.

    The tolerance is the verdict tolerance relative to max(χ₁, 0.01).
    """
    if not np.isfinite(candidate.chi1):
        candidate.largeness_ok = None
        return None
    tau = math.log(LARGENESS_BASE) / p
    tolerance = lab_setting('VERDICT_TOLERANCE') * max(candidate.chi1, MIN_CHI)
    candidate.largeness_ok = bool(candidate.chi1 >= tau - tolerance)
    if not candidate.largeness_ok:
        logger.warning(f"χ₁ = {candidate.chi1:.4f} below the largeness rate log 10/p = {tau:.4f}")
        if candidate.verdict == SRB_CONSISTENT:
            candidate.verdict = INCONSISTENT
    return candidate.largeness_ok


# pipeline

def _speeds(sigma: CurveJet, params: np.ndarray) -> np.ndarray:
    return np.linalg.norm(sigma.derivative(params, 1), axis=-1)


def stretched_samples(stretches: np.ndarray, b: float) -> np.ndarray:
    """Sample indices whose log stretch reaches nb for some n in [H/2, H]."""
    horizon = stretches.shape[1] - 1
    start = max(1, math.ceil(horizon / 2))
    n = np.arange(start, horizon + 1)
    return np.flatnonzero(np.any(stretches[:, start:] >= n[None, :] * b, axis=1))


def _insufficient(surface_map: SurfaceMap, b: float, stretches: np.ndarray, reason: str) -> SrbCandidate:
    horizon = stretches.shape[1] - 1
    histogram = exponent_histogram(stretches[:, -1] / max(horizon, 1), b)
    logger.warning(f"Insufficient data: {reason}")
    return SrbCandidate(None, None, math.nan, math.nan, b, INSUFFICIENT, histogram=histogram,
                        label=surface_map.label)


def cell_parameters(count: int, members, refinement: int) -> np.ndarray:
    """
    ``refinement`` evenly spaced parameters in the sampling cell of each member.

    Cell i is [−1 + 2i/count, −1 + 2(i+1)/count].
    """
    members = np.asarray(members, dtype=np.int64)
    offsets = (np.arange(refinement) + 0.5) / refinement
    return (-1.0 + 2.0 * (members[:, None] + offsets[None, :]) / count).reshape(-1)


def _plan_measure(sigma: CurveJet, params: np.ndarray, plan: FolnerPlan, n: int,
                  refinement: int = 1) -> WeightedPointMeasure:
    """
    μ_n: σ-length on A_n, on the projective bundle; ``mass`` is λ(A_n).

    One atom per selected sample, or ``refinement`` atoms spread over its
    sampling cell.
    """
    members = np.asarray(plan.selected_points[n], dtype=np.int64)
    points = params[members] if refinement == 1 else cell_parameters(params.size, members, refinement)
    cell = 2.0 / (params.size * refinement)
    return WeightedPointMeasure(initial_states(sigma, points), _speeds(sigma, points) * cell)


def run_pipeline(surface_map: SurfaceMap, sigma: CurveJet, b: float, p: int, depth: int, q: int, horizon: int,
                 epsilon: Optional[float] = None, samples: Optional[int] = None, seed: int = 0, threads=None,
                 check_sources: bool = True) -> SrbCandidate:
    """
    Build an SRB candidate from the seed curve σ.

    Args:
        surface_map: The map f
        sigma: Seed curve, strongly ε-bounded
        b: Exponent threshold, above R(f)/r
        p: Period of the geometric times
        depth: Tree depth; geometric times are read up to depth·p
        q: Order of the ψ^q observable in the Gibbs diagnostic
        horizon: Steps used for the candidate's exponents
        epsilon: Tree scale; the speed of σ when omitted
        samples: Number of sampled parameters on σ
        seed: Seed of the sample jitter
        threads: Worker count inside each stage

    Returns:
        SrbCandidate; verdict insufficient-data with the stretch histogram
        when no sample stretches enough or the Følner plan is empty

    Raises:
        PreconditionError: b ≤ R(f)/r, or σ meets a periodic source
    """
    degree = lab_setting('CURVE_DEGREE')
    growth = R_estimate(surface_map, R_HORIZON, lab_setting('SCALE_GRID'))
    if b <= growth.value / degree:
        logger.error(f"b = {b:g} is not above R(f)/r = {growth.value / degree:.5f}")
        raise PreconditionError(f"b = {b:g} must exceed R(f)/r = {growth.value / degree:.5f}")
    if check_sources:
        check_seed_sources(surface_map, sigma)
    epsilon = float(epsilon if epsilon is not None else sigma.derivative_bound(1))
    params = sample_parameters(samples or lab_setting('TREE_SAMPLES'), seed)

    H = depth * p
    stretches = log_stretches(surface_map, sigma, params, H)
    A = stretched_samples(stretches, b)
    logger.info(f"{A.size} of {params.size} samples stretch beyond e^(nb) in [{H // 2}, {H}]")
    if not A.size:
        return _insufficient(surface_map, b, stretches, f"no sample stretches beyond e^(nb), b={b:g}")

    tree = build_tree(surface_map, p, sigma, epsilon, depth, params=params, seed=seed, threads=threads)
    sets = geometric_sets(tree, verify=False, threads=threads)
    H = tree.built_depth * p
    family = {int(index): sets[index].E for index in A}
    densities = np.array([density_upto(E, H) for E in family.values()]) if H else np.zeros(1)
    if not densities.any():
        return _insufficient(surface_map, b, stretches, "no geometric time among the stretched samples")
    speeds = _speeds(sigma, params)
    weights = {index: speeds[index] / speeds[A].sum() for index in family}
    plan = borel_cantelli_select(family, weights, 0.5 * float(densities.mean()), checkpoints=1, threads=threads)
    if plan.is_empty:
        return _insufficient(surface_map, b, stretches, plan.verdict)

    checkpoints = plan.folner_checkpoints()
    step = projective_step(surface_map)
    n = checkpoints[-1]
    mu = _plan_measure(sigma, params, plan, n)
    F = plan.sets[n]
    measure = empirical_measure(_plan_measure(sigma, params, plan, n, CANDIDATE_REFINEMENT), F, step)
    if len(checkpoints) >= 2:
        previous = checkpoints[-2]
        earlier = empirical_measure(_plan_measure(sigma, params, plan, previous, CANDIDATE_REFINEMENT),
                                    plan.sets[previous], step)
        stability = grid_wasserstein(measure, earlier, surface_map.sample_box)
    else:
        logger.warning("Only one Følner checkpoint; stability cannot be measured")
        stability = math.inf

    members = np.asarray(plan.selected_points[n], dtype=np.int64)
    entropies = arc_entropy_estimates(surface_map, sigma, params[members], speeds[members], F.elements,
                                      half_width=1.0 / params.size)
    candidate = assess_candidate(surface_map, measure, b, horizon, stability, entropies=entropies)
    candidate.n = n
    projected_mu = mu.projected()
    candidate.defects = {
        'x': invariance_defect(projected_mu, F, lambda s: s[:, 0], surface_step(surface_map)),
        'y': invariance_defect(projected_mu, F, lambda s: s[:, 1], surface_step(surface_map)),
    }

    psi = PsiObservable(surface_map, q, degree)
    partition = BoxPartition.for_diameter(surface_map.sample_box, epsilon, torus=surface_map.compact)
    report: GibbsReport = gibbs_diagnostic(plan, mu, partition, psi, 0.0, step, n=n)
    candidate.delta_q = max(0.0, report.worst / len(F)) if report.slacks.size else 0.0
    candidate.gibbs_violation = report.violation_fraction
    psi.delta_q = candidate.delta_q
    candidate.psi_average = candidate.measure.integrate(psi)
    tolerance = lab_setting('VERDICT_TOLERANCE') * max(candidate.chi1, MIN_CHI)
    candidate.psi_echo = bool(candidate.entropy >= candidate.psi_average - candidate.delta_q - tolerance)
    if not candidate.psi_echo:
        logger.warning(f"Entropy {candidate.entropy:.4f} below ∫ψ^{q} − δ_q = "
                       f"{candidate.psi_average - candidate.delta_q:.4f}")
    apply_largeness(candidate, p)
    logger.info(f"Pipeline for {surface_map}: n={n}, ♯F={len(F)}, ♯A_n={len(mu)}, stability={stability:.4g}, "
                f"δ_q={candidate.delta_q:.4g} → {candidate.verdict}")
    return candidate


# basins

@dataclass
class BasinRaster:
    points: np.ndarray = field(repr=False)
    labels: np.ndarray = field(repr=False)
    distances: np.ndarray = field(repr=False)
    exponents: np.ndarray = field(repr=False)
    b: float
    threshold: float

    @property
    def classified_fraction(self) -> float:
        """Share of {χ > b} assigned to some candidate."""
        above = np.isfinite(self.exponents) & (self.exponents > self.b)
        if not above.any():
            return 0.0
        return float(np.mean(self.labels[above] >= 0))

    def counts(self) -> Dict[int, int]:
        values, counts = np.unique(self.labels, return_counts=True)
        return {int(value): int(count) for value, count in zip(values, counts)}

    def rows(self) -> List[Dict[str, object]]:
        return [{'x': f"{point[0]:.8g}", 'y': f"{point[1]:.8g}", 'label': int(label),
                 'distance': f"{distance.min():.6g}" if distance.size else '', 'chi': f"{chi:.6g}"}
                for point, label, distance, chi in zip(self.points, self.labels, self.distances, self.exponents)]


def _orbit_cdfs(surface_map: SurfaceMap, points: np.ndarray, n: int, box, resolution: int) -> Tuple[np.ndarray, np.ndarray]:
    """Binned marginal CDFs of each point's horizon-n orbit, shape (N, 2, resolution), and escapes."""
    count = points.shape[0]
    histogram = np.zeros((count, 2, resolution))
    escaped = np.zeros(count, dtype=bool)
    rows = np.arange(count)
    for _ in range(n):
        with np.errstate(over='ignore', invalid='ignore'):
            points = surface_map.forward_many(points)
        escaped |= ~surface_map.in_domain(points)
        for axis in range(2):
            cells = _cells(np.nan_to_num(points[:, axis]), box[2 * axis], box[2 * axis + 1], resolution)
            np.add.at(histogram, (rows, axis, cells), 1.0)
        points[escaped] = 0.5 * (np.array(box[::2]) + np.array(box[1::2]))
    return np.cumsum(histogram / n, axis=-1), escaped


def basin_raster(surface_map: SurfaceMap, candidates: Sequence[SrbCandidate], grid: int, n: int,
                 b: Optional[float] = None, threshold: Optional[float] = None, threads=None) -> BasinRaster:
    """
    Classify grid points by the nearest candidate, in grid-Wasserstein
    distance, of their horizon-n empirical measure.

    Ties go to the lowest candidate index; points farther than ``threshold``
    from every candidate, or escaping, are labelled −1.

    Raises:
        PreconditionError: no candidate with a measure
    """
    usable = [candidate for candidate in candidates if candidate.projected is not None]
    if not usable or len(usable) != len(candidates):
        logger.error("Basin raster refused: every candidate needs a measure")
        raise PreconditionError("Basin raster needs at least one candidate with a measure")
    if grid < 1 or n < 1:
        raise DomainError("basin_raster needs grid ≥ 1 and n ≥ 1")
    threshold = lab_setting('BASIN_THRESHOLD') if threshold is None else threshold
    b = min(candidate.b_threshold for candidate in candidates) if b is None else b
    box = surface_map.sample_box
    resolution = WASSERSTEIN_RESOLUTION
    references = np.stack([marginal_cdfs(c.projected.states, c.projected.weights, box, resolution) for c in usable])
    points = surface_map.grid(grid)

    def classify(chunk):
        cdfs, escaped = _orbit_cdfs(surface_map, chunk.copy(), n, box, resolution)
        distances = _cdf_distance(cdfs[:, None], references[None], box, resolution)
        labels = np.argmin(distances, axis=1)
        labels[(distances.min(axis=1) > threshold) | escaped] = -1
        exponents, _ = lyapunov_max_many(surface_map, chunk, n)
        return labels, distances, exponents

    results = parallel_map(classify, _chunks(points), threads)
    raster = BasinRaster(points=points, labels=np.concatenate([r[0] for r in results]),
                         distances=np.concatenate([r[1] for r in results]),
                         exponents=np.concatenate([r[2] for r in results]), b=b, threshold=threshold)
    logger.info(f"Basin raster on {grid}²: {raster.counts()}, classified fraction {raster.classified_fraction:.4f}")
    return raster
