"""
Bounded-curve calculus.

A curve γ: [−1, 1] → M is stored as polynomial pieces. Each piece keeps its
coefficients in a local variable u ∈ [−1, 1] (t = mid + h·u), so
derivative sup-norms are certified from coefficient sums instead of being
sampled:

    ‖d^sγ‖∞ on a piece ≤ h^{−s} Σ_{j≥s} j!/(j−s)! ‖a_j‖

γ is bounded when max_{s≥2} ‖d^sγ‖∞ ≤ (1/6)‖dγ‖∞ and strongly ε-bounded when
moreover ‖dγ‖∞ ≤ ε. Curves on the torus live in the covering plane.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial import polynomial as P

from . import taylor
from .conf import lab_setting
from .exceptions import DomainError, EscapeError, InvariantViolation, PreconditionError

logger = logging.getLogger(__name__)

SPEED_SAMPLES = 513
CHEBYSHEV_NODES = np.cos((2 * np.arange(8) + 1) * math.pi / 16)
BOUNDED_RATIO = 1.0 / 6.0
DISTORTION_BOUND = 1.5
OSCILLATION_BOUND = math.pi / 6
ORBIT_DISTORTION_BOUND = 9.0 / 4.0
MAX_TECH_OVERLAP = 100
RATE_HALVINGS = 40
MAX_PUSH_PIECES = 4096
ROUNDING_FACTOR = 64.0
REMAINDER_FLOOR = 1e-12


def _compose_linear(coefficients: np.ndarray, alpha, beta) -> np.ndarray:
    """Coefficients of u ↦ p(α + β·u) for stacked pieces of shape (P, d+1, 2)."""
    alpha = np.reshape(np.asarray(alpha, dtype=float), (-1, 1, 1))
    beta = np.reshape(np.asarray(beta, dtype=float), (-1, 1, 1))
    result = np.zeros(np.broadcast_shapes(coefficients.shape, alpha.shape))
    for j in range(coefficients.shape[1] - 1, -1, -1):
        shifted = np.zeros_like(result)
        shifted[:, 1:] = beta * result[:, :-1]
        result = alpha * result + shifted
        result[:, 0] += coefficients[:, j]
    return result


def _falling(j: int, s: int) -> int:
    return math.factorial(j) // math.factorial(j - s)


class AffineMap(NamedTuple):
    """t ↦ center + rate·t."""

    center: float
    rate: float

    def __call__(self, t):
        return self.center + self.rate * np.asarray(t, dtype=float)

    def compose(self, inner: 'AffineMap') -> 'AffineMap':
        """self ∘ inner."""
        return AffineMap(self.center + self.rate * inner.center, self.rate * inner.rate)

    @property
    def image(self) -> Tuple[float, float]:
        return (self.center - abs(self.rate), self.center + abs(self.rate))

    def is_reparametrization(self) -> bool:
        low, high = self.image
        return abs(self.rate) <= 1.0 and low >= -1.0 - 1e-12 and high <= 1.0 + 1e-12


IDENTITY = AffineMap(0.0, 1.0)


class CurvePiece(NamedTuple):
    low: float
    high: float
    coefficients: np.ndarray


class CurveJet:
    """
    Piecewise polynomial curve on [−1, 1].

    ``bounds`` has shape (P, 2) and ``coefficients`` shape (P, r+1, 2), one
    row of local coefficients per piece. ``truncation`` is the reported
    pointwise error of the pieces against the curve they approximate.
    """

    __slots__ = ('bounds', 'coefficients', 'truncation')

    def __init__(self, bounds, coefficients, truncation: float = 0.0, check: bool = True):
        bounds = np.array(bounds, dtype=float).reshape(-1, 2)
        coefficients = np.array(coefficients, dtype=float)
        if coefficients.ndim == 2:
            coefficients = coefficients[None]
        if coefficients.shape[0] != bounds.shape[0] or coefficients.shape[2] != 2:
            raise DomainError(f"Coefficient array {coefficients.shape} does not match {bounds.shape[0]} pieces")
        order = np.argsort(bounds[:, 0], kind='stable')
        self.bounds = bounds[order]
        self.coefficients = coefficients[order]
        self.truncation = float(truncation)
        self.bounds.setflags(write=False)
        self.coefficients.setflags(write=False)
        if check:
            self._validate(1e-9 + 2.0 * self.truncation)

    def _validate(self, tolerance: float) -> None:
        lows, highs = self.bounds[:, 0], self.bounds[:, 1]
        if abs(lows[0] + 1.0) > 1e-12 or abs(highs[-1] - 1.0) > 1e-12:
            raise DomainError(f"Pieces must cover [−1, 1], got [{lows[0]}, {highs[-1]}]")
        if np.any(highs <= lows):
            raise DomainError("Every piece needs a nonempty domain")
        if np.any(np.abs(highs[:-1] - lows[1:]) > 1e-12):
            raise DomainError("Pieces must meet at shared endpoints")
        if len(self) > 1:
            right = self.coefficients[:-1].sum(axis=1)
            signs = (-1.0) ** np.arange(self.degree + 1)
            left = np.einsum('j,pjc->pc', signs, self.coefficients[1:])
            gap = float(np.linalg.norm(right - left, axis=-1).max())
            if gap > tolerance:
                raise DomainError(f"Adjacent pieces disagree by {gap:.3e} at a shared endpoint")

    @classmethod
    def from_polynomial(cls, coefficients) -> 'CurveJet':
        """γ(t) = Σ c_j t^j on [−1, 1]; ``coefficients`` has shape (r+1, 2)."""
        return cls([[-1.0, 1.0]], np.asarray(coefficients, dtype=float)[None])

    @classmethod
    def segment(cls, x, v, degree: Optional[int] = None) -> 'CurveJet':
        """The straight segment t ↦ x + t·v."""
        degree = degree or lab_setting('CURVE_DEGREE')
        coefficients = np.zeros((degree + 1, 2))
        coefficients[0] = x
        coefficients[1] = v
        return cls.from_polynomial(coefficients)

    @classmethod
    def from_pieces(cls, pieces: Sequence[Tuple[float, float, Sequence[float]]]) -> 'CurveJet':
        """
        Build a curve from (low, high, flat coefficients) triples.

        The flat list is c0x c0y c1x c1y ... for the polynomial in the global
        parameter t; it is re-expanded around the centre of each piece.
        """
        if not pieces:
            raise DomainError("A curve needs at least one piece")
        degrees = {len(flat) for _, _, flat in pieces}
        if len(degrees) != 1 or next(iter(degrees)) % 2 or next(iter(degrees)) < 4:
            raise DomainError("Every piece needs the same even number (≥ 4) of coefficients")
        bounds = np.array([[low, high] for low, high, _ in pieces], dtype=float)
        global_coefficients = np.array([np.reshape(flat, (-1, 2)) for _, _, flat in pieces], dtype=float)
        mids = bounds.mean(axis=1)
        halves = 0.5 * (bounds[:, 1] - bounds[:, 0])
        return cls(bounds, _compose_linear(global_coefficients, mids, halves))

    @classmethod
    def from_piece_file(cls, path) -> 'CurveJet':
        """
        Read one piece per line: ``low high c0x c0y c1x c1y ...``.

        Blank lines and lines starting with ``#`` are skipped.
        """
        pieces = []
        try:
            lines = Path(path).read_text().splitlines()
        except OSError as exc:
            raise DomainError(f"Cannot read curve file {path}: {exc}") from None
        for number, line in enumerate(lines, start=1):
            line = line.strip()
            if not line or line.startswith('#'):
                continue
            try:
                values = [float(token) for token in line.replace(',', ' ').split()]
            except ValueError:
                raise DomainError(f"{path}:{number}: coefficients must be numbers") from None
            if len(values) < 6:
                raise DomainError(f"{path}:{number}: expected low, high and at least two 2D coefficients")
            pieces.append((values[0], values[1], values[2:]))
        logger.debug(f"Read {len(pieces)} curve pieces from {path}")
        return cls.from_pieces(pieces)

    def __len__(self) -> int:
        return self.bounds.shape[0]

    def __repr__(self):
        return f"CurveJet(pieces={len(self)}, degree={self.degree}, truncation={self.truncation:.2e})"

    @property
    def degree(self) -> int:
        return self.coefficients.shape[1] - 1

    @property
    def pieces(self) -> List[CurvePiece]:
        return [CurvePiece(float(low), float(high), coefficients)
                for (low, high), coefficients in zip(self.bounds, self.coefficients)]

    @property
    def half_lengths(self) -> np.ndarray:
        return 0.5 * (self.bounds[:, 1] - self.bounds[:, 0])

    def _locate(self, t: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        t = np.asarray(t, dtype=float)
        index = np.clip(np.searchsorted(self.bounds[:, 1], t, side='left'), 0, len(self) - 1)
        mids = self.bounds[index].mean(axis=-1)
        return index, (t - mids) / self.half_lengths[index]

    def derivative(self, t, s: int = 0) -> np.ndarray:
        """s-th derivative at parameters ``t``; shape ``t.shape + (2,)``."""
        index, u = self._locate(t)
        coefficients = self.coefficients[index]
        if s:
            coefficients = P.polyder(coefficients, m=s, axis=-2) if s <= self.degree else np.zeros_like(coefficients[..., :1, :])
        result = np.zeros(np.shape(u) + (2,))
        for j in range(coefficients.shape[-2] - 1, -1, -1):
            result = result * u[..., None] + coefficients[..., j, :]
        return result / (self.half_lengths[index] ** s)[..., None]

    def evaluate(self, t) -> np.ndarray:
        return self.derivative(t, 0)

    def derivative_bounds(self, s: int) -> np.ndarray:
        """Certified sup of ‖d^sγ‖ on each piece."""
        if s > self.degree:
            return np.zeros(len(self))
        norms = np.linalg.norm(self.coefficients, axis=-1)
        weights = np.array([_falling(j, s) if j >= s else 0 for j in range(self.degree + 1)], dtype=float)
        return norms @ weights / self.half_lengths ** s

    def derivative_bound(self, s: int) -> float:
        return float(self.derivative_bounds(s).max())

    def sample_parameters(self, count: int = SPEED_SAMPLES) -> np.ndarray:
        grid = np.linspace(-1.0, 1.0, count)
        return np.unique(np.concatenate([grid, self.bounds.ravel()]))

    def speeds(self, t=None) -> np.ndarray:
        t = self.sample_parameters() if t is None else np.asarray(t, dtype=float)
        return np.linalg.norm(self.derivative(t, 1), axis=-1)

    def speed_max(self) -> float:
        """Sampled ‖dγ‖∞, a lower estimate that includes t = 0 and every breakpoint."""
        return float(self.speeds().max())

    def length(self, low: float = -1.0, high: float = 1.0, samples: int = 1025) -> float:
        t = np.linspace(low, high, samples)
        return float(np.trapezoid(self.speeds(t), t))

    def compose(self, theta: AffineMap) -> 'CurveJet':
        """γ∘θ for an affine reparametrization θ of [−1, 1]."""
        if not theta.is_reparametrization():
            raise DomainError(f"{theta} does not map [−1, 1] into itself")
        if theta.rate == 0.0:
            raise DomainError("Reparametrization rate must be nonzero")
        low, high = theta.image
        keep = (self.bounds[:, 1] > low) & (self.bounds[:, 0] < high)
        bounds = self.bounds[keep]
        coefficients = self.coefficients[keep]
        clipped = np.stack([np.maximum(bounds[:, 0], low), np.minimum(bounds[:, 1], high)], axis=-1)
        new_bounds = np.sort((clipped - theta.center) / theta.rate, axis=-1)
        new_bounds[0 if theta.rate > 0 else -1, 0] = -1.0
        new_bounds[-1 if theta.rate > 0 else 0, 1] = 1.0
        new_mids = new_bounds.mean(axis=1)
        new_halves = 0.5 * (new_bounds[:, 1] - new_bounds[:, 0])
        mids = bounds.mean(axis=1)
        halves = 0.5 * (bounds[:, 1] - bounds[:, 0])
        alpha = (theta.center + theta.rate * new_mids - mids) / halves
        beta = theta.rate * new_halves / halves
        return CurveJet(new_bounds, _compose_linear(coefficients, alpha, beta), self.truncation,
                        check=False)

    def restrict(self, low: float, high: float) -> 'CurveJet':
        """γ restricted to [low, high], reparametrized over [−1, 1]."""
        return self.compose(AffineMap(0.5 * (low + high), 0.5 * (high - low)))

    def split(self, mask: np.ndarray) -> 'CurveJet':
        """Halve the pieces selected by ``mask``."""
        mask = np.asarray(mask, dtype=bool)
        bounds = [self.bounds[~mask]]
        coefficients = [self.coefficients[~mask]]
        chosen_bounds = self.bounds[mask]
        chosen = self.coefficients[mask]
        mids = chosen_bounds.mean(axis=1)
        bounds += [np.stack([chosen_bounds[:, 0], mids], axis=-1), np.stack([mids, chosen_bounds[:, 1]], axis=-1)]
        coefficients += [_compose_linear(chosen, -0.5, 0.5), _compose_linear(chosen, 0.5, 0.5)]
        return CurveJet(np.concatenate(bounds), np.concatenate(coefficients), self.truncation, check=False)

    def translate(self, offset) -> 'CurveJet':
        """γ + offset."""
        coefficients = self.coefficients.copy()
        coefficients[:, 0] += np.asarray(offset, dtype=float)
        return CurveJet(self.bounds, coefficients, self.truncation, check=False)


def wrap_curve(surface_map, gamma: CurveJet) -> CurveJet:
    """On the torus, shift γ by one integer vector so that γ(0) lies in [0, 1)²."""
    if not surface_map.torus:
        return gamma
    shift = np.floor(gamma.evaluate(0.0))
    if not shift.any():
        return gamma
    return gamma.translate(-shift)


@dataclass(frozen=True)
class Check:
    """A verdict with the margin by which it holds (negative when it fails)."""

    ok: bool
    margin: float
    detail: str = ''

    def __bool__(self):
        return self.ok


def is_bounded(gamma: CurveJet) -> Check:
    """
    Certified boundedness: max_{s=2..r} ‖d^sγ‖∞ ≤ (1/6)‖dγ‖∞.

    Higher derivatives use coefficient bounds and the speed is sampled, so a
    positive verdict holds for the exact polynomial.
    """
    speed = gamma.speed_max()
    higher = max((gamma.derivative_bound(s) for s in range(2, gamma.degree + 1)), default=0.0)
    margin = BOUNDED_RATIO * speed - higher
    return Check(margin >= -1e-12 * (1.0 + speed), margin)


def is_strongly_bounded(gamma: CurveJet, epsilon: float) -> Check:
    """Bounded with certified ‖dγ‖∞ ≤ ε."""
    bounded = is_bounded(gamma)
    if not bounded:
        return Check(False, bounded.margin, 'not bounded')
    speed_margin = epsilon - gamma.derivative_bound(1)
    return Check(speed_margin >= 0.0, min(bounded.margin, speed_margin),
                 '' if speed_margin >= 0.0 else 'speed exceeds epsilon')


def _require_bounded(gamma: CurveJet) -> None:
    check = is_bounded(gamma)
    if not check:
        raise PreconditionError(f"Curve is not bounded (margin {check.margin:.3e})")


def distortion(gamma: CurveJet) -> float:
    """max ‖dγ(t)‖ / ‖dγ(s)‖ over the sampled parameters; at most 3/2 for bounded curves."""
    _require_bounded(gamma)
    speeds = gamma.speeds(gamma.sample_parameters(4097))
    value = float(speeds.max() / speeds.min())
    if value > DISTORTION_BOUND + 1e-9:
        raise InvariantViolation(f"Bounded curve with distortion {value:.6f} > 3/2")
    return value


def oscillation(gamma: CurveJet) -> float:
    """Largest angle between dγ at the fastest sampled parameter and dγ elsewhere."""
    _require_bounded(gamma)
    t = gamma.sample_parameters(4097)
    velocity = gamma.derivative(t, 1)
    norms = np.linalg.norm(velocity, axis=-1)
    reference = velocity[int(np.argmax(norms))] / norms.max()
    cosines = np.clip(velocity @ reference / norms, -1.0, 1.0)
    value = float(np.arccos(cosines).max())
    if value > OSCILLATION_BOUND + 1e-9:
        raise InvariantViolation(f"Bounded curve oscillates by {value:.6f} rad > π/6")
    return value


def rescale(gamma: CurveJet, a: float, epsilon: Optional[float] = None) -> CurveJet:
    """
    γ_a = γ(a·).

    For a ≤ 2/3 a bounded input gives a bounded output, and a strongly
    ε-bounded input a strongly aε-bounded output; both are asserted.
    """
    if not 0.0 < a <= 1.0:
        raise DomainError(f"Rescaling factor must lie in (0, 1], got {a}")
    result = gamma.compose(AffineMap(0.0, a))
    if a <= 2.0 / 3.0 and is_bounded(gamma):
        check = is_bounded(result)
        if not check:
            raise InvariantViolation(f"Rescaling by {a} lost boundedness (margin {check.margin:.3e})")
        if epsilon is not None and is_strongly_bounded(gamma, epsilon):
            strong = is_strongly_bounded(result, a * epsilon)
            if not strong:
                raise InvariantViolation(f"Rescaling by {a} lost strong boundedness ({strong.detail})")
    return result


@dataclass(frozen=True)
class TechPiece:
    theta: AffineMap
    colour: str

    @property
    def covered(self) -> Tuple[float, float]:
        """Part of [−1, 1] this piece is responsible for covering."""
        if self.colour == 'blue':
            return self.theta.image
        third = abs(self.theta.rate) / 3.0
        return (self.theta.center - third, self.theta.center + third)


def subdivide_tech(gamma: CurveJet, epsilon: float) -> List[TechPiece]:
    """
    Cut a bounded curve with ‖dγ‖∞ ≥ ε into strongly ε-bounded pieces.

    Every piece has rate ρ = 2ε/(3·S) with S the certified speed bound. Two
    blue pieces sit at the ends; red pieces cover the rest with the middle
    thirds of their parameter intervals.

    Returns:
        Pieces ordered blue first, then red from left to right
    """
    _require_bounded(gamma)
    speed = gamma.speed_max()
    if speed < epsilon * (1.0 - 1e-12):
        raise PreconditionError(f"Speed {speed:.6g} is below epsilon {epsilon:.6g}")
    certified = max(gamma.derivative_bound(1), speed)
    rate = min(2.0 * epsilon / (3.0 * certified), 2.0 / 3.0)
    pieces = [TechPiece(AffineMap(-1.0 + rate, rate), 'blue'), TechPiece(AffineMap(1.0 - rate, rate), 'blue')]
    low, high = -1.0 + 2.0 * rate, 1.0 - 2.0 * rate
    if high > low:
        step = 2.0 * rate / 3.0
        count = max(1, math.ceil((high - low) / step - 1e-12))
        first, last = low + rate / 3.0, high - rate / 3.0
        centers = [0.5 * (low + high)] if count == 1 else np.linspace(first, last, count)
        pieces.extend(TechPiece(AffineMap(float(center), rate), 'red') for center in centers)
    reds = sum(piece.colour == 'red' for piece in pieces)
    if reds > 6.0 * (certified / epsilon + 1.0):
        raise InvariantViolation(f"{reds} red pieces exceed 6(‖dγ‖∞/ε + 1)")
    for piece in pieces:
        part = gamma.compose(piece.theta)
        if not is_strongly_bounded(part, epsilon):
            raise InvariantViolation(f"Piece {piece} is not strongly {epsilon}-bounded")
        if np.linalg.norm(part.derivative(0.0, 1)) < epsilon / 6.0:
            raise InvariantViolation(f"Piece {piece} is slower than ε/6 at its centre")
    logger.debug(f"Subdivided curve into {len(pieces)} pieces ({reds} red) at rate {rate:.4g}")
    return pieces


def tech_overlap(gamma: CurveJet, pieces: Sequence[TechPiece], epsilon: float,
                 centers: Optional[np.ndarray] = None) -> int:
    """Largest number of pieces meeting B(x, ε) over the sampled x ∈ γ_*."""
    centers = np.linspace(-1.0, 1.0, 257) if centers is None else np.asarray(centers, dtype=float)
    points = gamma.evaluate(centers)
    local = np.linspace(-1.0, 1.0, 33)
    meets = np.zeros((len(pieces), centers.size), dtype=bool)
    for index, piece in enumerate(pieces):
        images = gamma.evaluate(piece.theta(local))
        distances = np.linalg.norm(points[:, None, :] - images[None, :, :], axis=-1)
        meets[index] = distances.min(axis=1) < epsilon
    value = int(meets.sum(axis=0).max()) if pieces else 0
    if value > MAX_TECH_OVERLAP:
        raise InvariantViolation(f"{value} pieces meet one ε-ball")
    return value


def push(surface_map, gamma: CurveJet, max_depth: Optional[int] = None,
         relative: Optional[float] = None) -> CurveJet:
    """
    Taylor coefficients of f∘γ, piece by piece.

    Each piece is composed with the map's closed form as a jet of order r+1.
    The remainder of a piece is twice the larger of the (r+1)-th term and
    the sampled discrepancy at the Chebyshev nodes and endpoints; pieces
    whose remainder exceeds ``relative``·‖dγ‖∞ are halved and pushed again.
    The threshold never drops below the rounding level of the sampled
    values, and splitting stops at MAX_PUSH_PIECES pieces. On the torus
    both γ and its image are shifted by an integer vector into the unit
    square first.

    Raises:
        EscapeError: a sampled point of γ leaves a planar domain
        PreconditionError: a curve on the torus is longer than 1/2
    """
    max_depth = lab_setting('MAX_SPLIT_DEPTH') if max_depth is None else max_depth
    relative = lab_setting('TRUNCATION_RELATIVE') if relative is None else relative
    samples = gamma.evaluate(gamma.sample_parameters(129))
    if not np.all(surface_map.in_domain(samples)):
        raise EscapeError(f"{surface_map.name}: curve leaves the domain")
    if surface_map.torus and float(np.ptp(samples, axis=0).max()) > 0.5:
        raise PreconditionError("Curves on the torus must stay shorter than half the period")
    gamma = wrap_curve(surface_map, gamma)
    threshold = relative * gamma.speed_max()
    order = gamma.degree
    nodes = np.concatenate([CHEBYSHEV_NODES, [-1.0, 1.0]])
    accepted_bounds, accepted_coefficients = [], []
    remainder = 0.0
    current = gamma
    for depth in range(max_depth + 1):
        padded = np.zeros((len(current), order + 2, 2))
        padded[:, :order + 1] = current.coefficients
        jx = taylor.Jet(padded[:, :, 0].T)
        jy = taylor.Jet(padded[:, :, 1].T)
        fx, fy = surface_map.push_jets(jx, jy)
        pushed = np.stack([fx.coefficients[:order + 1].T, fy.coefficients[:order + 1].T], axis=-1)
        tail = np.hypot(fx.coefficients[order + 1], fy.coefficients[order + 1])
        powers = nodes[:, None] ** np.arange(order + 1)
        source = np.einsum('kj,pjc->pkc', powers, current.coefficients)
        exact = np.stack(surface_map.formula(source[..., 0], source[..., 1]), axis=-1)
        approx = np.einsum('kj,pjc->pkc', powers, pushed)
        discrepancy = np.linalg.norm(exact - approx, axis=-1).max(axis=1)
        magnitude = np.maximum(np.abs(exact).max(axis=(1, 2)), np.abs(source).max(axis=(1, 2)))
        rounding = ROUNDING_FACTOR * np.finfo(float).eps * np.maximum(magnitude, 1.0)
        piece_remainder = np.maximum(2.0 * np.maximum(tail, discrepancy), REMAINDER_FLOOR)
        good = piece_remainder <= np.maximum(max(threshold, REMAINDER_FLOOR), 2.0 * rounding)
        if depth == max_depth and not good.all():
            logger.warning(f"Push of {current} kept {int((~good).sum())} pieces above the truncation "
                           f"threshold after {max_depth} splits")
            good[:] = True
        elif len(current) + int((~good).sum()) > MAX_PUSH_PIECES and not good.all():
            logger.warning(f"Push of {current} stopped at {MAX_PUSH_PIECES} pieces with "
                           f"{int((~good).sum())} above the truncation threshold")
            good[:] = True
        accepted_bounds.append(current.bounds[good])
        accepted_coefficients.append(pushed[good])
        if good.any():
            remainder = max(remainder, float(piece_remainder[good].max()))
        if good.all():
            break
        leftover = CurveJet(current.bounds[~good], current.coefficients[~good], check=False)
        current = leftover.split(np.ones(len(leftover), dtype=bool))
    image = CurveJet(np.concatenate(accepted_bounds), np.concatenate(accepted_coefficients),
                     truncation=remainder, check=False)
    return wrap_curve(surface_map, image)


@dataclass
class GeometricCertificate:
    """Outcome of the geometric-time search at one point of σ."""

    verdict: bool
    theta: Optional[AffineMap] = None
    derivative: float = 0.0
    semi_length: float = 0.0
    distortion_ratio: float = 0.0
    iterates: List[CurveJet] = field(default_factory=list, repr=False)


def _strong_orbit(surface_map, gamma: CurveJet, n: int, epsilon: float) -> Optional[List[CurveJet]]:
    """[γ, f∘γ, ..., f^n∘γ] when all are strongly ε-bounded, else None."""
    orbit = [gamma]
    for k in range(n + 1):
        if not is_strongly_bounded(orbit[-1], epsilon):
            return None
        if k < n:
            try:
                orbit.append(push(surface_map, orbit[-1]))
            except (EscapeError, PreconditionError):
                return None
    return orbit


def geometric_time_certificate(surface_map, sigma: CurveJet, t0: float, n: int, alpha: float, epsilon: float,
                               rate_hint: Optional[float] = None) -> GeometricCertificate:
    """
    Look for θ_n(s) = t0 + ρ·s making γ_n = σ∘θ_n strongly (n, ε)-bounded with
    ‖d(f^n∘γ_n)(0)‖ ≥ (3/2)αε.

    Rates are tried from the largest one keeping θ_n inside [−1, 1], then
    ``rate_hint``, then by halving the largest; the first success wins.

    Args:
        surface_map: The map f
        sigma: The curve σ
        t0: Parameter of x on σ
        n: Candidate geometric time
        alpha: Expansion constant α
        epsilon: Scale ε
        rate_hint: Rate to try before bisecting

    Returns:
        GeometricCertificate; a false verdict when no witness exists
    """
    if not -1.0 <= t0 <= 1.0:
        raise PreconditionError(f"Parameter {t0} is not on the curve")
    widest = 1.0 - abs(t0)
    if widest <= 0.0:
        return GeometricCertificate(False)

    def attempt(rate):
        return _strong_orbit(surface_map, sigma.compose(AffineMap(t0, rate)), n, epsilon)

    rates = [widest]
    if rate_hint is not None and 0.0 < rate_hint < widest:
        rates.append(rate_hint)
    rates.extend(widest * 0.5 ** k for k in range(1, RATE_HALVINGS + 1))
    best_rate, best_orbit = 0.0, None
    for rate in rates:
        best_orbit = attempt(rate)
        if best_orbit is not None:
            best_rate = rate
            break
    if best_orbit is None:
        return GeometricCertificate(False)
    final = best_orbit[-1]
    derivative = float(np.linalg.norm(final.derivative(0.0, 1)))
    if derivative < 1.5 * alpha * epsilon:
        return GeometricCertificate(False, AffineMap(t0, best_rate), derivative)
    semi_length = min(final.length(0.0, 1.0), final.length(-1.0, 0.0))
    if semi_length < alpha * epsilon * (1.0 - 1e-9):
        raise InvariantViolation(f"Semi-length {semi_length:.4g} below αε = {alpha * epsilon:.4g}")
    ratio = orbit_distortion(best_orbit)
    if ratio > ORBIT_DISTORTION_BOUND + 1e-9:
        raise InvariantViolation(f"Distortion {ratio:.4f} along the geometric curve exceeds 9/4")
    return GeometricCertificate(True, AffineMap(t0, best_rate), derivative, semi_length, ratio, best_orbit)


def orbit_distortion(orbit: Sequence[CurveJet]) -> float:
    """
    Largest ratio e^{φ_{n−l}(F^l ŷ)} / e^{φ_{n−l}(F^l ẑ)} over sampled y, z and 0 ≤ l < n,
    read off the speeds of the iterated curves.
    """
    t = np.linspace(-1.0, 1.0, 257)
    final = orbit[-1].speeds(t)
    worst = 1.0
    for curve in orbit[:-1]:
        stretch = final / curve.speeds(t)
        worst = max(worst, float(stretch.max() / stretch.min()))
    return worst
