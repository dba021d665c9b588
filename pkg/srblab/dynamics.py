"""
Surface diffeomorphisms and their tangent dynamics.

Built-in maps: the cat map on the torus (optionally perturbed by a shear),
the standard map on the torus, the Hénon map on a trapping box, planar
rotations and contractions, and the identity. Every map is given by one
closed-form formula that evaluates on floats, numpy arrays and ``Jet``
batches alike; differentials are closed form as well.

The module also holds the projective cocycle φ(x, v) = log‖d_xf(v)‖ with its
weights w and ω_q, Lyapunov and R(f) estimators, the matrix-cocycle sup
check, local volume growth of curves and almost-contracting profiles.
"""

import logging
import math
import re
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg, optimize

from . import taylor
from .exceptions import DomainError, EscapeError, InvariantViolation, PreconditionError

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi
RESCALE_EVERY = 32
CAT_MATRIX = np.array([[2.0, 1.0], [1.0, 1.0]])
CAT_EXPONENT = math.log((3.0 + math.sqrt(5.0)) / 2.0)


class SurfaceMap:
    """
    A diffeomorphism of the torus R²/Z² or of a planar trapping box.

    Subclasses implement ``formula``, ``inverse_formula`` and ``jacobian``.
    Points are arrays whose last axis has length 2; on the torus they are
    kept in [0, 1)² by ``forward`` while ``formula`` works in the covering
    plane, which is what curve jets need.
    """

    name = 'map'
    torus = True
    area_preserving = False
    box = (0.0, 1.0, 0.0, 1.0)

    def __init__(self, **params):
        self.params = {key: float(value) for key, value in params.items()}

    def __repr__(self):
        shown = ','.join(f"{key}={value:g}" for key, value in self.params.items())
        return f"{self.name}:{shown}" if shown else self.name

    @property
    def spec(self) -> str:
        return repr(self)

    @property
    def compact(self) -> bool:
        return self.torus

    @property
    def label(self) -> str:
        """Report label; planar maps break the compactness assumption."""
        return 'compact' if self.compact else 'non-compact demo'

    @property
    def injectivity_radius(self) -> float:
        if self.torus:
            return 0.5
        xmin, xmax, ymin, ymax = self.box
        return 0.5 * min(xmax - xmin, ymax - ymin)

    # closed forms, implemented by subclasses

    def formula(self, x, y):
        raise NotImplementedError

    def inverse_formula(self, x, y):
        raise NotImplementedError

    def jacobian(self, x, y) -> np.ndarray:
        raise NotImplementedError

    # evaluation

    def wrap(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        if self.torus:
            return np.mod(points, 1.0)
        return points

    def in_domain(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        if self.torus:
            return np.all(np.isfinite(points), axis=-1)
        xmin, xmax, ymin, ymax = self.box
        x, y = points[..., 0], points[..., 1]
        return (x >= xmin) & (x <= xmax) & (y >= ymin) & (y <= ymax)

    def check_domain(self, points: np.ndarray, iterate: int = 0, partial=None) -> None:
        if not np.all(self.in_domain(points)):
            raise EscapeError(f"{self.name}: orbit left the domain at iterate {iterate}", iterate=iterate,
                              partial=partial)

    def forward_many(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        x, y = self.formula(points[..., 0], points[..., 1])
        return self.wrap(np.stack([x, y], axis=-1))

    def inverse_many(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        x, y = self.inverse_formula(points[..., 0], points[..., 1])
        return self.wrap(np.stack([x, y], axis=-1))

    def differential_many(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return self.jacobian(points[..., 0], points[..., 1])

    def forward(self, point) -> np.ndarray:
        return self.forward_many(np.asarray(point, dtype=float))

    def inverse(self, point) -> np.ndarray:
        return self.inverse_many(np.asarray(point, dtype=float))

    def differential(self, point) -> np.ndarray:
        return self.differential_many(np.asarray(point, dtype=float))

    def push_jets(self, jx: taylor.Jet, jy: taylor.Jet) -> Tuple[taylor.Jet, taylor.Jet]:
        """Compose the map with a batch of curve jets, in the covering plane."""
        return self.formula(jx, jy)

    def displacement(self, origin: np.ndarray, target: np.ndarray) -> np.ndarray:
        """Shortest vector from ``origin`` to ``target`` (minimum image on the torus)."""
        delta = np.asarray(target, dtype=float) - np.asarray(origin, dtype=float)
        if self.torus:
            delta = delta - np.round(delta)
        return delta

    def distance(self, origin, target) -> np.ndarray:
        return np.linalg.norm(self.displacement(origin, target), axis=-1)

    def grid(self, resolution: int) -> np.ndarray:
        """Cell-centred grid of ``resolution``² points over the domain."""
        xmin, xmax, ymin, ymax = self.sample_box
        xs = xmin + (np.arange(resolution) + 0.5) * (xmax - xmin) / resolution
        ys = ymin + (np.arange(resolution) + 0.5) * (ymax - ymin) / resolution
        gx, gy = np.meshgrid(xs, ys, indexing='ij')
        return np.stack([gx.ravel(), gy.ravel()], axis=-1)

    @property
    def sample_box(self):
        """Region sampled by grids; the domain unless a subclass narrows it."""
        return self.box


def _matmul2(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.einsum('...ij,...jk->...ik', a, b)


def _jacobian_array(a, b, c, d) -> np.ndarray:
    a, b, c, d = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (a, b, c, d)))
    return np.stack([np.stack([a, b], axis=-1), np.stack([c, d], axis=-1)], axis=-2)


class IdentityMap(SurfaceMap):
    name = 'identity'
    area_preserving = True

    def formula(self, x, y):
        return x, y

    def inverse_formula(self, x, y):
        return x, y

    def jacobian(self, x, y):
        one = np.ones(np.shape(x))
        return _jacobian_array(one, 0.0 * one, 0.0 * one, one)


class CatMap(SurfaceMap):
    """(x, y) ↦ A·(x + (ε/2π)·sin 2πy, y) with A = [[2, 1], [1, 1]]."""

    name = 'cat'
    area_preserving = True

    def __init__(self, eps: float = 0.0):
        super().__init__(**({"eps": eps} if eps else {}))
        self.eps = float(eps)
        if self.eps:
            self.name = 'cat-perturbed'

    def formula(self, x, y):
        if self.eps:
            x = x + (self.eps / TWO_PI) * taylor.sin(TWO_PI * y)
        return 2.0 * x + y, x + y

    def inverse_formula(self, x, y):
        u, v = x - y, 2.0 * y - x
        if self.eps:
            u = u - (self.eps / TWO_PI) * np.sin(TWO_PI * v)
        return u, v

    def jacobian(self, x, y):
        shear = self.eps * np.cos(TWO_PI * np.asarray(y, dtype=float))
        one = np.ones(np.shape(x))
        return _jacobian_array(2.0 * one, 2.0 * shear + 1.0, one, shear + 1.0)


class StandardMap(SurfaceMap):
    """Chirikov standard map on the unit torus: y' = y + (K/2π) sin 2πx, x' = x + y'."""

    name = 'standard'
    area_preserving = True

    def __init__(self, K: float = 1.5):
        super().__init__(K=K)
        self.K = float(K)

    def formula(self, x, y):
        y_next = y + (self.K / TWO_PI) * taylor.sin(TWO_PI * x)
        return x + y_next, y_next

    def inverse_formula(self, x, y):
        u = x - y
        return u, y - (self.K / TWO_PI) * np.sin(TWO_PI * u)

    def jacobian(self, x, y):
        kick = self.K * np.cos(TWO_PI * np.asarray(x, dtype=float))
        one = np.ones(np.shape(kick))
        return _jacobian_array(1.0 + kick, one, kick, one)


class HenonMap(SurfaceMap):
    """(x, y) ↦ (1 − a x² + y, b x) on a declared trapping box."""

    name = 'henon'
    torus = False

    def __init__(self, a: float = 1.4, b: float = 0.3, box=(-3.0, 3.0, -3.0, 3.0)):
        super().__init__(a=a, b=b)
        self.a = float(a)
        self.b = float(b)
        if self.b == 0.0:
            raise DomainError("Hénon map needs b ≠ 0 to be invertible")
        self.box = tuple(float(v) for v in box)

    @property
    def sample_box(self):
        return (-1.5, 1.5, -0.45, 0.45)

    def formula(self, x, y):
        return 1.0 - self.a * x * x + y, self.b * x

    def inverse_formula(self, x, y):
        u = y / self.b
        return u, x - 1.0 + self.a * u * u

    def jacobian(self, x, y):
        x = np.asarray(x, dtype=float)
        one = np.ones(np.shape(x))
        return _jacobian_array(-2.0 * self.a * x, one, self.b * one, 0.0 * one)


class RotationMap(SurfaceMap):
    """Planar rotation by ``theta`` about the origin."""

    name = 'rotation'
    torus = False
    area_preserving = True

    def __init__(self, theta: float = 0.5, radius: float = 4.0):
        super().__init__(theta=theta)
        self.theta = float(theta)
        self.box = (-radius, radius, -radius, radius)

    @property
    def sample_box(self):
        half = self.box[1] / math.sqrt(2.0)
        return (-half, half, -half, half)

    def formula(self, x, y):
        c, s = math.cos(self.theta), math.sin(self.theta)
        return c * x - s * y, s * x + c * y

    def inverse_formula(self, x, y):
        c, s = math.cos(self.theta), math.sin(self.theta)
        return c * x + s * y, -s * x + c * y

    def jacobian(self, x, y):
        c, s = math.cos(self.theta), math.sin(self.theta)
        one = np.ones(np.shape(x))
        return _jacobian_array(c * one, -s * one, s * one, c * one)


class ContractionMap(SurfaceMap):
    """x ↦ c·x on the box [−1, 1]², a global sink at the origin."""

    name = 'contraction'
    torus = False

    def __init__(self, c: float = 0.5):
        super().__init__(c=c)
        self.c = float(c)
        if not 0.0 < self.c < 1.0:
            raise DomainError(f"Contraction factor must lie in (0, 1), got {self.c}")
        self.box = (-1.0, 1.0, -1.0, 1.0)

    def formula(self, x, y):
        return self.c * x, self.c * y

    def inverse_formula(self, x, y):
        return x / self.c, y / self.c

    def jacobian(self, x, y):
        one = np.ones(np.shape(x))
        return _jacobian_array(self.c * one, 0.0 * one, 0.0 * one, self.c * one)


class IteratedMap(SurfaceMap):
    """g = f^p for a base map f."""

    def __init__(self, base: SurfaceMap, p: int):
        if p < 1:
            raise DomainError(f"Period must be positive, got {p}")
        super().__init__()
        self.base = base
        self.p = int(p)
        self.name = f"{base.spec}^{p}"
        self.torus = base.torus
        self.box = base.box
        self.area_preserving = base.area_preserving

    @property
    def sample_box(self):
        return self.base.sample_box

    def formula(self, x, y):
        for _ in range(self.p):
            x, y = self.base.formula(x, y)
        return x, y

    def inverse_formula(self, x, y):
        for _ in range(self.p):
            x, y = self.base.inverse_formula(x, y)
        return x, y

    def jacobian(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        product = None
        for _ in range(self.p):
            step = self.base.jacobian(x, y)
            product = step if product is None else _matmul2(step, product)
            x, y = self.base.formula(x, y)
        return product


MAP_REGISTRY: Dict[str, Callable[..., SurfaceMap]] = {
    'identity': IdentityMap,
    'cat': CatMap,
    'cat-perturbed': lambda eps=0.1: CatMap(eps=eps),
    'standard': StandardMap,
    'henon': HenonMap,
    'rotation': RotationMap,
    'contraction': ContractionMap,
}

MAP_SPEC = re.compile(r'^(?P<name>[a-z-]+)(?::(?P<params>.*))?$')


def parse_map(text: str) -> SurfaceMap:
    """
    Build a map from ``name`` or ``name:key=value,...``.

    Examples: ``cat``, ``cat-perturbed:eps=0.1``, ``standard:K=1.5``,
    ``henon:a=1.4,b=0.3``.
    """
    match = MAP_SPEC.match(text.strip())
    if not match or match.group('name') not in MAP_REGISTRY:
        raise DomainError(f"Unknown map '{text}'; expected one of {', '.join(sorted(MAP_REGISTRY))}")
    params = {}
    if match.group('params'):
        for item in match.group('params').split(','):
            if '=' not in item:
                raise DomainError(f"Map parameter '{item}' is not key=value")
            key, value = item.split('=', 1)
            try:
                params[key.strip()] = float(value)
            except ValueError:
                raise DomainError(f"Map parameter {key}={value!r} is not a number") from None
    try:
        return MAP_REGISTRY[match.group('name')](**params)
    except TypeError as exc:
        raise DomainError(f"Bad parameters for map '{text}': {exc}") from None


# projective cocycle

def normalize_angle(angle):
    return np.mod(angle, math.pi)


@dataclass(frozen=True)
class ProjectivePoint:
    """Base point with a tangent line, the line given by its angle in [0, π)."""

    base: Tuple[float, float]
    angle: float

    def __post_init__(self):
        object.__setattr__(self, 'base', (float(self.base[0]), float(self.base[1])))
        object.__setattr__(self, 'angle', float(normalize_angle(self.angle)))

    @property
    def direction(self) -> np.ndarray:
        return np.array([math.cos(self.angle), math.sin(self.angle)])

    @property
    def state(self) -> np.ndarray:
        return np.array([self.base[0], self.base[1], self.angle])

    @classmethod
    def from_state(cls, state) -> 'ProjectivePoint':
        return cls((state[0], state[1]), state[2])


@dataclass(frozen=True)
class CocycleValue:
    phi: float
    w: float
    omega_q: Optional[float] = None
    q: Optional[int] = None


def project_step(surface_map: SurfaceMap, point: ProjectivePoint) -> Tuple[ProjectivePoint, CocycleValue]:
    """
    One step of the projective action F(x, [v]) = (f(x), [d_xf v]).

    Returns:
        The image point and the cocycle values φ = log‖d_xf v‖ and
        w = log‖d_xf‖ − φ for unit v
    """
    base = np.array(point.base)
    surface_map.check_domain(base)
    jacobian = surface_map.differential(base)
    image = jacobian @ point.direction
    phi = math.log(np.linalg.norm(image))
    w = math.log(np.linalg.norm(jacobian, 2)) - phi
    target = surface_map.forward(base)
    surface_map.check_domain(target, iterate=1)
    return ProjectivePoint(target, math.atan2(image[1], image[0])), CocycleValue(phi=phi, w=max(w, 0.0))


def projective_step_many(surface_map: SurfaceMap, states: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorised projective step on rows (x, y, angle); returns new rows and φ."""
    states = np.asarray(states, dtype=float)
    base = states[:, :2]
    jacobian = surface_map.differential_many(base)
    direction = np.stack([np.cos(states[:, 2]), np.sin(states[:, 2])], axis=-1)
    image = np.einsum('nij,nj->ni', jacobian, direction)
    phi = np.log(np.linalg.norm(image, axis=-1))
    moved = np.empty_like(states)
    moved[:, :2] = surface_map.forward_many(base)
    moved[:, 2] = normalize_angle(np.arctan2(image[:, 1], image[:, 0]))
    return moved, phi


def surface_step(surface_map: SurfaceMap) -> Callable[[np.ndarray], np.ndarray]:
    """Batch step on base points, for empirical measures on the surface."""
    return surface_map.forward_many


def projective_step(surface_map: SurfaceMap) -> Callable[[np.ndarray], np.ndarray]:
    """Batch step on (x, y, angle) rows, for empirical measures on ℙTM."""
    return lambda states: projective_step_many(surface_map, states)[0]


def derivative_generator(surface_map: SurfaceMap) -> Callable[[np.ndarray], np.ndarray]:
    """φ(x, v) = log‖d_xf v‖ on (x, y, angle) rows."""
    return lambda states: projective_step_many(surface_map, np.atleast_2d(states))[1]


# exponents

def _operator_norms(matrices: np.ndarray) -> np.ndarray:
    return np.linalg.norm(matrices, ord=2, axis=(-2, -1))


def lyapunov_max(surface_map: SurfaceMap, x, n: int) -> float:
    """
    Finite-horizon maximal exponent (1/n)·log‖d_xf^n‖.

    The accumulated product is rescaled every 32 steps and the logarithm of
    the scale is accumulated exactly, so long horizons do not overflow.

    Raises:
        EscapeError: when the orbit leaves a planar domain; ``partial`` holds
            the estimate up to that iterate
    """
    if n < 1:
        raise DomainError(f"Iterate count must be positive, got {n}")
    point = np.asarray(x, dtype=float)
    product = np.eye(2)
    log_scale = 0.0
    for k in range(n):
        product = surface_map.differential(point) @ product
        point = surface_map.forward(point)
        if not surface_map.in_domain(point):
            partial = (log_scale + math.log(np.linalg.norm(product, 2))) / (k + 1)
            raise EscapeError(f"{surface_map.name}: orbit escaped at iterate {k + 1}", iterate=k + 1, partial=partial)
        if (k + 1) % RESCALE_EVERY == 0:
            scale = np.linalg.norm(product, 2)
            product /= scale
            log_scale += math.log(scale)
    return (log_scale + math.log(np.linalg.norm(product, 2))) / n


def lyapunov_max_many(surface_map: SurfaceMap, points: np.ndarray, n: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Batch version of ``lyapunov_max``.

    Returns:
        (exponents, escaped) where escaped points carry NaN
    """
    points = np.array(points, dtype=float)
    count = points.shape[0]
    product = np.broadcast_to(np.eye(2), (count, 2, 2)).copy()
    log_scale = np.zeros(count)
    escaped = np.zeros(count, dtype=bool)
    for k in range(n):
        with np.errstate(over='ignore', invalid='ignore'):
            product = _matmul2(surface_map.differential_many(points), product)
            points = surface_map.forward_many(points)
        escaped |= ~surface_map.in_domain(points)
        points[escaped] = 0.5 * (np.array(surface_map.box[::2]) + np.array(surface_map.box[1::2]))
        product[escaped] = np.eye(2)
        if (k + 1) % RESCALE_EVERY == 0:
            scale = _operator_norms(product)
            product /= scale[:, None, None]
            log_scale += np.log(scale)
    exponents = (log_scale + np.log(_operator_norms(product))) / n
    exponents[escaped] = np.nan
    return exponents, escaped


def lyapunov_spectrum(surface_map: SurfaceMap, x, n: int) -> Tuple[float, float]:
    """Both exponents by QR re-orthogonalisation of the tangent frame at every step."""
    point = np.asarray(x, dtype=float)
    frame = np.eye(2)
    sums = np.zeros(2)
    for k in range(n):
        frame, upper = linalg.qr(surface_map.differential(point) @ frame)
        signs = np.sign(np.diag(upper))
        signs[signs == 0] = 1.0
        frame = frame * signs
        sums += np.log(np.abs(np.diag(upper)))
        point = surface_map.forward(point)
        if not surface_map.in_domain(point):
            raise EscapeError(f"{surface_map.name}: orbit escaped at iterate {k + 1}", iterate=k + 1,
                              partial=float(sums[0] / (k + 1)))
    return float(sums[0] / n), float(sums[1] / n)


def log_jacobian_many(surface_map: SurfaceMap, points: np.ndarray, n: int) -> np.ndarray:
    """(1/n)·log|det d_xf^n| for a batch of points."""
    points = np.array(points, dtype=float)
    total = np.zeros(points.shape[0])
    for _ in range(n):
        total += np.log(np.abs(np.linalg.det(surface_map.differential_many(points))))
        points = surface_map.forward_many(points)
    return total / n


@dataclass(frozen=True)
class REstimate:
    value: float
    coarse_value: float
    n: int
    grid: int

    def __float__(self):
        return self.value

    @property
    def refinement_gap(self) -> float:
        """Increase of the estimate from the coarse grid to the fine grid."""
        return self.value - self.coarse_value


def _sup_growth(surface_map: SurfaceMap, n: int, grid: int) -> float:
    points = surface_map.grid(grid)
    product = np.broadcast_to(np.eye(2), (points.shape[0], 2, 2)).copy()
    log_scale = np.zeros(points.shape[0])
    alive = np.ones(points.shape[0], dtype=bool)
    for k in range(n):
        product = _matmul2(surface_map.differential_many(points), product)
        points = surface_map.forward_many(points)
        alive &= surface_map.in_domain(points)
        if (k + 1) % RESCALE_EVERY == 0:
            scale = _operator_norms(product)
            product /= scale[:, None, None]
            log_scale += np.log(scale)
    if not alive.any():
        return 0.0
    growth = (log_scale + np.log(_operator_norms(product)))[alive]
    return max(0.0, float(growth.max()) / n)


def R_estimate(surface_map: SurfaceMap, n: int, grid: int) -> REstimate:
    """(1/n)·log⁺ max over a grid of ‖d_xf^n‖, with the value on a grid half as fine."""
    if n < 1 or grid < 2:
        raise DomainError("R_estimate needs n ≥ 1 and grid ≥ 2")
    value = _sup_growth(surface_map, n, grid)
    coarse = _sup_growth(surface_map, n, max(2, grid // 2))
    logger.debug(f"R estimate for {surface_map}: {value:.5f} (coarse {coarse:.5f})")
    return REstimate(value=value, coarse_value=coarse, n=n, grid=grid)


def omega_q_many(surface_map: SurfaceMap, states: np.ndarray, q: int) -> np.ndarray:
    """ω_q on (x, y, angle) rows: mean of log‖d_{f^k x} f^q‖ over k < q minus log‖d_xf v‖."""
    if q < 1:
        raise DomainError(f"q must be positive, got {q}")
    states = np.atleast_2d(np.asarray(states, dtype=float))
    points = states[:, :2]
    jacobians = []
    for k in range(2 * q - 1):
        jacobians.append(surface_map.differential_many(points))
        points = surface_map.forward_many(points)
        if not np.all(surface_map.in_domain(points)):
            raise EscapeError(f"{surface_map.name}: orbit escaped while evaluating ω_{q}", iterate=k + 1)
    total = np.zeros(states.shape[0])
    for k in range(q):
        product = jacobians[k]
        for j in range(k + 1, k + q):
            product = _matmul2(jacobians[j], product)
        total += np.log(_operator_norms(product))
    direction = np.stack([np.cos(states[:, 2]), np.sin(states[:, 2])], axis=-1)
    stretch = np.log(np.linalg.norm(np.einsum('nij,nj->ni', jacobians[0], direction), axis=-1))
    return total / q - stretch


def omega_q(surface_map: SurfaceMap, point: ProjectivePoint, q: int) -> float:
    """ω_q(x, v); equals w(x, v) for q = 1."""
    return float(omega_q_many(surface_map, point.state[None, :], q)[0])


@dataclass(frozen=True)
class CocycleSupCheck:
    direction_max: float
    norm_value: float
    gap: float
    bound: float


def matrix_cocycle_sup_check(sequence: Sequence[np.ndarray], directions: int = 360) -> CocycleSupCheck:
    """
    Compare (1/n)·log‖Aⁿ‖ with the best (1/n)·log‖Aⁿv‖ over a grid of directions.

    Aⁿ = A_n ⋯ A_1. The gap is nonnegative and at most
    −(1/n)·log cos(π/(2·directions)), the loss of a direction within half a
    grid step of the top singular direction.
    """
    if len(sequence) == 0:
        raise DomainError("Matrix sequence must be nonempty")
    product = np.eye(2)
    log_scale = 0.0
    for k, matrix in enumerate(sequence):
        product = np.asarray(matrix, dtype=float) @ product
        if (k + 1) % RESCALE_EVERY == 0:
            scale = np.linalg.norm(product, 2)
            product /= scale
            log_scale += math.log(scale)
    n = len(sequence)
    angles = np.arange(directions) * math.pi / directions
    vectors = np.stack([np.cos(angles), np.sin(angles)], axis=0)
    norm_value = (log_scale + math.log(np.linalg.norm(product, 2))) / n
    direction_max = (log_scale + float(np.log(np.linalg.norm(product @ vectors, axis=0)).max())) / n
    gap = norm_value - direction_max
    bound = -math.log(math.cos(math.pi / (2 * directions))) / n
    if gap < -1e-12 or gap > bound + 1e-12:
        raise InvariantViolation(f"Direction gap {gap:.3e} outside [0, {bound:.3e}]")
    return CocycleSupCheck(direction_max=direction_max, norm_value=norm_value, gap=gap, bound=bound)


def local_volume_growth(surface_map: SurfaceMap, sigma, t0: float, epsilon: float, n: int,
                        samples: int = 2049, rounds: int = 8) -> float:
    """
    (1/n)·log of the length of f^n(B(x, ε, n) ∩ σ_*) with x = σ(t0).

    The parameter window is sampled, points whose orbit leaves the ε-ball
    around the orbit of x within n steps are dropped, and the window zooms
    onto the survivors until enough of them remain. The length is measured
    as the polyline through the images of adjacent survivors.
    """
    if not -1.0 <= t0 <= 1.0:
        raise PreconditionError(f"Parameter {t0} is not on the curve")
    low, high = -1.0, 1.0
    reference = sigma.evaluate(np.array([t0]))[0]
    length = 0.0
    for _ in range(rounds):
        params = np.linspace(low, high, samples)
        points = sigma.evaluate(params)
        orbit = reference.copy()
        keep = np.ones(samples, dtype=bool)
        for _ in range(n):
            keep &= surface_map.distance(orbit, points) < epsilon
            points = surface_map.forward_many(points)
            orbit = surface_map.forward(orbit)
        kept = np.flatnonzero(keep)
        if kept.size == 0:
            centre = int(np.argmin(np.abs(params - t0)))
            span = (high - low) / samples
            low, high = max(-1.0, params[centre] - span), min(1.0, params[centre] + span)
            continue
        adjacent = np.flatnonzero(np.diff(kept) == 1)
        steps = surface_map.distance(points[kept[adjacent]], points[kept[adjacent] + 1])
        length = float(steps.sum())
        if kept.size >= samples // 4:
            break
        low = params[max(kept[0] - 1, 0)]
        high = params[min(kept[-1] + 1, samples - 1)]
    if length <= 0.0:
        return -math.inf
    return math.log(length) / n


@dataclass
class ContractingProfile:
    E: object
    report: object
    exponents: np.ndarray
    diameters: np.ndarray


def hull_diameter(surface_map: SurfaceMap, points: np.ndarray) -> float:
    differences = surface_map.displacement(points[:, None, :], points[None, :, :])
    return float(np.linalg.norm(differences, axis=-1).max())


def contracting_profile(surface_map: SurfaceMap, U: np.ndarray, epsilon: float, N: int) -> ContractingProfile:
    """
    Times k ∈ [1, N] at which diam f^k(U) > ε, with their densities and the
    exponents of the points of U at horizon N.
    """
    from .density import IntegerSet, density_report

    points = np.array(U, dtype=float)
    if points.ndim != 2 or points.shape[0] < 2:
        raise PreconditionError("Contracting profile needs at least two sample points")
    surface_map.check_domain(points)
    diameters = np.empty(N)
    current = points
    for k in range(N):
        current = surface_map.forward_many(current)
        surface_map.check_domain(current, iterate=k + 1)
        diameters[k] = hull_diameter(surface_map, current)
    E = IntegerSet(np.flatnonzero(diameters > epsilon) + 1, N)
    report = density_report(E)
    exponents, escaped = lyapunov_max_many(surface_map, points, N)
    if escaped.any():
        raise EscapeError(f"{surface_map.name}: sample escaped while measuring exponents")
    logger.info(f"Contracting profile: ♯E={len(E)} of {N}, upper density {report.upper:.4f}, "
                f"max exponent {float(exponents.max()):.4f}")
    return ContractingProfile(E=E, report=report, exponents=exponents, diameters=diameters)


@dataclass(frozen=True)
class PeriodicPoint:
    point: Tuple[float, float]
    period: int
    eigenvalues: Tuple[complex, complex]

    @property
    def is_source(self) -> bool:
        return all(abs(value) > 1.0 for value in self.eigenvalues)


def find_periodic_points(surface_map: SurfaceMap, max_period: int, seeds_per_axis: int = 8) -> List[PeriodicPoint]:
    """
    Periodic points of period ≤ ``max_period`` found by Newton solves of
    g(z) − z = 0 (minimum image on the torus) from a grid of seeds.
    """
    found: List[PeriodicPoint] = []
    seeds = surface_map.grid(seeds_per_axis)
    for period in range(1, max_period + 1):
        g = IteratedMap(surface_map, period)

        def residual(z):
            return surface_map.displacement(z, g.forward_many(np.asarray(z)))

        def jacobian(z):
            return g.differential_many(np.asarray(z)) - np.eye(2)

        for seed in seeds:
            with np.errstate(all='ignore'):
                try:
                    root, info, status, _ = optimize.fsolve(residual, seed, fprime=jacobian, full_output=True)
                except (ValueError, OverflowError, np.linalg.LinAlgError):
                    continue
            if status != 1 or not np.all(np.isfinite(root)):
                continue
            root = surface_map.wrap(root)
            if not surface_map.in_domain(root) or np.linalg.norm(residual(root)) > 1e-9:
                continue
            if any(surface_map.distance(root, np.array(known.point)) < 1e-6 for known in found):
                continue
            eigenvalues = np.linalg.eigvals(g.differential(root))
            found.append(PeriodicPoint((float(root[0]), float(root[1])), period,
                                       (complex(eigenvalues[0]), complex(eigenvalues[1]))))
    logger.debug(f"Found {len(found)} periodic points of period ≤ {max_period} for {surface_map}")
    return found


def find_periodic_sources(surface_map: SurfaceMap, max_period: int) -> List[PeriodicPoint]:
    """Periodic points whose differential has both eigenvalues outside the unit circle."""
    return [point for point in find_periodic_points(surface_map, max_period) if point.is_source]
