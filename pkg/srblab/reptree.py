"""
Reparametrization trees for g = f^p over a curve σ.

Each sampled parameter t of σ gets a label sequence k^n(t) = (k_i, k'_i)
read along its g-orbit, with x = g^{i−1}σ(t) and unit tangent v:

    k_i = ⌊log‖d_x g‖⌋,    k'_i = ⌊log‖d_x g(v)‖⌋

Level n of the tree holds affine maps θ with g^j∘σ∘θ strongly ε-bounded for
every j ≤ n. A red node answers for σ∘θ([−1/3, 1/3]), a blue one for all of
σ∘θ. Children of a node and a label are built in four steps: an affine cover
at the Taylor scale b, the sublevel set of the derivative polynomial found by
root isolation, an equal split fine enough for boundedness with step rate at
most 1/100, and the tech subdivision of the pieces that come out too fast.
Only labels realized by a sampled parameter are expanded.
"""

import logging
import math
import threading
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial import polynomial as P
from scipy import optimize

from . import taylor
from .cocycle import LargenessCheck, derivative_process, largeness_check
from .conf import lab_setting
from .curves import (IDENTITY, AffineMap, CurveJet, GeometricCertificate, _compose_linear,
                     geometric_time_certificate, is_bounded, is_strongly_bounded, push, subdivide_tech)
from .density import IntegerSet, density_upto
from .dynamics import IteratedMap, SurfaceMap, omega_q_many, projective_step_many
from .exceptions import (EscapeError, InvariantViolation, PreconditionError, TreeBuildError,
                         UncoveredPointError)
from .parallel import parallel_map

logger = logging.getLogger(__name__)

STEP_RATE = 1.0 / 100.0
SUBLEVEL_WIDTH = 3.0
WIDENED_WIDTH = 4.0
TAYLOR_MARGIN = 4.0
TAYLOR_GRID = 65
ROOT_GRID = 257
ROOT_TOLERANCE = 1e-12
MAX_REFINEMENTS = 20
MAX_PARTS = 2 ** 14
GEOMETRIC_ALPHA = 4.0 / 81.0
LARGENESS_BASE = 10.0
PARAM_TOLERANCE = 1e-12


def _unit_rows(vectors: np.ndarray) -> np.ndarray:
    return vectors / np.linalg.norm(vectors, axis=-1, keepdims=True)


def label_sequences(surface_map: SurfaceMap, p: int, sigma: CurveJet, params, depth: int) -> np.ndarray:
    """
    Labels (k_i, k'_i), i = 1..depth, for every parameter in ``params``.

    Args:
        surface_map: The map f
        p: Period, labels are read for g = f^p
        sigma: The seed curve
        params: Parameters on σ
        depth: Number of g-steps

    Returns:
        Integer array of shape (len(params), depth, 2)

    Raises:
        EscapeError: an orbit leaves a planar domain
    """
    g = surface_map if isinstance(surface_map, IteratedMap) and p == surface_map.p else IteratedMap(surface_map, p)
    params = np.atleast_1d(np.asarray(params, dtype=float))
    points = g.wrap(sigma.evaluate(params))
    directions = _unit_rows(sigma.derivative(params, 1))
    labels = np.empty((params.size, depth, 2), dtype=np.int64)
    for level in range(depth):
        if not np.all(g.in_domain(points)):
            raise EscapeError(f"{g.name}: sampled orbit left the domain at level {level}", iterate=level * g.p)
        jacobians = g.differential_many(points)
        image = np.einsum('nij,nj->ni', jacobians, directions)
        stretch = np.linalg.norm(image, axis=-1)
        labels[:, level, 0] = np.floor(np.log(np.linalg.norm(jacobians, ord=2, axis=(-2, -1))))
        labels[:, level, 1] = np.floor(np.log(stretch))
        points = g.forward_many(points)
        directions = image / stretch[:, None]
    return labels


def _label_key(rows: np.ndarray) -> Tuple[Tuple[int, int], ...]:
    return tuple((int(k), int(kprime)) for k, kprime in rows)


@dataclass
class RepTreeNode:
    level: int
    colour: str
    theta: AffineMap
    labels: Tuple[Tuple[int, int], ...] = ()
    parent_id: Optional[int] = None
    node_id: int = -1
    step_rate: float = 1.0
    samples: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64), repr=False)
    curves: Tuple[CurveJet, ...] = field(default=(), repr=False)

    @property
    def curve(self) -> CurveJet:
        """g^n∘σ∘θ."""
        return self.curves[-1]

    @property
    def label(self) -> Optional[Tuple[int, int]]:
        return self.labels[-1] if self.labels else None

    @property
    def hat(self) -> AffineMap:
        """θ for blue nodes, θ(·/3) for red ones."""
        if self.colour == 'red':
            return self.theta.compose(AffineMap(0.0, 1.0 / 3.0))
        return self.theta

    @property
    def covered(self) -> Tuple[float, float]:
        return self.hat.image

    def covers(self, t) -> np.ndarray:
        low, high = self.covered
        t = np.asarray(t, dtype=float)
        return (t >= low - PARAM_TOLERANCE) & (t <= high + PARAM_TOLERANCE)

    def as_row(self) -> Dict[str, object]:
        k, kprime = self.label if self.label else ('', '')
        return {
            'level': self.level,
            'node_id': self.node_id,
            'parent_id': '' if self.parent_id is None else self.parent_id,
            'color': self.colour,
            'k': k,
            'kprime': kprime,
            'rate': f"{self.theta.rate:.12g}",
            'center': f"{self.theta.center:.12g}",
        }


class ValenceRecord(NamedTuple):
    """Children of one parent for one label, against the units of the valence bound."""

    level: int
    parent_id: int
    label: Tuple[int, int]
    red: int
    blue: int
    red_unit: float
    blue_unit: float

    @property
    def ratio(self) -> float:
        return max(self.red / self.red_unit, self.blue / self.blue_unit)


@dataclass
class RepTree:
    g: IteratedMap
    sigma: CurveJet
    epsilon: float
    depth: int
    params: np.ndarray = field(repr=False)
    labels: np.ndarray = field(repr=False)
    levels: List[List[RepTreeNode]] = field(default_factory=list, repr=False)
    pruned: List[int] = field(default_factory=list)
    valence_records: List[ValenceRecord] = field(default_factory=list, repr=False)
    truncated: bool = False
    _owners: Dict[int, Dict[int, List[RepTreeNode]]] = field(default_factory=dict, repr=False)

    @property
    def surface_map(self) -> SurfaceMap:
        return self.g.base

    @property
    def p(self) -> int:
        return self.g.p

    @property
    def built_depth(self) -> int:
        return len(self.levels) - 1

    @property
    def nodes(self) -> List[RepTreeNode]:
        return [node for level in self.levels for node in level]

    @property
    def leaves(self) -> List[RepTreeNode]:
        return self.levels[-1]

    @property
    def valence(self) -> float:
        """Measured valence constant: worst child count over its bound unit."""
        return max((record.ratio for record in self.valence_records), default=0.0)

    @property
    def valence_ok(self) -> bool:
        return self.valence <= lab_setting('VALENCE_CONSTANT')

    def coverage(self, level: int) -> float:
        """Fraction of samples covered at ``level`` by a node with their label sequence."""
        if level == 0:
            return 1.0
        covered = np.zeros(self.params.size, dtype=bool)
        for node in self.levels[level]:
            covered[node.samples] = True
        return float(covered.mean())

    def leaf_bound(self, constant: Optional[float] = None) -> Dict[Tuple[Tuple[int, int], ...], Tuple[int, float]]:
        """Leaf count per label sequence against C^m·e^{Σ(k_i − k'_i)/(r−1)}."""
        constant = lab_setting('VALENCE_CONSTANT') if constant is None else constant
        exponent = 1.0 / max(self.sigma.degree - 1, 1)
        counts: Dict[Tuple[Tuple[int, int], ...], int] = {}
        for leaf in self.leaves:
            counts[leaf.labels] = counts.get(leaf.labels, 0) + 1
        return {labels: (count, constant ** len(labels) * math.exp(exponent * sum(k - kp for k, kp in labels)))
                for labels, count in counts.items()}

    def owners(self, level: int) -> Dict[int, List[RepTreeNode]]:
        """Nodes of ``level`` keyed by the indices of the samples they cover."""
        if level not in self._owners:
            table: Dict[int, List[RepTreeNode]] = {}
            for node in self.levels[level]:
                for index in node.samples.tolist():
                    table.setdefault(index, []).append(node)
            self._owners[level] = table
        return self._owners[level]

    def rows(self) -> List[Dict[str, object]]:
        return [node.as_row() for node in self.nodes]

    def summary(self) -> Dict[str, object]:
        return {
            'map': self.surface_map.spec,
            'p': self.p,
            'epsilon': self.epsilon,
            'depth': self.depth,
            'built_depth': self.built_depth,
            'nodes': len(self.nodes),
            'samples': int(self.params.size),
            'coverage': [self.coverage(level) for level in range(len(self.levels))],
            'pruned': list(self.pruned),
            'valence': self.valence,
            'valence_ok': self.valence_ok,
            'truncated': self.truncated,
        }


def _derivative_polynomial(g: SurfaceMap, curve: CurveJet) -> np.ndarray:
    """Coefficients (r, 2) of the degree r−1 Taylor polynomial of d(g∘curve) at 0."""
    index = int(np.clip(np.searchsorted(curve.bounds[:, 1], 0.0, side='left'), 0, len(curve) - 1))
    low, high = curve.bounds[index]
    mid, half = 0.5 * (low + high), 0.5 * (high - low)
    local = _compose_linear(curve.coefficients[index:index + 1], -mid / half, 1.0 / half)[0]
    fx, fy = g.push_jets(taylor.Jet(local[:, 0]), taylor.Jet(local[:, 1]))
    coefficients = np.stack([fx.coefficients, fy.coefficients], axis=-1)
    return coefficients[1:] * np.arange(1, coefficients.shape[0])[:, None]


def _taylor_holds(g: SurfaceMap, curve: CurveJet, polynomial: np.ndarray, kprime: int) -> bool:
    s = np.linspace(-1.0, 1.0, TAYLOR_GRID)
    exact = np.einsum('nij,nj->ni', g.differential_many(curve.evaluate(s)), curve.derivative(s, 1))
    error = float(np.linalg.norm(P.polyval(s, polynomial).T - exact, axis=-1).max())
    return error <= math.exp(kprime - TAYLOR_MARGIN) * curve.speed_max()


def sublevel_intervals(polynomial: np.ndarray, low: float, high: float) -> List[Tuple[float, float]]:
    """
    Closed intervals of [−1, 1] where low ≤ ‖P(s)‖ ≤ high.

    ‖P‖² is a polynomial of degree 2(r−1); the real roots of ‖P‖² − low² and
    ‖P‖² − high² are isolated by sign changes on a grid and refined with
    ``scipy.optimize.bisect``.
    """
    squared = P.polyadd(P.polymul(polynomial[:, 0], polynomial[:, 0]), P.polymul(polynomial[:, 1], polynomial[:, 1]))
    grid = np.linspace(-1.0, 1.0, ROOT_GRID)
    breaks = [-1.0, 1.0]
    for level in (low * low, high * high):
        shifted = P.polysub(squared, [level])
        values = P.polyval(grid, shifted)
        breaks.extend(grid[values == 0.0].tolist())
        for i in np.flatnonzero(values[:-1] * values[1:] < 0.0):
            breaks.append(optimize.bisect(lambda s, c=shifted: P.polyval(s, c), grid[i], grid[i + 1],
                                          xtol=ROOT_TOLERANCE))
    breaks = np.unique(breaks)
    intervals: List[Tuple[float, float]] = []
    for start, stop in zip(breaks[:-1], breaks[1:]):
        value = P.polyval(0.5 * (start + stop), squared)
        if not low * low <= value <= high * high:
            continue
        if intervals and abs(intervals[-1][1] - start) <= ROOT_TOLERANCE:
            intervals[-1] = (intervals[-1][0], float(stop))
        else:
            intervals.append((float(start), float(stop)))
    return intervals


def _inside(local: np.ndarray, theta: AffineMap) -> np.ndarray:
    return np.abs(local - theta.center) <= abs(theta.rate) + PARAM_TOLERANCE


class _Expansion(NamedTuple):
    children: List[RepTreeNode]
    pruned: int
    records: List[ValenceRecord]
    truncated: bool = False


class _BudgetExhausted(Exception):
    pass


class NodeBudget:
    """Nodes a level may still create, shared by the workers expanding it."""

    def __init__(self, remaining: int):
        self.remaining = int(remaining)
        self._lock = threading.Lock()

    @property
    def exhausted(self) -> bool:
        with self._lock:
            return self.remaining <= 0

    def take(self) -> None:
        with self._lock:
            if self.remaining <= 0:
                raise _BudgetExhausted()
            self.remaining -= 1


class _TreeBuilder:
    """Builds the children of single nodes; only the node budget changes between calls."""

    def __init__(self, g: IteratedMap, epsilon: float, params: np.ndarray, labels: np.ndarray, verify: bool):
        self.g = g
        self.epsilon = epsilon
        self.params = params
        self.labels = labels
        self.verify = verify
        self.taylor_constant = lab_setting('TAYLOR_CONSTANT')
        self.budget = NodeBudget(0)

    def expand(self, node: RepTreeNode) -> _Expansion:
        if self.budget.exhausted:
            return _Expansion([], 0, [], truncated=True)
        try:
            return self._expand(node)
        except _BudgetExhausted:
            return _Expansion([], 0, [], truncated=True)

    def _expand(self, node: RepTreeNode) -> _Expansion:
        hat = node.hat
        psi = node.curve if node.colour == 'blue' else node.curve.compose(AffineMap(0.0, 1.0 / 3.0))
        next_labels = self.labels[node.samples, node.level]
        children: List[RepTreeNode] = []
        records: List[ValenceRecord] = []
        pruned = 0
        for label in sorted({(int(k), int(kp)) for k, kp in next_labels}):
            members = node.samples[np.all(next_labels == label, axis=1)]
            for width in (SUBLEVEL_WIDTH, WIDENED_WIDTH):
                built, dropped = self._children_for_label(node, hat, psi, label, members, width)
                covered = np.zeros(members.size, dtype=bool)
                for child in built:
                    covered |= child.covers(self.params[members])
                if covered.all():
                    break
                logger.warning(f"Level {node.level + 1}, label {label}: {int((~covered).sum())} samples "
                               f"uncovered at sublevel width e^{width:g}")
            else:
                raise TreeBuildError(f"Coverage fails at level {node.level + 1} for label {label}")
            pruned += dropped
            children.extend(built)
            records.append(self._record(node, label, built))
        return _Expansion(children, pruned, records)

    def _record(self, node: RepTreeNode, label: Tuple[int, int], children: Sequence[RepTreeNode]) -> ValenceRecord:
        k, kprime = label
        spread = (k - kprime) / max(node.curve.degree - 1, 1)
        red = sum(child.colour == 'red' for child in children)
        return ValenceRecord(node.level + 1, node.node_id, label, red, len(children) - red,
                             math.exp(max(kprime, spread)), math.exp(spread))

    def _cover(self, psi: CurveJet, local: np.ndarray, label: Tuple[int, int]):
        """Affine cover at the Taylor scale, halving b until the Taylor bound holds."""
        k, kprime = label
        r = psi.degree
        b = min(1.0, (self.taylor_constant * math.exp(k - kprime + 4)) ** (-1.0 / max(r - 1, 1)))
        for _ in range(MAX_REFINEMENTS):
            count = math.ceil(1.0 / b - 1e-12)
            rate = 1.0 / count
            pieces = []
            for i in range(count):
                theta = AffineMap(-1.0 + rate * (2 * i + 1), rate)
                if not _inside(local, theta).any():
                    continue
                curve = psi.compose(theta)
                polynomial = _derivative_polynomial(self.g, curve)
                pieces.append((theta, curve, polynomial))
            if all(_taylor_holds(self.g, curve, polynomial, kprime) for _, curve, polynomial in pieces):
                return pieces
            b *= 0.5
        raise TreeBuildError(f"Taylor scale for label {label} did not settle after {MAX_REFINEMENTS} halvings")

    def _children_for_label(self, node: RepTreeNode, hat: AffineMap, psi: CurveJet, label: Tuple[int, int],
                            members: np.ndarray, width: float) -> Tuple[List[RepTreeNode], int]:
        _, kprime = label
        local = (self.params[members] - hat.center) / hat.rate
        hat_factor = 1.0 / 3.0 if node.colour == 'red' else 1.0
        children: List[RepTreeNode] = []
        pruned = 0
        for theta, curve, polynomial in self._cover(psi, local, label):
            a = math.exp(kprime) * curve.speed_max()
            inside_theta = _inside(local, theta)
            local_theta = (local - theta.center) / theta.rate
            for start, stop in sublevel_intervals(polynomial, a * math.exp(-width), a * math.exp(width)):
                hits = inside_theta & (local_theta >= start - PARAM_TOLERANCE) & (local_theta <= stop + PARAM_TOLERANCE)
                if not hits.any():
                    pruned += 1
                    continue
                parts, dropped = self._bounded_split(psi, local, hits, theta, start, stop, hat_factor)
                pruned += dropped
                for composite, part_hits, gamma in parts:
                    built, dropped = self._finish(node, label, composite, gamma, local, part_hits, members)
                    children.extend(built)
                    pruned += dropped
        return children, pruned

    def _bounded_split(self, psi, local, hits, theta, start, stop, hat_factor):
        half = 0.5 * (stop - start)
        parts_count = max(1, math.ceil(hat_factor * theta.rate * half / STEP_RATE - 1e-9))
        while parts_count <= MAX_PARTS:
            parts = []
            for i in range(parts_count):
                sub = AffineMap(start + half * (2 * i + 1) / parts_count, half / parts_count)
                composite = theta.compose(sub)
                part_hits = hits & _inside(local, composite)
                if part_hits.any():
                    parts.append((composite, part_hits, push(self.g, psi.compose(composite))))
            if all(is_bounded(gamma) for _, _, gamma in parts):
                return parts, parts_count - len(parts)
            parts_count *= 2
        raise TreeBuildError(f"No bounded split of a sublevel interval with at most {MAX_PARTS} parts")

    def _finish(self, node, label, composite, gamma, local, hits, members) -> Tuple[List[RepTreeNode], int]:
        """Turn one bounded part into blue or red children, tech-subdividing when it is too fast."""
        if is_strongly_bounded(gamma, self.epsilon):
            return [self._child(node, label, composite, 'blue', gamma, members[hits])], 0
        speed = gamma.speed_max()
        slow = speed < self.epsilon
        children, pruned = [], 0
        for piece in subdivide_tech(gamma, speed if slow else self.epsilon):
            colour = 'blue' if slow else piece.colour
            low, high = piece.theta.image if colour == 'blue' else piece.covered
            ends = sorted((float(composite(low)), float(composite(high))))
            piece_hits = hits & (local >= ends[0] - PARAM_TOLERANCE) & (local <= ends[1] + PARAM_TOLERANCE)
            if not piece_hits.any():
                pruned += 1
                continue
            children.append(self._child(node, label, composite.compose(piece.theta), colour,
                                        gamma.compose(piece.theta), members[piece_hits]))
        return children, pruned

    def _child(self, node, label, step: AffineMap, colour: str, gamma: CurveJet, samples: np.ndarray) -> RepTreeNode:
        self.budget.take()
        relative = AffineMap(0.0, 1.0 / 3.0).compose(step) if node.colour == 'red' else step
        curves = tuple(curve.compose(relative) for curve in node.curves) + (gamma,)
        child = RepTreeNode(level=node.level + 1, colour=colour, theta=node.theta.compose(relative),
                            labels=node.labels + (label,), parent_id=node.node_id,
                            step_rate=abs(relative.rate), samples=samples, curves=curves)
        if self.verify:
            self._verify(child)
        return child

    def _verify(self, child: RepTreeNode) -> None:
        if child.step_rate > STEP_RATE * (1.0 + 1e-9):
            raise InvariantViolation(f"Step map rate {child.step_rate:.4g} exceeds 1/100")
        for level, curve in enumerate(child.curves):
            check = is_strongly_bounded(curve, self.epsilon)
            if not check:
                raise InvariantViolation(f"Node curve at g-step {level} is not strongly {self.epsilon:g}-bounded "
                                         f"({check.detail})")
        if child.colour == 'red':
            speed = float(np.linalg.norm(child.curve.derivative(0.0, 1)))
            if speed < self.epsilon / 6.0 * (1.0 - 1e-9):
                raise InvariantViolation(f"Red node slower than ε/6 at its centre: {speed:.4g}")


def sample_parameters(count: int, seed: int = 0) -> np.ndarray:
    """One jittered parameter per cell of an equal split of [−1, 1]."""
    rng = np.random.default_rng(seed)
    return -1.0 + 2.0 * (np.arange(count) + rng.random(count)) / count


def build_tree(surface_map: SurfaceMap, p: int, sigma: CurveJet, epsilon: float, depth: int,
               params=None, samples: Optional[int] = None, seed: int = 0, threads=None,
               node_budget: Optional[int] = None, verify: bool = True) -> RepTree:
    """
    Grow the reparametrization tree of σ for g = f^p down to ``depth``.

    Args:
        surface_map: The map f
        p: Period
        sigma: Seed curve, strongly ε-bounded
        epsilon: Scale ε, below half the injectivity radius
        depth: Number of levels m
        params: Sampled parameters; ``samples`` jittered ones when omitted
        samples: Sample count, ``TREE_SAMPLES`` by default
        seed: Seed of the jitter
        threads: Worker count for the sibling loop
        node_budget: Node limit, ``NODE_BUDGET`` by default
        verify: Assert boundedness, step rates and red speeds on every node

    Returns:
        RepTree, flagged as truncated when the node budget stopped it early

    Raises:
        PreconditionError: σ is not strongly ε-bounded or ε is too large
        TreeBuildError: a sampled parameter is left uncovered
    """
    if p < 1 or depth < 0:
        raise PreconditionError(f"Need p ≥ 1 and depth ≥ 0, got p={p}, depth={depth}")
    if epsilon >= 0.5 * surface_map.injectivity_radius:
        raise PreconditionError(f"ε = {epsilon:g} is not below half the injectivity radius")
    check = is_strongly_bounded(sigma, epsilon)
    if not check:
        raise PreconditionError(f"Seed curve is not strongly {epsilon:g}-bounded ({check.detail})")
    node_budget = lab_setting('NODE_BUDGET') if node_budget is None else node_budget
    if params is None:
        params = sample_parameters(samples or lab_setting('TREE_SAMPLES'), seed)
    params = np.asarray(params, dtype=float)
    g = IteratedMap(surface_map, p)
    labels = label_sequences(g, p, sigma, params, depth)
    root = RepTreeNode(level=0, colour='blue', theta=IDENTITY, node_id=0,
                       samples=np.arange(params.size), curves=(sigma,))
    tree = RepTree(g=g, sigma=sigma, epsilon=epsilon, depth=depth, params=params, labels=labels,
                   levels=[[root]], pruned=[0])
    builder = _TreeBuilder(g, epsilon, params, labels, verify)
    count = 1
    logger.info(f"Building tree for {g.name} with ε={epsilon:g}, depth {depth}, {params.size} samples")
    for level in range(depth):
        builder.budget = NodeBudget(node_budget - count)
        expansions = parallel_map(builder.expand, tree.levels[-1], threads)
        if any(expansion.truncated for expansion in expansions):
            logger.warning(f"Node budget {node_budget} reached at level {level + 1}; tree truncated")
            tree.truncated = True
            break
        children = [child for expansion in expansions for child in expansion.children]
        for child in children:
            child.node_id = count
            count += 1
        tree.levels.append(children)
        tree.pruned.append(sum(expansion.pruned for expansion in expansions))
        tree.valence_records.extend(record for expansion in expansions for record in expansion.records)
        coverage = tree.coverage(level + 1)
        if coverage < 1.0:
            raise TreeBuildError(f"Coverage {coverage:.4f} < 1 at level {level + 1}")
        logger.info(f"Level {level + 1}: {len(children)} nodes "
                    f"({sum(child.colour == 'red' for child in children)} red), "
                    f"{tree.pruned[-1]} pruned")
    if not tree.valence_ok:
        logger.warning(f"Measured valence constant {tree.valence:.1f} exceeds the frozen "
                       f"{lab_setting('VALENCE_CONSTANT')}")
    return tree


# geometric times

@dataclass
class GeometricSet:
    t: float
    E: IntegerSet
    p: int
    alpha: float
    epsilon: float
    tau: float
    certificates: Dict[int, GeometricCertificate] = field(default_factory=dict, repr=False)
    largeness: Optional[LargenessCheck] = None

    def density(self, n: int) -> float:
        return density_upto(self.E, n)


def initial_states(sigma: CurveJet, params) -> np.ndarray:
    """Rows (x, y, angle) of σ(t) with its tangent line, for every parameter."""
    params = np.atleast_1d(np.asarray(params, dtype=float))
    points = sigma.evaluate(params)
    velocity = sigma.derivative(params, 1)
    angles = np.mod(np.arctan2(velocity[:, 1], velocity[:, 0]), math.pi)
    return np.column_stack([points, angles])


def _initial_state(sigma: CurveJet, t: float) -> np.ndarray:
    return initial_states(sigma, [t])[0]


def geometric_set(tree: RepTree, t: float, verify: bool = True, labels: Optional[np.ndarray] = None,
                  sample: Optional[int] = None) -> GeometricSet:
    """
    E_p(x) for x = σ(t): the multiples mp for which a red level-m node with the
    label sequence k^m(x) has x in σ∘θ([−1/3, 1/3]).

    With ``verify`` every member is certified as a geometric time (α = 4/81,
    ε the tree scale) and E_p(x) is checked to be (log 10/p)-large for the
    derivative cocycle.

    Raises:
        UncoveredPointError: x is covered by no node of matching labels at some level
        InvariantViolation: a member fails its certificate or largeness fails
    """
    t = float(t)
    if labels is None:
        labels = label_sequences(tree.g, tree.p, tree.sigma, [t], tree.built_depth)[0]
    members: Dict[int, RepTreeNode] = {}
    for level in range(1, tree.built_depth + 1):
        key = _label_key(labels[:level])
        if sample is None:
            matching = [node for node in tree.levels[level] if node.labels == key and node.covers(t)]
        else:
            matching = [node for node in tree.owners(level).get(sample, []) if node.labels == key]
        if not matching:
            raise UncoveredPointError(f"Parameter {t:.6g} is not covered at level {level}", level=level)
        red = [node for node in matching if node.colour == 'red']
        if red:
            members[level] = max(red, key=lambda node: abs(node.theta.rate))
    p = tree.p
    E = IntegerSet([level * p for level in members], horizon=max(tree.built_depth * p, 1))
    result = GeometricSet(t=t, E=E, p=p, alpha=GEOMETRIC_ALPHA, epsilon=tree.epsilon,
                          tau=math.log(LARGENESS_BASE) / p)
    if not verify:
        return result
    for level, node in members.items():
        certificate = geometric_time_certificate(tree.g, tree.sigma, t, level, GEOMETRIC_ALPHA, tree.epsilon,
                                                 rate_hint=2.0 / 3.0 * abs(node.theta.rate))
        if not certificate.verdict:
            raise InvariantViolation(f"Time {level * p} of parameter {t:.6g} fails its geometric certificate")
        result.certificates[level * p] = certificate
    if len(E) >= 2:
        result.largeness = largeness_check(_initial_state(tree.sigma, t), E, derivative_process(tree.surface_map),
                                           result.tau)
        if not result.largeness:
            raise InvariantViolation(f"E_p({t:.6g}) is not τ-large: margin {result.largeness.margin:.4g} "
                                     f"at {result.largeness.worst_pair}")
    return result


def geometric_sets(tree: RepTree, verify: bool = False, threads=None) -> List[GeometricSet]:
    """E_p for every sampled parameter of the tree, in sample order."""
    for level in range(1, tree.built_depth + 1):
        tree.owners(level)
    labels = tree.labels[:, :tree.built_depth]
    return parallel_map(lambda index: geometric_set(tree, tree.params[index], verify, labels[index], sample=index),
                        range(tree.params.size), threads)


def log_stretches(surface_map: SurfaceMap, sigma: CurveJet, params, n: int) -> np.ndarray:
    """log‖d_x f^k(v_x)‖ for k = 0..n along the orbits of σ(params); shape (len(params), n+1)."""
    params = np.asarray(params, dtype=float)
    states = initial_states(sigma, params)
    totals = np.zeros((params.size, n + 1))
    for k in range(n):
        if not np.all(surface_map.in_domain(states[:, :2])):
            raise EscapeError(f"{surface_map.name}: sampled orbit escaped at iterate {k}", iterate=k)
        states, phi = projective_step_many(surface_map, states)
        totals[:, k + 1] = totals[:, k] + phi
    return totals


@dataclass
class LebGeoDiagnostic:
    n_values: List[int]
    fractions: List[float]
    b: float
    beta: float
    burn_in: int = 1

    @property
    def nonincreasing(self) -> bool:
        tail = self.fractions[self.burn_in:]
        return all(later <= earlier + 1e-12 for earlier, later in zip(tail, tail[1:]))

    @property
    def log_slope(self) -> Optional[float]:
        """Slope of log(fraction) against n over the positive entries, when there are two."""
        points = [(n, math.log(f)) for n, f in zip(self.n_values, self.fractions) if f > 0.0]
        if len(points) < 2:
            return None
        xs, ys = zip(*points)
        return float(np.polyfit(xs, ys, 1)[0])

    def rows(self) -> List[Dict[str, object]]:
        return [{'n': n, 'fraction': f"{fraction:.8g}"} for n, fraction in zip(self.n_values, self.fractions)]


def lebgeo_diagnostic(tree: RepTree, b: float, beta: float, n_values: Optional[Sequence[int]] = None,
                      threads=None) -> LebGeoDiagnostic:
    """
    σ-length fraction of sampled x with d_n(E_p(x)) < β although ‖d_x f^n(v_x)‖ ≥ e^{nb}.

    Since E_p(x) ⊂ pℕ its density never exceeds 1/p, so β is only informative below 1/p.
    """
    horizon = tree.built_depth * tree.p
    n_values = list(n_values) if n_values is not None else [level * tree.p for level in range(1, tree.built_depth + 1)]
    if not n_values or max(n_values) > horizon or min(n_values) < 1:
        raise PreconditionError(f"n values must lie in [1, {horizon}]")
    if beta >= 1.0 / tree.p:
        logger.warning(f"β = {beta:g} is not below 1/p = {1.0 / tree.p:g}; every density is small")
    sets = geometric_sets(tree, verify=False, threads=threads)
    stretches = log_stretches(tree.surface_map, tree.sigma, tree.params, max(n_values))
    weights = np.linalg.norm(tree.sigma.derivative(tree.params, 1), axis=-1)
    weights = weights / weights.sum()
    fractions = []
    for n in n_values:
        sparse = np.array([result.density(n) < beta for result in sets])
        stretched = stretches[:, n] >= n * b
        fractions.append(float(weights[sparse & stretched].sum()))
    logger.info(f"Geometric density diagnostic over n={n_values}: {fractions}")
    return LebGeoDiagnostic(n_values=n_values, fractions=fractions, b=b, beta=beta)


# dynamical balls

def _bounded_parts(curve: CurveJet, max_depth: int) -> List[Tuple[AffineMap, CurveJet]]:
    """Halve the parameter interval until every part is bounded."""
    pending = [(IDENTITY, curve, 0)]
    parts = []
    while pending:
        theta, part, depth = pending.pop()
        if is_bounded(part):
            parts.append((theta, part))
            continue
        if depth >= max_depth:
            raise PreconditionError(f"Curve stays unbounded after {max_depth} halvings")
        for half in (AffineMap(-0.5, 0.5), AffineMap(0.5, 0.5)):
            pending.append((theta.compose(half), part.compose(half), depth + 1))
    return sorted(parts, key=lambda item: item[0].center)


@dataclass
class DynamicalBallCover:
    pieces: List[AffineMap]
    count: int
    bound: float
    omega: float
    covered: bool
    ball_samples: int

    @property
    def within_bound(self) -> bool:
        return self.count <= self.bound


def cover_dynamical_ball(surface_map: SurfaceMap, sigma: CurveJet, t0: float, q: int, n: int, epsilon: float,
                         samples: int = 2049) -> DynamicalBallCover:
    """
    Affine pieces θ with f^j∘σ∘θ strongly ε-bounded for j < n whose images
    cover the dynamical ball {y ∈ σ : d(f^j y, f^j x) < ε, j < n} of x = σ(t0).

    Pieces are pushed one step at a time, halved until bounded, cut by the
    tech subdivision when faster than ε and dropped once they miss the ball.
    The count is compared with B_q·C_r^{n/q}·e^{ω_q^n(x̂)/(r−1)}.
    """
    check = is_strongly_bounded(sigma, epsilon)
    if not check:
        raise PreconditionError(f"Seed curve is not strongly {epsilon:g}-bounded ({check.detail})")
    if n < 1 or q < 1:
        raise PreconditionError("Need n ≥ 1 and q ≥ 1")
    centre = surface_map.wrap(sigma.evaluate(t0))
    centres = [centre]
    for _ in range(n - 1):
        centres.append(surface_map.forward(centres[-1]))
    ticks = np.linspace(-1.0, 1.0, 33)
    pieces: List[Tuple[AffineMap, CurveJet]] = [(IDENTITY, sigma)]
    for j in range(n):
        kept = []
        for theta, curve in pieces:
            reach = surface_map.distance(centres[j], curve.evaluate(ticks)).min()
            if reach < epsilon + curve.speed_max() / 16.0:
                kept.append((theta, curve))
        pieces = kept
        if j == n - 1:
            break
        following = []
        for theta, curve in pieces:
            for sub, part in _bounded_parts(push(surface_map, curve), lab_setting('MAX_SPLIT_DEPTH')):
                if is_strongly_bounded(part, epsilon):
                    following.append((theta.compose(sub), part))
                    continue
                speed = part.speed_max()
                for piece in subdivide_tech(part, min(speed, epsilon)):
                    following.append((theta.compose(sub).compose(piece.theta), part.compose(piece.theta)))
        pieces = following
        logger.debug(f"Dynamical ball step {j + 1}: {len(pieces)} pieces")

    params = np.linspace(-1.0, 1.0, samples)
    points = surface_map.wrap(sigma.evaluate(params))
    in_ball = np.ones(samples, dtype=bool)
    for j in range(n):
        in_ball &= surface_map.distance(centres[j], points) < epsilon
        points = surface_map.forward_many(points)
    inside = np.zeros(samples, dtype=bool)
    for theta, _ in pieces:
        low, high = theta.image
        inside |= (params >= low - PARAM_TOLERANCE) & (params <= high + PARAM_TOLERANCE)
    covered = bool(np.all(inside[in_ball]))
    if not covered:
        raise InvariantViolation(f"{int((in_ball & ~inside).sum())} ball samples escape the cover")

    state = _initial_state(sigma, t0)[None, :]
    states = [state]
    for _ in range(n - 1):
        states.append(projective_step_many(surface_map, states[-1])[0])
    omega = float(omega_q_many(surface_map, np.concatenate(states), q).sum())
    r = sigma.degree
    bound = (lab_setting('ANNULUS_CONSTANT') * lab_setting('VALENCE_CONSTANT') ** (n / q)
             * math.exp(omega / max(r - 1, 1)))
    logger.info(f"Dynamical ball of {surface_map} at t={t0:g}, n={n}: {len(pieces)} pieces, bound {bound:.4g}")
    return DynamicalBallCover(pieces=[theta for theta, _ in pieces], count=len(pieces), bound=bound, omega=omega,
                              covered=covered, ball_samples=int(in_ball.sum()))


class LocalCoverRow(NamedTuple):
    level: int
    count: int
    bound: float


def local_cover_counts(tree: RepTree, t: float) -> List[LocalCoverRow]:
    """
    Level-n nodes whose σ∘θ meets the g-dynamical ball of x = σ(t), against
    C_r^n·e^{w^n(x̂)/(r−1)} with w the defect cocycle of g.
    """
    g = tree.g
    r = tree.sigma.degree
    centre = g.wrap(tree.sigma.evaluate(t))
    points = g.wrap(tree.sigma.evaluate(tree.params))
    state = _initial_state(tree.sigma, t)[None, :]
    in_ball = np.ones(tree.params.size, dtype=bool)
    defect = 0.0
    rows = []
    for level in range(1, tree.built_depth + 1):
        in_ball &= g.distance(centre, points) < tree.epsilon
        defect += float(omega_q_many(g, state, 1)[0])
        chosen = tree.params[in_ball]
        count = sum(bool(node.covers(chosen).any()) for node in tree.levels[level])
        bound = lab_setting('VALENCE_CONSTANT') ** level * math.exp(defect / max(r - 1, 1))
        rows.append(LocalCoverRow(level, count, bound))
        centre = g.forward(centre)
        points = g.forward_many(points)
        state = projective_step_many(g, state)[0]
    return rows


# scale

@dataclass
class ScaleChoice:
    epsilon: float
    rung: int
    grid: int
    refined_agrees: bool
    tried: List[Tuple[float, bool, bool]] = field(default_factory=list)


def _unit_directions(count: int) -> np.ndarray:
    angles = 2.0 * math.pi * np.arange(count) / count
    return np.stack([np.cos(angles), np.sin(angles)], axis=-1)


def jet_bound_holds(g: SurfaceMap, points: np.ndarray, epsilon: float, order: int, directions: int = 8) -> bool:
    """
    ‖d^s g^x_{2ε}‖ ≤ 3ε‖d_x g‖ for s = 1..r, with g^x_{2ε}(w) = g(x + 2εw),
    sampled on directional jets at w = 0 and on the unit circle.
    """
    units = _unit_directions(directions)
    offsets = np.concatenate([np.zeros((1, 2)), units])
    base = points[:, None, None, :] + 2.0 * epsilon * offsets[None, :, None, :]
    base = np.broadcast_to(base, (points.shape[0], offsets.shape[0], directions, 2))
    scale = np.broadcast_to(2.0 * epsilon * units[None, None, :, :], base.shape)
    jx = taylor.Jet.variable(base[..., 0], order, scale[..., 0])
    jy = taylor.Jet.variable(base[..., 1], order, scale[..., 1])
    fx, fy = g.push_jets(jx, jy)
    worst = np.zeros(points.shape[0])
    for s in range(1, order + 1):
        derivative = math.factorial(s) * np.hypot(fx.coefficients[s], fy.coefficients[s])
        worst = np.maximum(worst, derivative.reshape(points.shape[0], -1).max(axis=1))
    norms = np.linalg.norm(g.differential_many(points), ord=2, axis=(-2, -1))
    return bool(np.all(worst <= 3.0 * epsilon * norms * (1.0 + 1e-9)))


def continuity_holds(g: SurfaceMap, points: np.ndarray, epsilon: float, directions: int = 8) -> bool:
    """
    |log‖d_x g v‖ − log‖d_y g w‖| < 1 and |log‖d_x g‖ − log‖d_y g‖| < 1 for
    sampled (y, w) within ε of (x, v), the weakest direction of d_x g included.
    """
    jacobian = g.differential_many(points)
    _, _, vt = np.linalg.svd(jacobian)
    weak = np.arctan2(vt[:, 1, 1], vt[:, 1, 0])
    angles = np.concatenate([np.broadcast_to(math.pi * np.arange(directions) / directions,
                                             (points.shape[0], directions)), weak[:, None]], axis=1)
    shifts = np.concatenate([np.zeros((1, 2)), 0.5 * epsilon * _unit_directions(directions),
                             0.999 * epsilon * _unit_directions(directions)])
    neighbours = points[:, None, :] + shifts[None, :, :]
    neighbour_jacobian = g.differential_many(neighbours)
    norm_x = np.log(np.linalg.norm(jacobian, ord=2, axis=(-2, -1)))
    norm_y = np.log(np.linalg.norm(neighbour_jacobian, ord=2, axis=(-2, -1)))
    if np.any(np.abs(norm_y - norm_x[:, None]) >= 1.0):
        return False
    v = np.stack([np.cos(angles), np.sin(angles)], axis=-1)
    stretch_x = np.log(np.linalg.norm(np.einsum('nij,naj->nai', jacobian, v), axis=-1))
    for delta in (-0.999 * epsilon, 0.0, 0.999 * epsilon):
        w = np.stack([np.cos(angles + delta), np.sin(angles + delta)], axis=-1)
        stretch_y = np.log(np.linalg.norm(np.einsum('nyij,naj->nyai', neighbour_jacobian, w), axis=-1))
        if np.any(np.abs(stretch_y - stretch_x[:, None, :]) >= 1.0):
            return False
    return True


def _scale_holds(g: SurfaceMap, points: np.ndarray, epsilon: float, order: int) -> Tuple[bool, bool]:
    jets = jet_bound_holds(g, points, epsilon, order)
    return jets, jets and continuity_holds(g, points, epsilon)


def choose_scale(surface_map: SurfaceMap, p: int, grid: Optional[int] = None, floor: Optional[float] = None,
                 refine: int = 4) -> ScaleChoice:
    """
    Largest ε = (R_inj/2)·2^{−j}, j ≥ 1, meeting the jet bound and the
    continuity condition of g = f^p on a grid.

    The chosen rung is checked again on a grid ``refine`` times finer per
    axis; when that fails the ladder continues on the finer grid.

    Raises:
        PreconditionError: no admissible ε above the floor
    """
    if p < 1:
        raise PreconditionError(f"Period must be positive, got {p}")
    grid = grid or lab_setting('SCALE_GRID')
    floor = lab_setting('SCALE_FLOOR') if floor is None else floor
    order = lab_setting('CURVE_DEGREE')
    g = IteratedMap(surface_map, p)
    points = surface_map.grid(grid)
    tried = []
    refined_agrees = True
    epsilon, rung = 0.25 * surface_map.injectivity_radius, 1
    while epsilon >= floor:
        jets, continuity = _scale_holds(g, points, epsilon, order)
        tried.append((epsilon, jets, continuity))
        if continuity:
            if not refined_agrees or all(_scale_holds(g, surface_map.grid(grid * refine), epsilon, order)):
                logger.info(f"Scale for {g.name}: ε = {epsilon:.6g} (rung {rung})")
                return ScaleChoice(epsilon, rung, grid, refined_agrees, tried)
            logger.warning(f"ε = {epsilon:.6g} fails on the {grid * refine}² grid; continuing there")
            refined_agrees = False
            grid *= refine
            points = surface_map.grid(grid)
        epsilon *= 0.5
        rung += 1
    logger.error(f"No admissible scale for {g.name} above {floor:g}")
    raise PreconditionError(f"No admissible scale for {g.name} above {floor:g}")
