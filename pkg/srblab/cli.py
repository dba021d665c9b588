"""
Command-line surface of the laboratory.

``parse_and_dispatch`` validates the flags, layers the configuration, runs one
subcommand, writes its CSV outputs and the run manifest, and returns the
process exit code: 0 on success, 2 for refused operations, 3 for failed
invariant assertions and 64 for usage errors. The ``lab`` management command
is a thin wrapper around it.
"""

import argparse
import csv
import logging
import math
import re
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import cocycle, curves, density, dynamics, reptree, srb
from .conf import lab_setting, overrides, read_config_file
from .exceptions import DomainError, InvariantViolation, LabError, PreconditionError
from .manifest import (build_manifest, load_manifest, mismatched_outputs, output_digests, record_run,
                       sha256_file, write_manifest)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 64
GLOBAL_OPTIONS = ('--seed', '--threads', '--out', '--config')
DEFAULT_OUT = 'lab-out'
DEFAULT_SEED_CURVE = 'd:0.37'
GENERIC_POINT = (1.0 / math.pi, math.e / 10.0)

BLOCKS_SPEC = re.compile(r'^blocks:(?P<base>\d+)\^k\.\.(?P<factor>\d+)\*(?P<base2>\d+)\^k$')
INTERVAL_SPEC = re.compile(r'^interval:(?P<start>\d+)\.\.(?P<stop>\d+)$')


class UsageError(Exception):
    """Bad command line; the message holds the usage text."""


class LabArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}\n")


# input grammar

def parse_set_spec(text: str, horizon: int) -> Tuple[density.IntegerSet, Optional[Path]]:
    """
    Integer set from a set spec, truncated at ``horizon``.

    Specs: ``evens``, ``odds``, ``interval:a..b``, ``blocks:B^k..C*B^k``
    (the union over k ≥ 0 of [B^k, C·B^k]) and ``file:PATH`` (whitespace
    separated integers).

    Returns:
        The set and the input file, when there is one
    """
    if horizon < 1:
        raise DomainError(f"Horizon must be positive, got {horizon}")
    text = text.strip()
    if text == 'evens':
        return density.IntegerSet(np.arange(2, horizon + 1, 2), horizon), None
    if text == 'odds':
        return density.IntegerSet(np.arange(1, horizon + 1, 2), horizon), None
    match = INTERVAL_SPEC.match(text)
    if match:
        start, stop = int(match.group('start')), min(int(match.group('stop')), horizon)
        return density.IntegerSet(np.arange(max(start, 1), stop + 1), horizon), None
    match = BLOCKS_SPEC.match(text)
    if match:
        base, factor = int(match.group('base')), int(match.group('factor'))
        if base != int(match.group('base2')) or base < 2 or factor < 1:
            raise DomainError(f"Block spec needs one base B ≥ 2 and C ≥ 1, got {text!r}")
        blocks = []
        power = 1
        while power <= horizon:
            blocks.append(np.arange(power, min(factor * power, horizon) + 1))
            power *= base
        return density.IntegerSet(np.concatenate(blocks), horizon), None
    if text.startswith('file:'):
        path = Path(text[len('file:'):])
        try:
            values = [int(token) for token in path.read_text().split()]
        except OSError as exc:
            raise DomainError(f"Cannot read set file {path}: {exc}") from None
        except ValueError:
            raise DomainError(f"Set file {path} must hold integers") from None
        values = [value for value in values if 1 <= value <= horizon]
        return density.IntegerSet(values, horizon), path
    raise DomainError(f"Unknown set spec {text!r}")


def _pair(text: str) -> Tuple[float, float]:
    try:
        x, y = (float(value) for value in text.split(','))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected X,Y, got {text!r}") from None
    return x, y


def _threads(text: str):
    if text == 'auto':
        return text
    try:
        count = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N or auto, got {text!r}") from None
    if count < 1:
        raise argparse.ArgumentTypeError("thread count must be positive")
    return count


def _scale(text: str) -> Optional[float]:
    if text == 'auto':
        return None
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected auto or a positive value, got {text!r}") from None
    if not value > 0.0:
        raise argparse.ArgumentTypeError("scale must be positive")
    return value


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return 'true' if value else 'false'
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.12g}"
    return str(value)


# outputs

class Outputs:
    """CSV files of one run, written in a fixed format."""

    def __init__(self, out_dir: Path, stdout=None):
        self.out_dir = out_dir
        self.stdout = stdout or sys.stdout
        self.names: List[str] = []

    def echo(self, line: str):
        self.stdout.write(f"{line}\n")

    def write(self, name: str, rows: Sequence[Dict[str, object]], fieldnames: Optional[Sequence[str]] = None):
        fieldnames = list(fieldnames or (rows[0].keys() if rows else []))
        path = self.out_dir / name
        with open(path, 'w', newline='', encoding='utf-8') as handle:
            writer = csv.DictWriter(handle, fieldnames=fieldnames, lineterminator='\n')
            writer.writeheader()
            for row in rows:
                writer.writerow({key: _fmt(row.get(key, '')) for key in fieldnames})
        self.names.append(name)
        logger.debug(f"Wrote {len(rows)} rows to {path}")


# subcommands

def cmd_density(args, outputs: Outputs, inputs: Dict[str, str]):
    E, path = parse_set_spec(args.set_spec, args.horizon)
    if path is not None:
        inputs[str(path)] = sha256_file(path)
    ladder = density.checkpoint_ladder(1, args.horizon)
    edge = density.boundary(E)
    closed = density.closure_M(E, max(args.closure)) if args.closure else None
    rows = [{'n': n, 'd_n': density.density_upto(E, n), 'd_boundary': density.density_upto(edge, n),
             'd_closureM': '' if closed is None else density.density_upto(closed, n)} for n in ladder]
    outputs.write('density.csv', rows, ['n', 'd_n', 'd_boundary', 'd_closureM'])
    report = density.density_report(E, args.window, ladder)
    exact = density.density_upto(E, args.horizon, exact=True)
    summary = {'horizon': args.horizon, 'count': E.count_upto(args.horizon), 'density': float(exact),
               'exact': f"{exact.numerator}/{exact.denominator}", 'upper': report.upper, 'lower': report.lower,
               'closure_M': max(args.closure) if args.closure else ''}
    outputs.write('summary.csv', [summary])
    if args.closure:
        rows = []
        for M in sorted(set(args.closure)):
            closure = density.closure_M(E, M)
            rows.append({'M': M, 'count': closure.count_upto(args.horizon),
                         'density': density.density_upto(closure, args.horizon)})
        outputs.write('closure.csv', rows, ['M', 'count', 'density'])


def cmd_folner(args, outputs: Outputs, inputs: Dict[str, str]):
    E, path = parse_set_spec(args.set_spec, args.horizon)
    if path is not None:
        inputs[str(path)] = sha256_file(path)
    fill = density.folner_fill(E, args.M0, args.window)
    levels = [''] + fill.closure_levels
    outputs.write('folner.csv', [{'n': n, 'boundary_density': value, 'closure_level': level}
                                 for (n, value), level in zip(fill.boundary_densities, levels)],
                  ['n', 'boundary_density', 'closure_level'])
    outputs.write('F.csv', [{'element': int(value)} for value in fill.F.elements], ['element'])
    outputs.write('summary.csv', [{
        'final': fill.final, 'M0': fill.M0, 'observed_upper': fill.observed_upper,
        'intersection_density': fill.intersection_density,
        'boundary_count': len(density.boundary(fill.F)), 'size': len(fill.F),
    }])


def cmd_curves_check(args, outputs: Outputs, inputs: Dict[str, str]):
    if args.spec:
        gamma = curves.CurveJet.from_piece_file(args.spec)
        inputs[str(args.spec)] = sha256_file(args.spec)
    else:
        x, y, vx, vy = args.segment
        gamma = curves.CurveJet.segment(np.array([x, y]), np.array([vx, vy]))
    bounded = curves.is_bounded(gamma)
    strong = curves.is_strongly_bounded(gamma, args.epsilon)
    outputs.echo(f"bounded: {'yes' if bounded else 'no'} (margin {bounded.margin:.6g})")
    outputs.echo(f"strongly bounded at eps={args.epsilon:g}: {'yes' if strong else 'no (' + strong.detail + ')'}")
    row = {'pieces': len(gamma), 'degree': gamma.degree, 'speed_max': gamma.speed_max(),
           'bounded': bool(bounded), 'bounded_margin': bounded.margin,
           'strongly_bounded': bool(strong), 'distortion': '', 'oscillation': '',
           'tech_pieces': '', 'tech_red': '', 'tech_overlap': ''}
    if bounded:
        row['distortion'] = curves.distortion(gamma)
        row['oscillation'] = curves.oscillation(gamma)
        if gamma.speed_max() >= args.epsilon:
            pieces = curves.subdivide_tech(gamma, args.epsilon)
            row['tech_pieces'] = len(pieces)
            row['tech_red'] = sum(piece.colour == 'red' for piece in pieces)
            row['tech_overlap'] = curves.tech_overlap(gamma, pieces, args.epsilon)
    outputs.write('curves.csv', [row])


def _scale_and_seed(args, surface_map):
    epsilon = args.epsilon
    if epsilon is None:
        epsilon = reptree.choose_scale(surface_map, args.p).epsilon
    kind, offset = srb.parse_seed(args.seed_curve)
    return epsilon, srb.seed_curve(surface_map, kind, offset, epsilon)


def cmd_reptree_build(args, outputs: Outputs, inputs: Dict[str, str]):
    surface_map = dynamics.parse_map(args.map)
    epsilon, sigma = _scale_and_seed(args, surface_map)
    tree = reptree.build_tree(surface_map, args.p, sigma, epsilon, args.depth, samples=args.samples,
                              seed=args.seed, threads=args.threads, node_budget=args.node_budget)
    outputs.write('tree.csv', tree.rows(), ['level', 'node_id', 'parent_id', 'color', 'k', 'kprime', 'rate', 'center'])
    outputs.write('summary.csv', [tree.summary()])
    sets = reptree.geometric_sets(tree, verify=args.verify, threads=args.threads)
    horizon = max(tree.built_depth * tree.p, 1)
    outputs.write('geometric.csv', [{'sample': index, 't': result.t,
                                     'times': ' '.join(str(int(n)) for n in result.E.elements),
                                     'density': result.density(horizon)}
                                    for index, result in enumerate(sets)], ['sample', 't', 'times', 'density'])


def _generic_point(surface_map) -> np.ndarray:
    xmin, xmax, ymin, ymax = surface_map.sample_box
    return np.array([xmin + GENERIC_POINT[0] * (xmax - xmin), ymin + GENERIC_POINT[1] * (ymax - ymin)])


def cmd_lyap(args, outputs: Outputs, inputs: Dict[str, str]):
    surface_map = dynamics.parse_map(args.map)
    point = np.array(args.point) if args.point else _generic_point(surface_map)
    chi1 = dynamics.lyapunov_max(surface_map, point, args.n)
    qr1, qr2 = dynamics.lyapunov_spectrum(surface_map, point, args.n)
    outputs.write('summary.csv', [{'map': surface_map.spec, 'n': args.n, 'x': point[0], 'y': point[1],
                                   'chi1': chi1, 'qr_chi1': qr1, 'qr_chi2': qr2, 'sum': qr1 + qr2}])
    if args.grid:
        partition = srb.exponent_partition(surface_map, args.grid, args.n, args.b, threads=args.threads)
        points = surface_map.grid(args.grid)
        outputs.write('exponents.csv', [{'x': x, 'y': y, 'chi': chi}
                                        for (x, y), chi in zip(points, partition.exponents)], ['x', 'y', 'chi'])
        outputs.write('histogram.csv', partition.rows(), ['low', 'high', 'count'])
        outputs.write('modes.csv', [{'mode': mode, 'share': partition.mode_share(mode)} for mode in partition.modes]
                      + [{'mode': 'outside', 'share': partition.outside_mass}], ['mode', 'share'])


def cmd_entropy(args, outputs: Outputs, inputs: Dict[str, str]):
    surface_map = dynamics.parse_map(args.map)
    point = np.array(args.point) if args.point else _generic_point(surface_map)
    steps = args.burn + args.orbit_length
    states = cocycle.orbit(point[None, :], dynamics.surface_step(surface_map), steps)[args.burn + 1:, 0]
    measure = cocycle.WeightedPointMeasure(states)
    grid = args.grid or lab_setting('ENTROPY_GRID')
    depth = args.depth or lab_setting('ENTROPY_DEPTH')
    partition = cocycle.BoxPartition(surface_map.sample_box, grid, torus=surface_map.compact)
    masses = np.bincount(partition.assign_many(measure.states), weights=measure.weights, minlength=partition.size)
    outputs.write('cells.csv', [{'cell': int(cell), 'weight': masses[cell]} for cell in np.flatnonzero(masses)],
                  ['cell', 'weight'])
    rates = srb.entropy_estimates(surface_map, measure, grid, depth)
    finite = [rate for rate in rates if np.isfinite(rate)]
    outputs.write('summary.csv', [{'H': cocycle.static_entropy(measure, partition),
                                   'h_estimate': max(finite) if finite else math.nan}], ['H', 'h_estimate'])
    outputs.write('rates.csv', [{'resolution': grid * 2 ** index, 'depth': depth, 'rate': rate}
                                for index, rate in enumerate(rates)], ['resolution', 'depth', 'rate'])


def cmd_contracting(args, outputs: Outputs, inputs: Dict[str, str]):
    surface_map = dynamics.parse_map(args.map)
    centre = np.array(args.center) if args.center else _generic_point(surface_map)
    angles = 2.0 * math.pi * np.arange(args.points) / args.points
    U = np.vstack([centre, centre + args.radius * np.stack([np.cos(angles), np.sin(angles)], axis=-1)])
    profile = dynamics.contracting_profile(surface_map, surface_map.wrap(U), args.epsilon, args.N)
    outputs.write('contracting.csv', [{'k': k + 1, 'diam': diameter} for k, diameter in enumerate(profile.diameters)],
                  ['k', 'diam'])
    outputs.write('E.csv', [{'element': int(k)} for k in profile.E.elements], ['element'])
    outputs.write('summary.csv', [{'N': args.N, 'count': len(profile.E),
                                   'density': density.density_upto(profile.E, args.N), 'upper': profile.report.upper,
                                   'lower': profile.report.lower, 'max_exponent': float(profile.exponents.max())}])


def cmd_srb_run(args, outputs: Outputs, inputs: Dict[str, str]):
    surface_map = dynamics.parse_map(args.map)
    epsilon, sigma = _scale_and_seed(args, surface_map)
    candidate = srb.run_pipeline(surface_map, sigma, args.b, args.p, args.depth, args.q, args.horizon,
                                 epsilon=epsilon, samples=args.samples, seed=args.seed, threads=args.threads)
    outputs.write('candidate.csv', candidate.rows(), ['x', 'y', 'angle', 'weight'])
    outputs.write('summary.csv', [candidate.summary_row()], ['chi1', 'entropy', 'verdict', 'stability', 'delta_q'])
    diagnostics = {'chi2': candidate.chi2, 'n': candidate.n, 'gibbs_violation': candidate.gibbs_violation,
                   'psi_average': candidate.psi_average,
                   'psi_echo': '' if candidate.psi_echo is None else candidate.psi_echo,
                   'defect_x': candidate.defects.get('x', ''), 'defect_y': candidate.defects.get('y', ''),
                   'largeness_ok': '' if candidate.largeness_ok is None else candidate.largeness_ok,
                   'label': candidate.label, 'ruelle_margin': '', 'ruelle_backward': ''}
    raster_fields = ['x', 'y', 'label', 'distance', 'chi']
    if candidate.measure is not None:
        ruelle = srb.ruelle_check(candidate)
        diagnostics['ruelle_margin'] = ruelle.margin
        diagnostics['ruelle_backward'] = ruelle.backward_margin
        raster = srb.basin_raster(surface_map, [candidate], args.raster_grid, args.raster_n, threads=args.threads)
        outputs.write('raster.csv', raster.rows(), raster_fields)
    else:
        outputs.write('raster.csv', [], raster_fields)
        outputs.write('histogram.csv', candidate.histogram.rows(), ['low', 'high', 'count'])
    outputs.write('diagnostics.csv', [diagnostics])


def build_parser() -> argparse.ArgumentParser:
    parser = LabArgumentParser(prog='lab', description="SRB-measure laboratory")
    parser.add_argument('--seed', type=int, default=0, help="Seed of every random choice (default 0)")
    parser.add_argument('--threads', type=_threads, default=None, help="Worker count, N or auto")
    parser.add_argument('--out', default=DEFAULT_OUT, help="Output directory")
    parser.add_argument('--config', default=None, help="Flat key=value file overriding settings")
    commands = parser.add_subparsers(dest='command', required=True)

    def maps(sub):
        sub.add_argument('--map', required=True,
                         help="identity, cat, cat-perturbed:eps=, standard:K=, henon:a=,b=, rotation:theta=, "
                              "contraction:c=")

    sub = commands.add_parser('density', help="Asymptotic densities of an integer set")
    sub.add_argument('--set-spec', required=True)
    sub.add_argument('--horizon', type=int, required=True)
    sub.add_argument('--closure', type=int, action='append', help="Closure level M, repeatable")
    sub.add_argument('--window', type=int, default=None)
    sub.add_argument('--report', choices=['csv'], default='csv', help="Report format")
    sub.set_defaults(handler=cmd_density, subcommand='density')

    sub = commands.add_parser('folner', help="Følner fill of an integer set")
    sub.add_argument('--set-spec', required=True)
    sub.add_argument('--horizon', type=int, required=True)
    sub.add_argument('--M0', type=int, default=None)
    sub.add_argument('--window', type=int, default=None)
    sub.set_defaults(handler=cmd_folner, subcommand='folner')

    group = commands.add_parser('curves', help="Bounded-curve checks").add_subparsers(dest='action', required=True)
    sub = group.add_parser('check')
    source = sub.add_mutually_exclusive_group(required=True)
    source.add_argument('--spec', help="Piece file, one 'low high coefficients' line per piece")
    source.add_argument('--segment', type=float, nargs=4, metavar=('X', 'Y', 'VX', 'VY'))
    sub.add_argument('--eps', '--epsilon', dest='epsilon', type=float, required=True)
    sub.set_defaults(handler=cmd_curves_check, subcommand='curves check')

    group = commands.add_parser('reptree', help="Reparametrization trees").add_subparsers(dest='action', required=True)
    sub = group.add_parser('build')
    maps(sub)
    sub.add_argument('--p', type=int, required=True)
    sub.add_argument('--depth', type=int, required=True)
    sub.add_argument('--eps', '--epsilon', dest='epsilon', type=_scale, default=None, help="auto or a value")
    sub.add_argument('--seed-curve', default=DEFAULT_SEED_CURVE)
    sub.add_argument('--samples', type=int, default=None)
    sub.add_argument('--node-budget', type=int, default=None)
    sub.add_argument('--verify', action='store_true', help="Certify every geometric time")
    sub.set_defaults(handler=cmd_reptree_build, subcommand='reptree build')

    sub = commands.add_parser('lyap', help="Finite-horizon Lyapunov exponents")
    maps(sub)
    sub.add_argument('--n', type=int, required=True)
    sub.add_argument('--point', type=_pair, default=None)
    sub.add_argument('--grid', type=int, default=None, help="Also bin the exponents of a grid²")
    sub.add_argument('--b', type=float, default=0.0)
    sub.set_defaults(handler=cmd_lyap, subcommand='lyap')

    sub = commands.add_parser('entropy', help="Partition entropy rates of an orbit measure")
    maps(sub)
    sub.add_argument('--orbit-length', '--n', dest='orbit_length', type=int, required=True)
    sub.add_argument('--point', type=_pair, default=None)
    sub.add_argument('--burn', type=int, default=100)
    sub.add_argument('--grid', type=int, default=None)
    sub.add_argument('--depth', type=int, default=None)
    sub.set_defaults(handler=cmd_entropy, subcommand='entropy')

    sub = commands.add_parser('contracting', help="Times at which a small disc is not contracted")
    maps(sub)
    sub.add_argument('--eps', '--epsilon', dest='epsilon', type=float, required=True)
    sub.add_argument('--N', '--n', dest='N', type=int, required=True)
    sub.add_argument('--center', type=_pair, default=None)
    sub.add_argument('--radius', type=float, default=0.01)
    sub.add_argument('--points', type=int, default=16)
    sub.set_defaults(handler=cmd_contracting, subcommand='contracting')

    group = commands.add_parser('srb', help="SRB candidates").add_subparsers(dest='action', required=True)
    sub = group.add_parser('run')
    maps(sub)
    sub.add_argument('--b', type=float, required=True)
    sub.add_argument('--p', type=int, required=True)
    sub.add_argument('--q', type=int, default=1)
    sub.add_argument('--depth', type=int, required=True)
    sub.add_argument('--horizon', type=int, default=200)
    sub.add_argument('--seed-curve', default=DEFAULT_SEED_CURVE)
    sub.add_argument('--eps', '--epsilon', dest='epsilon', type=_scale, default=None, help="auto or a value")
    sub.add_argument('--samples', type=int, default=None)
    sub.add_argument('--raster-grid', type=int, default=16)
    sub.add_argument('--raster-n', type=int, default=200)
    sub.set_defaults(handler=cmd_srb_run, subcommand='srb run')

    sub = commands.add_parser('replay', help="Re-run a manifest and compare output digests")
    sub.add_argument('manifest')
    sub.set_defaults(subcommand='replay')
    return parser


def split_globals(argv: Sequence[str]) -> Tuple[List[str], List[str]]:
    """Separate the leading global options from the subcommand tokens."""
    argv = list(argv)
    index = 0
    while index < len(argv):
        token = argv[index]
        if token in GLOBAL_OPTIONS:
            index += 2
        elif token.split('=', 1)[0] in GLOBAL_OPTIONS:
            index += 1
        else:
            break
    return argv[:index], argv[index:]


def _flags(args) -> Dict[str, object]:
    skip = {'handler', 'out', 'threads', 'config'}
    return {key: value for key, value in sorted(vars(args).items()) if key not in skip}


def _execute(args, command: Sequence[str], config: Dict[str, str], stdout) -> Dict:
    """Run one subcommand under ``config``; returns its manifest."""
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = Outputs(out_dir, stdout)
    inputs: Dict[str, str] = {}
    timings: Dict[str, float] = {}
    with overrides(config):
        logger.info(f"Running '{args.subcommand}' with seed {args.seed}")
        started = time.perf_counter()
        args.handler(args, outputs, inputs)
        timings['run'] = time.perf_counter() - started
        manifest = build_manifest(args.subcommand, command, _flags(args), args.seed, config, inputs,
                                  output_digests(out_dir, outputs.names), timings)
        write_manifest(out_dir, manifest)
        record_run(manifest, out_dir)
    stdout.write(f"{args.subcommand}: wrote {', '.join(sorted(outputs.names))} to {out_dir}\n")
    return manifest


def _replay(args, stdout) -> Dict:
    manifest = load_manifest(args.manifest)
    for path, digest in manifest.get('input_digests', {}).items():
        if not Path(path).exists() or sha256_file(path) != digest:
            raise PreconditionError(f"Input {path} changed since the recorded run")
    argv = ['--seed', str(manifest['seed']), '--out', args.out]
    if args.threads is not None:
        argv += ['--threads', str(args.threads)]
    replayed = build_parser().parse_args(argv + manifest['argv'])
    if replayed.subcommand == 'replay':
        raise PreconditionError("A replay manifest cannot be replayed")
    _execute(replayed, manifest['argv'], dict(manifest.get('config', {})), stdout)
    mismatched = mismatched_outputs(manifest, args.out)
    if mismatched:
        logger.error(f"Replay of {args.manifest} differs on {sorted(mismatched)}")
        raise InvariantViolation(f"Replay outputs differ from the manifest: {', '.join(sorted(mismatched))}")
    stdout.write(f"replay: {len(manifest['outputs'])} outputs identical to {args.manifest}\n")
    return manifest


def parse_and_dispatch(argv: Sequence[str], stdout=None, stderr=None) -> int:
    """
    Parse ``argv``, run the subcommand and write its outputs and manifest.

    Returns:
        Exit code: 0, 2 (refused), 3 (invariant failure) or 64 (usage)
    """
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv))
    except UsageError as exc:
        stderr.write(str(exc))
        return EXIT_USAGE
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.subcommand == 'replay':
            _replay(args, stdout)
            return EXIT_OK
        config = read_config_file(args.config) if args.config else {}
        _, command = split_globals(argv)
        _execute(args, command, config, stdout)
    except LabError as exc:
        logger.error(f"{args.subcommand} failed: {exc}")
        stderr.write(f"{type(exc).__name__}: {exc}\n")
        return exc.exit_code
    return EXIT_OK

