import csv
import io
import json
import math
import tempfile
from pathlib import Path

from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, TestCase

from srblab.cli import EXIT_USAGE, parse_and_dispatch, parse_set_spec, split_globals
from srblab.exceptions import DomainError
from srblab.manifest import DIGEST_KEY, MANIFEST_NAME, manifest_digest
from srblab.models import RunManifest


def read_rows(path):
    with open(path, newline='', encoding='utf-8') as handle:
        return list(csv.DictReader(handle))


class SetSpecTests(SimpleTestCase):
    def test_named_sets(self):
        E, path = parse_set_spec('evens', 10)
        self.assertEqual(E.elements.tolist(), [2, 4, 6, 8, 10])
        self.assertIsNone(path)
        self.assertEqual(parse_set_spec('interval:3..5', 10)[0].elements.tolist(), [3, 4, 5])

    def test_blocks(self):
        E, _ = parse_set_spec('blocks:10^k..2*10^k', 30)
        self.assertEqual(E.elements.tolist(), [1, 2, 10, 11, 12, 13, 14, 15, 16, 17, 18, 19, 20])

    def test_bad_specs(self):
        for text in ('primes', 'blocks:10^k..2*3^k'):
            with self.subTest(text=text), self.assertRaises(DomainError):
                parse_set_spec(text, 10)
        with self.assertRaises(DomainError):
            parse_set_spec('evens', 0)

    def test_split_globals(self):
        flags, command = split_globals(['--seed', '3', '--out=x', 'lyap', '--map', 'cat'])
        self.assertEqual(flags, ['--seed', '3', '--out=x'])
        self.assertEqual(command, ['lyap', '--map', 'cat'])


class DispatchTests(TestCase):
    def setUp(self):
        self.workdir = tempfile.TemporaryDirectory()
        self.root = Path(self.workdir.name)
        self.stdout = io.StringIO()
        self.stderr = io.StringIO()

    def tearDown(self):
        self.workdir.cleanup()

    def run_lab(self, out, *argv):
        return parse_and_dispatch(['--out', str(self.root / out), *argv], stdout=self.stdout, stderr=self.stderr)

    def test_density_run_writes_outputs_and_ledger_row(self):
        self.assertEqual(self.run_lab('a', 'density', '--set-spec', 'evens', '--horizon', '100'), 0)
        summary = read_rows(self.root / 'a' / 'summary.csv')[0]
        self.assertEqual(float(summary['density']), 0.5)
        self.assertEqual(summary['exact'], '1/2')
        manifest = json.loads((self.root / 'a' / MANIFEST_NAME).read_text())
        self.assertEqual(manifest['argv'], ['density', '--set-spec', 'evens', '--horizon', '100'])
        self.assertEqual(manifest_digest(manifest), manifest[DIGEST_KEY])
        row = RunManifest.objects.get()
        self.assertEqual(row.subcommand, 'density')
        self.assertTrue(row.matches(manifest['outputs']))

    def test_density_report_columns(self):
        code = self.run_lab('a', 'density', '--set-spec', 'evens', '--horizon', '100', '--closure', '2',
                            '--report', 'csv')
        self.assertEqual(code, 0)
        rows = read_rows(self.root / 'a' / 'density.csv')
        self.assertEqual(list(rows[0]), ['n', 'd_n', 'd_boundary', 'd_closureM'])
        self.assertEqual(rows[-1]['n'], '100')
        self.assertEqual(float(rows[-1]['d_n']), 0.5)
        self.assertEqual(float(rows[-1]['d_boundary']), 0.5)
        self.assertEqual(float(rows[-1]['d_closureM']), 0.99)

    def test_density_closure_column_is_empty_without_closure(self):
        self.run_lab('a', 'density', '--set-spec', 'evens', '--horizon', '10')
        self.assertEqual({row['d_closureM'] for row in read_rows(self.root / 'a' / 'density.csv')}, {''})

    def test_usage_errors(self):
        self.assertEqual(self.run_lab('a', 'density', '--bogus'), EXIT_USAGE)
        self.assertEqual(self.run_lab('a'), EXIT_USAGE)
        self.assertIn('usage:', self.stderr.getvalue())
        self.assertFalse(RunManifest.objects.exists())

    def test_unknown_map_is_refused(self):
        self.assertEqual(self.run_lab('a', 'lyap', '--map', 'baker', '--n', '10'), 2)
        self.assertIn('DomainError', self.stderr.getvalue())

    def test_missing_config_is_refused(self):
        code = parse_and_dispatch(['--config', str(self.root / 'absent.cfg'), '--out', str(self.root / 'a'),
                                   'density', '--set-spec', 'evens', '--horizon', '10'],
                                  stdout=self.stdout, stderr=self.stderr)
        self.assertEqual(code, 2)

    def test_config_is_recorded(self):
        config = self.root / 'lab.cfg'
        config.write_text("# narrower window\nDENSITY_WINDOW=2\n")
        code = parse_and_dispatch(['--config', str(config), '--out', str(self.root / 'a'),
                                   'density', '--set-spec', 'odds', '--horizon', '50'],
                                  stdout=self.stdout, stderr=self.stderr)
        self.assertEqual(code, 0)
        manifest = json.loads((self.root / 'a' / MANIFEST_NAME).read_text())
        self.assertEqual(manifest['config'], {'DENSITY_WINDOW': '2'})

    def test_replay_reproduces_the_outputs(self):
        self.run_lab('a', 'density', '--set-spec', 'blocks:2^k..3*2^k', '--horizon', '200', '--closure', '4')
        code = self.run_lab('b', 'replay', str(self.root / 'a' / MANIFEST_NAME))
        self.assertEqual(code, 0)
        self.assertIn('identical', self.stdout.getvalue())
        self.assertEqual((self.root / 'a' / 'closure.csv').read_text(), (self.root / 'b' / 'closure.csv').read_text())

    def test_hand_edited_manifest_is_refused(self):
        self.run_lab('a', 'density', '--set-spec', 'evens', '--horizon', '20')
        path = self.root / 'a' / MANIFEST_NAME
        manifest = json.loads(path.read_text())
        manifest['seed'] = 7
        path.write_text(json.dumps(manifest))
        self.assertEqual(self.run_lab('b', 'replay', str(path)), 2)

    def test_replay_with_a_different_output_fails_the_invariant(self):
        self.run_lab('a', 'density', '--set-spec', 'evens', '--horizon', '20')
        path = self.root / 'a' / MANIFEST_NAME
        manifest = json.loads(path.read_text())
        manifest['outputs']['summary.csv'] = '0' * 64
        manifest[DIGEST_KEY] = manifest_digest(manifest)
        path.write_text(json.dumps(manifest))
        self.assertEqual(self.run_lab('b', 'replay', str(path)), 3)
        self.assertIn('summary.csv', self.stderr.getvalue())

    def test_thread_count_does_not_change_outputs(self):
        for out, threads in (('one', '1'), ('two', '2')):
            code = parse_and_dispatch(['--threads', threads, '--out', str(self.root / out),
                                       'lyap', '--map', 'cat', '--n', '50', '--grid', '8', '--b', '0.1'],
                                      stdout=self.stdout, stderr=self.stderr)
            self.assertEqual(code, 0)
        for name in ('exponents.csv', 'histogram.csv', 'summary.csv'):
            with self.subTest(name=name):
                self.assertEqual((self.root / 'one' / name).read_text(), (self.root / 'two' / name).read_text())

    def test_contracting_disc(self):
        code = self.run_lab('a', 'contracting', '--map', 'contraction:c=0.5', '--eps', '0.001',
                            '--n', '50', '--center', '0.3,0.2')
        self.assertEqual(code, 0)
        summary = read_rows(self.root / 'a' / 'summary.csv')[0]
        self.assertEqual(int(summary['count']), 4)
        profile = read_rows(self.root / 'a' / 'contracting.csv')
        self.assertEqual(list(profile[0]), ['k', 'diam'])
        self.assertEqual(len(profile), 50)
        times = read_rows(self.root / 'a' / 'E.csv')
        self.assertEqual([int(row['element']) for row in times], [1, 2, 3, 4])

    def test_curves_check_on_a_segment(self):
        code = self.run_lab('a', 'curves', 'check', '--segment', '0.1', '0.2', '0.3', '0', '--eps', '0.05')
        self.assertEqual(code, 0)
        row = read_rows(self.root / 'a' / 'curves.csv')[0]
        self.assertEqual(row['bounded'], 'true')
        self.assertEqual(row['strongly_bounded'], 'false')
        self.assertGreater(int(row['tech_pieces']), 0)
        self.assertIn('bounded: yes', self.stdout.getvalue())
        self.assertIn('strongly bounded at eps=0.05: no (speed exceeds epsilon)', self.stdout.getvalue())

    def test_curves_check_on_a_piece_file(self):
        path = self.root / 'curve.txt'
        path.write_text("-1 0 0.2 0.2 0.01 0.0\n0 1 0.2 0.2 0.01 0.0\n")
        code = self.run_lab('a', 'curves', 'check', '--spec', str(path), '--eps', '0.05')
        self.assertEqual(code, 0)
        row = read_rows(self.root / 'a' / 'curves.csv')[0]
        self.assertEqual(row['pieces'], '2')
        self.assertEqual(row['strongly_bounded'], 'true')
        manifest = json.loads((self.root / 'a' / MANIFEST_NAME).read_text())
        self.assertIn(str(path), manifest['input_digests'])

    def test_entropy_of_an_orbit(self):
        code = self.run_lab('a', 'entropy', '--map', 'cat', '--orbit-length', '2000', '--grid', '4', '--depth', '2')
        self.assertEqual(code, 0)
        cells = read_rows(self.root / 'a' / 'cells.csv')
        self.assertEqual(list(cells[0]), ['cell', 'weight'])
        self.assertAlmostEqual(sum(float(row['weight']) for row in cells), 1.0)
        self.assertTrue(all(0 <= int(row['cell']) < 16 for row in cells))
        summary = read_rows(self.root / 'a' / 'summary.csv')
        self.assertEqual(len(summary), 1)
        self.assertEqual(list(summary[0]), ['H', 'h_estimate'])
        self.assertLessEqual(float(summary[0]['H']), math.log(16) + 1e-9)
        self.assertEqual(len(read_rows(self.root / 'a' / 'rates.csv')), 3)

    def test_tree_with_an_automatic_scale(self):
        code = self.run_lab('a', 'reptree', 'build', '--map', 'cat', '--p', '1', '--depth', '1', '--eps', 'auto',
                            '--samples', '8')
        self.assertEqual(code, 0)
        rows = read_rows(self.root / 'a' / 'tree.csv')
        self.assertEqual(list(rows[0]), ['level', 'node_id', 'parent_id', 'color', 'k', 'kprime', 'rate', 'center'])
        self.assertEqual(self.run_lab('b', 'reptree', 'build', '--map', 'cat', '--p', '1', '--depth', '1',
                                      '--eps', 'large'), EXIT_USAGE)

    def test_srb_run_reports_largeness(self):
        code = self.run_lab('a', 'srb', 'run', '--map', 'identity', '--b', '0.1', '--p', '3', '--depth', '2',
                            '--horizon', '20', '--samples', '20', '--eps', '0.01')
        self.assertEqual(code, 0)
        self.assertEqual(read_rows(self.root / 'a' / 'summary.csv')[0]['verdict'], 'insufficient-data')
        diagnostics = read_rows(self.root / 'a' / 'diagnostics.csv')[0]
        self.assertIn('largeness_ok', diagnostics)
        self.assertEqual(diagnostics['largeness_ok'], '')

    def test_management_command_reports_the_exit_code(self):
        with self.assertRaises(CommandError) as raised:
            call_command('lab', 'density', '--set-spec', 'primes', '--horizon', '10',
                         stdout=self.stdout, stderr=self.stderr)
        self.assertEqual(raised.exception.returncode, 2)
