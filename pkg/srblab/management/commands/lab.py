import argparse
import sys

from django.core.management.base import BaseCommand, CommandError
from django.db import connections

from srblab.cli import parse_and_dispatch


class Command(BaseCommand):
    help = ("SRB-measure laboratory: density, folner, curves check, reptree build, lyap, entropy, "
            "contracting, srb run, replay. Run 'manage.py lab --help' for the flags.")

    def add_arguments(self, parser):
        parser.add_argument('lab_args', nargs=argparse.REMAINDER, help="Subcommand and its flags")

    def run_from_argv(self, argv):
        # global lab flags such as --seed would collide with Django's own parser
        code = parse_and_dispatch(argv[2:], stdout=self.stdout, stderr=self.stderr)
        connections.close_all()
        if code:
            sys.exit(code)

    def handle(self, *args, **options):
        code = parse_and_dispatch(list(options['lab_args']), stdout=self.stdout, stderr=self.stderr)
        if code:
            raise CommandError(f"lab exited with status {code}", returncode=code)
