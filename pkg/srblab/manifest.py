"""
Run manifests.

Every command-line run writes ``manifest.json`` next to its outputs: the
subcommand, the command tokens, the seed, the layered configuration, input
and output digests and step timings. The file carries the sha256 of its own
canonical form so a hand-edited manifest is refused on replay. A copy goes to
the ``RunManifest`` table when the database is reachable.
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import Dict, Iterable, Mapping

from django.db import DatabaseError

from . import __version__
from .conf import lab_setting
from .exceptions import PreconditionError

logger = logging.getLogger(__name__)

MANIFEST_NAME = 'manifest.json'
DIGEST_KEY = 'manifest_sha256'


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as handle:
        for block in iter(lambda: handle.read(1 << 16), b''):
            digest.update(block)
    return digest.hexdigest()


def canonical_json(data: Mapping) -> str:
    return json.dumps(data, sort_keys=True, separators=(',', ':'), ensure_ascii=False)


def manifest_digest(manifest: Mapping) -> str:
    """sha256 of the canonical JSON of the manifest without its own digest."""
    body = {key: value for key, value in manifest.items() if key != DIGEST_KEY}
    return hashlib.sha256(canonical_json(body).encode('utf-8')).hexdigest()


def output_digests(out_dir, names: Iterable[str]) -> Dict[str, str]:
    out_dir = Path(out_dir)
    return {name: sha256_file(out_dir / name) for name in sorted(names)}


def build_manifest(subcommand: str, argv, flags: Mapping, seed: int, config: Mapping,
                   inputs: Mapping[str, str], outputs: Mapping[str, str], timings: Mapping[str, float]) -> Dict:
    manifest = {
        'subcommand': subcommand,
        'argv': list(argv),
        'flags': dict(flags),
        'seed': int(seed),
        'version': __version__,
        'config': {key: str(value) for key, value in config.items()},
        'input_digests': dict(inputs),
        'outputs': dict(outputs),
        'timings': {key: round(float(value), 6) for key, value in timings.items()},
    }
    manifest[DIGEST_KEY] = manifest_digest(manifest)
    return manifest


def write_manifest(out_dir, manifest: Mapping) -> Path:
    path = Path(out_dir) / MANIFEST_NAME
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2, ensure_ascii=False) + '\n', encoding='utf-8')
    logger.info(f"Manifest written to {path}")
    return path


def _compatible(version: str) -> bool:
    return version.split('.')[:2] == __version__.split('.')[:2]


def load_manifest(path) -> Dict:
    """
    Read and validate a manifest.

    Raises:
        PreconditionError: unreadable, tampered with, or written by an
            incompatible version
    """
    try:
        manifest = json.loads(Path(path).read_text(encoding='utf-8'))
    except (OSError, ValueError) as exc:
        raise PreconditionError(f"Cannot read manifest {path}: {exc}") from None
    for key in ('subcommand', 'argv', 'seed', 'version', 'outputs', DIGEST_KEY):
        if key not in manifest:
            raise PreconditionError(f"Manifest {path} is missing '{key}'")
    if manifest_digest(manifest) != manifest[DIGEST_KEY]:
        logger.error(f"Manifest {path} does not match its recorded digest")
        raise PreconditionError(f"Manifest {path} was modified after it was written")
    if not _compatible(manifest['version']):
        logger.error(f"Manifest version {manifest['version']} is incompatible with {__version__}")
        raise PreconditionError(f"Manifest version {manifest['version']} cannot be replayed by {__version__}")
    return manifest


def mismatched_outputs(manifest: Mapping, out_dir) -> Dict[str, str]:
    """Outputs whose digest differs from the manifest, with the observed digest ('' when missing)."""
    out_dir = Path(out_dir)
    mismatched = {}
    for name, expected in manifest['outputs'].items():
        path = out_dir / name
        observed = sha256_file(path) if path.exists() else ''
        if observed != expected:
            mismatched[name] = observed
    return mismatched


def record_run(manifest: Mapping, out_dir, exit_code: int = 0):
    """Save the ledger row; database trouble is logged and never fatal."""
    if not lab_setting('RECORD_RUNS'):
        return None
    from .models import RunManifest

    row = RunManifest.from_manifest(manifest, output_dir=out_dir)
    row.exit_code = exit_code
    try:
        row.save()
    except DatabaseError as exc:
        logger.warning(f"Run ledger unavailable, manifest kept on disk only: {exc}")
        return None
    logger.debug(f"Recorded run {row.pk}")
    return row
