"""
Access to the laboratory constants.

Defaults live in ``settings.SRBLAB``. A run may layer a flat ``key=value``
file and command-line values on top; both go through ``overrides``.
"""

import logging
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, Iterator, Mapping

from django.conf import settings

from .exceptions import DomainError

logger = logging.getLogger(__name__)

_active: Dict[str, object] = {}


def lab_setting(key: str):
    """Return the current value of a laboratory constant."""
    key = key.upper()
    if key in _active:
        return _active[key]
    try:
        return settings.SRBLAB[key]
    except KeyError:
        raise DomainError(f"Unknown laboratory setting '{key}'") from None


def coerce_setting(key: str, raw) -> object:
    """Convert ``raw`` to the type of the default for ``key``."""
    key = key.upper()
    if key not in settings.SRBLAB:
        raise DomainError(f"Unknown laboratory setting '{key}'")
    default = settings.SRBLAB[key]
    if key == 'THREADS':
        if str(raw).strip().lower() == 'auto':
            return 'auto'
        default = 1
    if isinstance(raw, type(default)):
        return raw
    if isinstance(default, bool):
        return str(raw).strip().lower() in ('1', 'true', 'yes', 'on')
    try:
        return type(default)(raw)
    except (TypeError, ValueError):
        raise DomainError(f"Setting '{key}' expects {type(default).__name__}, got {raw!r}") from None


def read_config_file(path) -> Dict[str, str]:
    """
    Read a flat configuration file.

    One ``key=value`` pair per line; blank lines and lines starting with
    ``#`` are ignored. Nested sections are not supported.

    Args:
        path: File to read

    Returns:
        Mapping of upper-cased keys to raw string values
    """
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise DomainError(f"Cannot read config file {path}: {exc}") from None
    values: Dict[str, str] = {}
    for number, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith('#'):
            continue
        if '=' not in line:
            raise DomainError(f"{path}:{number}: expected key=value, got {line!r}")
        key, value = line.split('=', 1)
        values[key.strip().upper()] = value.strip()
    logger.debug(f"Read {len(values)} settings from {path}")
    return values


@contextmanager
def overrides(values: Mapping[str, object]) -> Iterator[Dict[str, object]]:
    """Temporarily layer ``values`` over the laboratory defaults."""
    global _active
    previous = dict(_active)
    merged = dict(previous)
    for key, raw in values.items():
        merged[key.upper()] = coerce_setting(key, raw)
    _active = merged
    try:
        yield dict(merged)
    finally:
        _active = previous
