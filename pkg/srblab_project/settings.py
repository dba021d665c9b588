"""
Django settings for srblab_project project.

The project hosts one application, ``srblab``, whose service modules make up
the numerical laboratory. Django provides configuration, logging, the
management-command surface and the run ledger.

For more information on this file, see
https://docs.djangoproject.com/en/5.2/topics/settings/
"""

import os
import dj_database_url
from pathlib import Path

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent


# SECURITY WARNING: keep the secret key used in production secret!
SECRET_KEY = os.environ.get('SRBLAB_SECRET_KEY', 'srblab-insecure-4v!m2c0x$8q1w@k7n#e5r9t3y6u0i2o4p')

DEBUG = os.environ.get('SRBLAB_DEBUG', 'False') == 'True'

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'django.contrib.contenttypes',
    'srblab',
]

MIDDLEWARE = []


# Database
# https://docs.djangoproject.com/en/5.2/ref/settings/#databases

# Run ledger defaults to SQLite; DATABASE_URL points it elsewhere
if os.environ.get('DATABASE_URL'):
    DATABASES = {
        'default': dj_database_url.config(
            default=os.environ.get('DATABASE_URL'),
            conn_max_age=600,
            conn_health_checks=True,
        )
    }
else:
    DATABASES = {
        'default': {
            'ENGINE': 'django.db.backends.sqlite3',
            'NAME': BASE_DIR / 'db.sqlite3',
        }
    }


# Internationalization
# https://docs.djangoproject.com/en/5.2/topics/i18n/

LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = False

USE_TZ = True


# Default primary key field type
DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'


def _env_number(key, default):
    raw = os.environ.get(f'SRBLAB_{key}')
    if raw is None:
        return default
    return type(default)(raw)


def _env_threads(key, default):
    raw = os.environ.get(f'SRBLAB_{key}')
    if raw is None:
        return default
    raw = raw.strip().lower()
    return raw if raw == 'auto' else int(raw)


# Laboratory constants. Overridable per key via SRBLAB_<KEY>, a --config file,
# and command-line flags (in that order).
SRBLAB = {
    # density
    'DENSITY_TOLERANCE': _env_number('DENSITY_TOLERANCE', 0.05),
    'LADDER_RATIO': _env_number('LADDER_RATIO', 2.0),
    'DENSITY_WINDOW': _env_number('DENSITY_WINDOW', 3),
    # curves
    'CURVE_DEGREE': _env_number('CURVE_DEGREE', 3),
    'TRUNCATION_RELATIVE': _env_number('TRUNCATION_RELATIVE', 1e-6),
    'MAX_SPLIT_DEPTH': _env_number('MAX_SPLIT_DEPTH', 30),
    # reptree; C_r and B_q are frozen after calibration
    'VALENCE_CONSTANT': _env_number('VALENCE_CONSTANT', 1500.0),
    'TAYLOR_CONSTANT': _env_number('TAYLOR_CONSTANT', 1.0),
    'ANNULUS_CONSTANT': _env_number('ANNULUS_CONSTANT', 64.0),
    'NODE_BUDGET': _env_number('NODE_BUDGET', 200000),
    'TREE_SAMPLES': _env_number('TREE_SAMPLES', 1000),
    'SCALE_GRID': _env_number('SCALE_GRID', 24),
    'SCALE_FLOOR': _env_number('SCALE_FLOOR', 1e-6),
    # srb
    'VERDICT_TOLERANCE': _env_number('VERDICT_TOLERANCE', 0.15),
    'STABILITY_THRESHOLD': _env_number('STABILITY_THRESHOLD', 0.05),
    'BASIN_THRESHOLD': _env_number('BASIN_THRESHOLD', 0.1),
    'ENTROPY_GRID': _env_number('ENTROPY_GRID', 8),
    'ENTROPY_DEPTH': _env_number('ENTROPY_DEPTH', 3),
    'SOURCE_MAX_PERIOD': _env_number('SOURCE_MAX_PERIOD', 6),
    # orchestration
    'THREADS': _env_threads('THREADS', 1),
    'RECORD_RUNS': os.environ.get('SRBLAB_RECORD_RUNS', 'True') == 'True',
}


# Logging configuration
LOG_LEVEL = os.environ.get('SRBLAB_LOG_LEVEL', 'INFO')

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '{asctime} {levelname} {name}: {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'verbose',
        },
    },
    'root': {
        'handlers': ['console'],
        'level': 'WARNING',
    },
    'loggers': {
        'django': {
            'handlers': ['console'],
            'level': LOG_LEVEL,
            'propagate': False,
        },
        'srblab': {
            'handlers': ['console'],
            'level': LOG_LEVEL,
            'propagate': False,
        },
    },
}
