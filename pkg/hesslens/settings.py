"""
Django settings for the hesslens project.

hesslens has no web surface: Django provides the app registry, the
management-command CLI, logging configuration and the test runner.

For the full list of settings and their values, see
https://docs.djangoproject.com/en/5.2/ref/settings/
"""

from pathlib import Path
from decouple import config

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

SECRET_KEY = config('SECRET_KEY', default='hesslens-local-key-not-used-for-signing')

DEBUG = config('DEBUG', default=False, cast=bool)

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    # Third party apps
    'rest_framework',

    # Local apps
    'adcore',
    'nnmodels',
    'dataio',
    'hessops',
    'spectral',
    'specanalysis',
    'htrtrain',
    'hesslens',
]

# Nothing is stored in a database; every artifact is a file under --out.
DATABASES = {}

USE_TZ = True

TIME_ZONE = 'UTC'

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'


# Toolkit defaults. Management commands take their flag defaults from here.
HESSLENS = {
    'SEED': config('HESSLENS_SEED', default=0, cast=int),
    'PROBE_SET_SIZE': config('HESSLENS_PROBE_SET_SIZE', default=2048, cast=int),
    'DENSE_LIMIT': config('HESSLENS_DENSE_LIMIT', default=5000, cast=int),
    'TORCH_THREADS': config('HESSLENS_TORCH_THREADS', default=1, cast=int),
    'LANCZOS_STEPS': 80,
    'GRID_POINTS': 1024,
    'KAPPA': 3.0,
    'SLQ_PROBES': 8,
    'TRACE_PROBES': 100,
    'LAMBDA_STEPS': 32,
    'DELTA_SAMPLES': 512,
    'DISTANCE_GRID_POINTS': 2048,
    'OUTLIER_PROMINENCE': 1e-3,
    'BULK_MASS': 0.99,
    'OUTLIER_MODE_FRACTION': 0.1,
}


# Logging Configuration
LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'verbose',
        },
    },
    'formatters': {
        'verbose': {
            'format': '{levelname} {asctime} {name} {message}',
            'style': '{',
        },
    },
    'root': {
        'handlers': ['console'],
        'level': config('LOG_LEVEL', default='INFO'),
    },
    'loggers': {
        'django': {
            'handlers': ['console'],
            'level': config('DJANGO_LOG_LEVEL', default='WARNING'),
            'propagate': False,
        },
    },
}
