import os
from pathlib import Path

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

# Only the management commands are used; no web surface, no database.
SECRET_KEY = os.getenv('SECRET_KEY', 'django-insecure-nvcim-pt-simulator-local-key')

DEBUG = os.getenv('DEBUG', 'False').lower() in ('1', 'true', 'yes')

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'simulator',
]

DATABASES = {}

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'

USE_TZ = True
TIME_ZONE = 'UTC'


def _env_list(name, default, cast=float):
    """Comma-separated environment list, e.g. NVCIM_SIGMAS=0.05,0.1"""
    raw = os.getenv(name)
    if not raw:
        return default
    return tuple(cast(item.strip()) for item in raw.split(',') if item.strip())


# Simulation defaults. Every command starts from these, then applies --config, then flags.
NVCIM = {
    'PROFILES': _env_list('NVCIM_PROFILES', (os.getenv('NVCIM_PROFILE', 'nvm-3'),), str),
    'SIGMA': float(os.getenv('NVCIM_SIGMA', '0.1')),
    'SEED': int(os.getenv('NVCIM_SEED', '0')),
    'OUTPUT_DIR': os.getenv('NVCIM_OUTPUT_DIR', os.path.join(BASE_DIR, 'results')),
    'N_JOBS': int(os.getenv('NVCIM_N_JOBS', '1')),
    'BUFFER_SIZE': int(os.getenv('NVCIM_BUFFER_SIZE', '20')),
    'BUFFER_SIZES': _env_list('NVCIM_BUFFER_SIZES', (10, 20, 30, 40, 50, 60), int),
    'SIGMAS': _env_list('NVCIM_SIGMAS', (0.025, 0.050, 0.075, 0.100, 0.125, 0.150)),
    'METHODS': _env_list('NVCIM_METHODS', ('nvcim-pt', 'nvp-mips', 'no-miti-mips', 'swv'), str),
    'SCALES': _env_list('NVCIM_SCALES', (1, 2, 4), int),
    'WEIGHTS': _env_list('NVCIM_WEIGHTS', (1.0, 0.8, 0.6)),
    'D_ENC': int(os.getenv('NVCIM_D_ENC', '48')),
    'BITS_PER_DEVICE': int(os.getenv('NVCIM_BITS_PER_DEVICE', '2')),
    'TUNE_STEPS': int(os.getenv('NVCIM_TUNE_STEPS', '200')),
    'TUNE_LR': float(os.getenv('NVCIM_TUNE_LR', '25.0')),
    'WRITE_VERIFY_TOLERANCE': float(os.getenv('NVCIM_WV_TOLERANCE', '0.01')),
    'WRITE_VERIFY_MAX_ITERS': int(os.getenv('NVCIM_WV_MAX_ITERS', '20')),
}


# Logging

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'standard': {
            'format': '%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'standard',
        },
    },
    'loggers': {
        'nvcim_pt': {
            'handlers': ['console'],
            'level': os.getenv('NVCIM_LOG_LEVEL', 'INFO'),
            'propagate': False,
        },
        'simulator': {
            'handlers': ['console'],
            'level': os.getenv('NVCIM_LOG_LEVEL', 'INFO'),
            'propagate': False,
        },
    },
}
