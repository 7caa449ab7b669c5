"""
Django settings for the fedfmc project.

The project hosts a federated-learning protocol simulator (FedAvg baseline and
Fork / Merge-Consolidate). Simulation code lives in the learner, data_plane,
federation and cost_ledger apps; the harness app owns the CLI, run records and
the read-only results API.
"""

from pathlib import Path
import os
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent


# SECURITY WARNING: keep the secret key used in production secret!
SECRET_KEY = os.environ.get(
    'DJANGO_SECRET_KEY',
    'django-insecure-fedfmc-local-simulator-key-change-me',
)

# SECURITY WARNING: don't run with debug turned on in production!
DEBUG = os.environ.get('DJANGO_DEBUG', 'True').lower() == 'true'

ALLOWED_HOSTS = ['localhost', '127.0.0.1']


# Application definition

INSTALLED_APPS = [
    'django.contrib.admin',
    'django.contrib.auth',
    'django.contrib.contenttypes',
    'django.contrib.sessions',
    'django.contrib.messages',
    'django.contrib.staticfiles',
    'rest_framework',
    # 'drf_yasg',  # Optional - comment out if not installed
    'learner',  # MLP, SGD, EWC, Fisher
    'data_plane',  # Dataset loading, synthetic blobs, archetype partitioner
    'federation',  # FedAvg, Fork, Merge-Consolidate
    'cost_ledger',  # Update / transfer accounting
    'harness',  # CLI, run records, results API
]

MIDDLEWARE = [
    'django.middleware.security.SecurityMiddleware',
    'django.contrib.sessions.middleware.SessionMiddleware',
    'django.middleware.common.CommonMiddleware',
    'django.middleware.csrf.CsrfViewMiddleware',
    'django.contrib.auth.middleware.AuthenticationMiddleware',
    'django.contrib.messages.middleware.MessageMiddleware',
    'django.middleware.clickjacking.XFrameOptionsMiddleware',
]

ROOT_URLCONF = 'fedfmc.urls'

TEMPLATES = [
    {
        'BACKEND': 'django.template.backends.django.DjangoTemplates',
        'DIRS': [],
        'APP_DIRS': True,
        'OPTIONS': {
            'context_processors': [
                'django.template.context_processors.request',
                'django.contrib.auth.context_processors.auth',
                'django.contrib.messages.context_processors.messages',
            ],
        },
    },
]

WSGI_APPLICATION = 'fedfmc.wsgi.application'


# Database
# Run records (ExperimentRun / RoundMetric) are stored here.

DATABASES = {
    'default': {
        'ENGINE': 'django.db.backends.sqlite3',
        'NAME': BASE_DIR / 'db.sqlite3',
    }
}


# Internationalization

LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = True

USE_TZ = True


# Static files
STATIC_URL = '/static/'
STATIC_ROOT = BASE_DIR / 'staticfiles'


# Default primary key field type

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'

# REST Framework settings
# The results API is read-only and meant for a local workstation.
REST_FRAMEWORK = {
    'DEFAULT_PERMISSION_CLASSES': (
        'rest_framework.permissions.AllowAny',
    ),
    'DEFAULT_RENDERER_CLASSES': (
        'rest_framework.renderers.JSONRenderer',
        'rest_framework.renderers.BrowsableAPIRenderer',
    ),
}

# Swagger Settings
SWAGGER_SETTINGS = {
    'USE_SESSION_AUTH': False,
    'JSON_EDITOR': True,
    'SUPPORTED_SUBMIT_METHODS': ['get'],
}


# Simulator settings
# Every value can be overridden from the environment (or .env)

# Where `manage.py run` writes metrics.csv, report.json and checkpoints
FEDFMC_OUTPUT_DIR = Path(os.environ.get('FEDFMC_OUTPUT_DIR', BASE_DIR / 'runs'))

# Threads used for per-device training/evaluation inside one round.
# Results never depend on this value.
FEDFMC_WORKERS = int(os.environ.get('FEDFMC_WORKERS', '1'))

# Persist finished runs as ExperimentRun / RoundMetric rows
FEDFMC_RECORD_RUNS = os.environ.get('FEDFMC_RECORD_RUNS', 'True').lower() == 'true'

FEDFMC_LOG_LEVEL = os.environ.get('FEDFMC_LOG_LEVEL', 'INFO').upper()

# Bundled experiment presets (flat key = value files)
FEDFMC_PRESETS_DIR = BASE_DIR / 'harness' / 'presets'


# Logging
LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'simple': {
            'format': '{asctime} {levelname} {name}: {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'simple',
        },
    },
    'root': {
        'handlers': ['console'],
        'level': 'WARNING',
    },
    'loggers': {
        app: {
            'handlers': ['console'],
            'level': FEDFMC_LOG_LEVEL,
            'propagate': False,
        }
        for app in ('learner', 'data_plane', 'federation', 'cost_ledger', 'harness')
    },
}
