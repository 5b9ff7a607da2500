"""
Django settings for ctr_engine project.
"""

from pathlib import Path

from decouple import config

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent


# SECURITY WARNING: keep the secret key used in production secret!
SECRET_KEY = config('CTR_SECRET_KEY', default='django-insecure-ctr-engine-local-key')

DEBUG = config('CTR_DEBUG', default=False, cast=bool)

ALLOWED_HOSTS = []


# Application definition

DJANGO_APPS = [
    'django.contrib.contenttypes',
    'django.contrib.auth',
]

THIRD_PARTY_APPS = [
    'rest_framework',
]

LOCAL_APPS = [
    'sparse_ctr',
]

INSTALLED_APPS = DJANGO_APPS + THIRD_PARTY_APPS + LOCAL_APPS


# Database
# El motor no persiste nada en BD; sqlite solo satisface a Django.

DATABASES = {
    'default': {
        'ENGINE': 'django.db.backends.sqlite3',
        'NAME': BASE_DIR / 'db.sqlite3',
    }
}


# Internationalization

LANGUAGE_CODE = 'es-es'

TIME_ZONE = 'America/Bogota'

USE_I18N = True

USE_TZ = True

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'

# Django REST Framework (solo serializers para validar configuración)
REST_FRAMEWORK = {
    'UNAUTHENTICATED_USER': None,
}


# Motor CTR
CTR_LOG_LEVEL = config('CTR_LOG_LEVEL', default='INFO')

# float32 para servir; float64 para chequeos numéricos de gradiente
CTR_PARAM_DTYPE = config('CTR_PARAM_DTYPE', default='float32')

# Pruebas de aceptación largas (recuperación plantada, velocidad CRS con h=400)
CTR_RUN_SLOW_TESTS = config('CTR_RUN_SLOW_TESTS', default=False, cast=bool)

# Debajo de este número de repeticiones el benchmark solo advierte
CTR_BENCH_MIN_REPETITIONS = config('CTR_BENCH_MIN_REPETITIONS', default=30, cast=int)


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
        'sparse_ctr': {
            'level': CTR_LOG_LEVEL,
            'handlers': ['console'],
            'propagate': False,
        }
    }
}
