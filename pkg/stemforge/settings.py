"""
Django settings for stemforge project.

Only the pieces the retrieval app needs are configured: the template
engines that render prompt assets, logging, and the STEM defaults that
back every run configuration.
"""

from pathlib import Path
from decouple import config

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

SECRET_KEY = config('DJANGO_SECRET_KEY', default='django-insecure-stemforge-offline-only')

DEBUG = config('DEBUG', default=True, cast=bool)

ALLOWED_HOSTS = []

# Application definition
INSTALLED_APPS = [
    'rest_framework',  # serializers validate configs and input records
    'retrieval',
]

TEMPLATES = [
    {
        # Prompt assets are plain text, never HTML
        'NAME': 'prompts',
        'BACKEND': 'django.template.backends.django.DjangoTemplates',
        'DIRS': [BASE_DIR / 'retrieval' / 'prompts'],
        'APP_DIRS': False,
        'OPTIONS': {
            'autoescape': False,
        },
    },
]

# No models; the test runner never needs a database
DATABASES = {}

LANGUAGE_CODE = 'en-us'
TIME_ZONE = 'UTC'
USE_I18N = False
USE_TZ = True

# Defaults for every run configuration; a YAML file and command flags override them
STEM = {
    'seed': config('STEM_SEED', default=0, cast=int),
    'beam': config('STEM_BEAM', default=4, cast=int),
    'max_plan_attempts': config('STEM_MAX_PLAN_ATTEMPTS', default=5, cast=int),
    'jobs': config('STEM_JOBS', default=4, cast=int),
    'search_jobs': config('STEM_SEARCH_JOBS', default=1, cast=int),
    'strategy_mode': config('STEM_STRATEGY_MODE', default='adaptive'),
    'use_guidance': config('STEM_USE_GUIDANCE', default=True, cast=bool),
    'coverage_mode': config('STEM_COVERAGE_MODE', default='exact'),
    'paths': {
        'graph': config('STEM_GRAPH_PATH', default=''),
        'questions': config('STEM_QUESTIONS_PATH', default=''),
        'fixtures': config('STEM_FIXTURES_PATH', default=''),
        'checkpoint': config('STEM_CHECKPOINT_PATH', default=str(BASE_DIR / 'artifacts' / 'guidance_gnn.safetensors')),
        'cache': config('STEM_CACHE_PATH', default=str(BASE_DIR / 'artifacts' / 'vectors.msgpack')),
        'output': config('STEM_OUTPUT_DIR', default=str(BASE_DIR / 'runs' / 'latest')),
        'manifest': config('STEM_MANIFEST_PATH', default=''),
    },
    'bias': {
        'entity_bias': config('STEM_ENTITY_BIAS', default=1.5, cast=float),
        'triple_bias': config('STEM_TRIPLE_BIAS', default=0.5, cast=float),
        'threshold': config('STEM_THRESHOLD', default=0.6, cast=float),
        'anchor_top_n': config('STEM_ANCHOR_TOP_N', default=50, cast=int),
        'fuzzy_threshold': config('STEM_FUZZY_THRESHOLD', default=0.8, cast=float),
        'max_commits': config('STEM_MAX_COMMITS', default=10000, cast=int),
    },
    'gnn': {
        'd_pem': config('STEM_D_PEM', default=1024, cast=int),
        'd_gnn': config('STEM_D_GNN', default=512, cast=int),
        'layers': config('STEM_GNN_LAYERS', default=6, cast=int),
        'activation': config('STEM_GNN_ACTIVATION', default='tanh'),
        'loss': config('STEM_GNN_LOSS', default='positive'),
        'learning_rate': config('STEM_GNN_LR', default=1e-5, cast=float),
        'epochs': config('STEM_GNN_EPOCHS', default=2, cast=int),
        'k_multiplier': config('STEM_K_MULTIPLIER', default=4, cast=int),
        'grad_check_tolerance': config('STEM_GRAD_CHECK_TOLERANCE', default=1e-4, cast=float),
        'grad_check_samples': config('STEM_GRAD_CHECK_SAMPLES', default=8, cast=int),
    },
    'encoder': {
        'backend': config('STEM_ENCODER_BACKEND', default='deterministic-test'),
        'model': config('STEM_EMBEDDING_MODEL', default='Qwen3-Embedding-0.6B'),
        'dimension': config('STEM_EMBEDDING_DIMENSION', default=1024, cast=int),
        'endpoint': config('STEM_EMBEDDING_ENDPOINT', default=''),
        'api_key': config('STEM_EMBEDDING_API_KEY', default=''),
        'batch_size': config('STEM_EMBEDDING_BATCH_SIZE', default=64, cast=int),
        'retries': config('STEM_EMBEDDING_RETRIES', default=3, cast=int),
        'timeout': config('STEM_EMBEDDING_TIMEOUT', default=30.0, cast=float),
    },
    'chat': {
        'backend': config('STEM_CHAT_BACKEND', default='fixture-mock'),
        'endpoint': config('STEM_CHAT_ENDPOINT', default=''),
        'api_key': config('STEM_CHAT_API_KEY', default=''),
        'model': config('STEM_CHAT_MODEL', default='gpt-4o'),
        'timeout': config('STEM_CHAT_TIMEOUT', default=60.0, cast=float),
        'retries': config('STEM_CHAT_RETRIES', default=3, cast=int),
    },
    'datagen': {
        'samples': config('STEM_DATAGEN_SAMPLES', default=100, cast=int),
        'walk_lengths': {'1': 0.4, '2': 0.35, '3': 0.2, '4': 0.05},
        'answer_count': config('STEM_DATAGEN_ANSWER_COUNT', default=1, cast=int),
        'max_attempts': config('STEM_DATAGEN_MAX_ATTEMPTS', default=3, cast=int),
        'llm_strategy': config('STEM_DATAGEN_LLM_STRATEGY', default=False, cast=bool),
    },
}

LOG_DIR = BASE_DIR / 'logs'
LOG_DIR.mkdir(exist_ok=True)

# Logging configuration
LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '{levelname} {asctime} {module} {message}',
            'style': '{',
        },
    },
    'handlers': {
        'file': {
            'level': 'INFO',
            'class': 'logging.FileHandler',
            'filename': LOG_DIR / 'stemforge.log',
            'formatter': 'verbose',
        },
        'console': {
            'level': 'DEBUG',
            'class': 'logging.StreamHandler',
            'formatter': 'verbose',
        },
    },
    'loggers': {
        '': {
            'handlers': ['file', 'console'],
            'level': 'INFO',
            'propagate': True,
        },
    },
}
