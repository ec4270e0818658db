import os

from dotenv import find_dotenv, load_dotenv

from errors import ConfigError


class Config:
    """Base configuration class"""
    DEBUG = False
    TESTING = False

    # Output settings
    OUTPUT_ROOT = 'runs'
    LOG_LEVEL = 'INFO'

    # Determinism: reruns are bit-identical only with the same thread count
    NUM_THREADS = 2

    # Model settings
    NORM_EPS = 1e-5
    DEFAULT_DROPOUT = 0.1

    # Optimizer settings
    WEIGHT_DECAY = 0.05
    ADAM_BETAS = (0.9, 0.95)
    ADAM_EPS = 1e-8
    GRAD_CLIP = 1.0

    # Schedule settings
    COSINE_MIN_LR_FRACTION = 0.1

    # Checkpoint cadence as a fraction of total iterations
    CHECKPOINT_FRACTION = 0.1

    # Evaluation settings
    EVAL_WORKERS = 1

    # Comparison settings
    SCALE_PARAM_TOLERANCE = 0.05
    NEAR_TIE_RESOLUTION = 0.001
    AVERAGE_TOLERANCE = 0.005


class DevelopmentConfig(Config):
    """Development configuration"""
    DEBUG = True


class TestingConfig(Config):
    """Testing configuration"""
    TESTING = True
    DEBUG = True
    NUM_THREADS = 1
    OUTPUT_ROOT = 'test_runs'


class ProductionConfig(Config):
    """Production configuration"""
    DEBUG = False
    LOG_LEVEL = 'WARNING'


# Configuration dictionary
config_by_name = {
    'development': DevelopmentConfig,
    'testing': TestingConfig,
    'production': ProductionConfig,
    'default': DevelopmentConfig
}

# Settings that the environment (or a .env file) may override
ENV_OVERRIDES = {
    'OUTPUT_ROOT': ('OSREF_OUTPUT_ROOT', str),
    'LOG_LEVEL': ('OSREF_LOG_LEVEL', str),
    'NUM_THREADS': ('OSREF_NUM_THREADS', int),
    'EVAL_WORKERS': ('OSREF_EVAL_WORKERS', int),
    'NORM_EPS': ('OSREF_NORM_EPS', float),
}


def get_config():
    """
    Return the appropriate configuration object based on the environment.

    The environment is read on every call, after loading a .env file from the
    working directory (variables already set take precedence).
    """
    load_dotenv(find_dotenv(usecwd=True))
    env = os.environ.get('OSREF_ENV', 'development')
    base = config_by_name.get(env, config_by_name['default'])
    overrides = {}
    for attr, (var, cast) in ENV_OVERRIDES.items():
        if var in os.environ:
            try:
                overrides[attr] = cast(os.environ[var])
            except ValueError as e:
                raise ConfigError(f"{var}={os.environ[var]!r} is not a valid {cast.__name__}") from e
    if not overrides:
        return base
    return type(base.__name__, (base,), overrides)
