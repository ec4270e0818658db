import pytest

from cli import main
from config import DevelopmentConfig, TestingConfig, get_config
from errors import ConfigError
from refmodel.model import ModelConfig, get_preset

ENV_VARS = ('OSREF_ENV', 'OSREF_OUTPUT_ROOT', 'OSREF_LOG_LEVEL', 'OSREF_NUM_THREADS', 'OSREF_EVAL_WORKERS',
            'OSREF_NORM_EPS')


@pytest.fixture(autouse=True)
def clean_env(monkeypatch, tmp_path):
    # delenv records the variables so anything a .env file sets is undone afterwards
    for name in ENV_VARS:
        monkeypatch.delenv(name, raising=False)
    monkeypatch.chdir(tmp_path)


def test_defaults_without_env():
    config = get_config()
    assert config is DevelopmentConfig
    assert config.NUM_THREADS == 2
    assert config.NORM_EPS == 1e-5


def test_dotenv_file_is_read_when_config_is_requested(tmp_path):
    (tmp_path / '.env').write_text('OSREF_NUM_THREADS=3\nOSREF_NORM_EPS=0.001\nOSREF_EVAL_WORKERS=4\n')
    config = get_config()
    assert config.NUM_THREADS == 3
    assert config.NORM_EPS == 0.001
    assert config.EVAL_WORKERS == 4
    assert issubclass(config, DevelopmentConfig)


def test_dotenv_reaches_model_defaults(tmp_path):
    (tmp_path / '.env').write_text('OSREF_NORM_EPS=0.001\n')
    get_config()
    assert ModelConfig(layers=1, hidden=8, heads=2, ffn_hidden=16).norm_eps == 0.001
    assert get_preset('toy').norm_eps == 0.001


def test_dotenv_applies_through_cli(tmp_path, capsys):
    (tmp_path / '.env').write_text('OSREF_ENV=testing\nOSREF_NUM_THREADS=3\n')
    assert main(['ledger', '1', '1']) == 0
    config = get_config()
    assert issubclass(config, TestingConfig)
    assert config.NUM_THREADS == 3


def test_process_environment_wins_over_dotenv(tmp_path, monkeypatch):
    (tmp_path / '.env').write_text('OSREF_NUM_THREADS=3\n')
    monkeypatch.setenv('OSREF_NUM_THREADS', '5')
    assert get_config().NUM_THREADS == 5


def test_invalid_value_is_a_config_error(tmp_path, monkeypatch):
    monkeypatch.setenv('OSREF_NUM_THREADS', 'many')
    with pytest.raises(ConfigError, match='OSREF_NUM_THREADS'):
        get_config()
    assert main(['ledger', '1', '1']) == 2
