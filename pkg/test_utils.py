"""
Tests for the configuration, environment and run statistics helpers
"""

import json
import logging
import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

import env_loader
from stats_manager import RunStatsManager
from utils import ConfigError, ConfigManager, format_float, setup_logging


def write_ini(tmp_path, text):
    path = tmp_path / 'c.ini'
    path.write_text(text, encoding='utf-8')
    return str(path)


class TestConfigManager:
    def test_typed_values(self, tmp_path):
        cm = ConfigManager(write_ini(tmp_path, "[a]\nx = 3\ny = 0.5 ; note\nz = yes\nhidden = 16, 8\nblank =\n"))
        assert cm.getint('a', 'x') == 3
        assert cm.getfloat('a', 'y') == 0.5
        assert cm.getboolean('a', 'z') is True
        assert cm.get_int_list('a', 'hidden') == [16, 8]
        assert cm.get_int_list('a', 'blank') == []
        assert cm.get_optional_int('a', 'blank') is None
        assert cm.get_optional_float('a', 'missing') is None
        assert cm.getint('a', 'blank', fallback=7) == 7

    def test_missing_required_value(self, tmp_path):
        cm = ConfigManager(write_ini(tmp_path, "[a]\nx =\n"))
        with pytest.raises(ConfigError) as info:
            cm.getint('a', 'x')
        assert (info.value.section, info.value.key) == ('a', 'x')

    @pytest.mark.parametrize('getter,value', [('getint', '1.5'), ('getfloat', 'abc'),
                                              ('getboolean', 'maybe'), ('get_int_list', '1,b')])
    def test_bad_values(self, tmp_path, getter, value):
        cm = ConfigManager(write_ini(tmp_path, f"[a]\nx = {value}\n"))
        with pytest.raises(ConfigError):
            getattr(cm, getter)('a', 'x')

    def test_syntax_error_reports_line(self, tmp_path):
        with pytest.raises(ConfigError) as info:
            ConfigManager(write_ini(tmp_path, "[a]\nx = 1\nnot a pair\n"))
        assert info.value.line == 3
        assert 'line 3' in str(info.value)

    def test_missing_section_header(self, tmp_path):
        with pytest.raises(ConfigError) as info:
            ConfigManager(write_ini(tmp_path, "x = 1\n"))
        assert info.value.line == 1

    def test_unreadable_file(self, tmp_path):
        with pytest.raises(ConfigError):
            ConfigManager(str(tmp_path / 'absent.ini'))

    def test_set_overrides(self, tmp_path):
        cm = ConfigManager(write_ini(tmp_path, "[a]\nx = 1\n"))
        cm.set('a', 'x', 2)
        cm.set('b', 'y', 0.25)
        assert cm.getint('a', 'x') == 2
        assert cm.getfloat('b', 'y') == 0.25


@given(st.floats(allow_nan=False))
def test_format_float_round_trips(value):
    assert float(format_float(value)) == value


def test_format_float_nan():
    assert math.isnan(float(format_float(float('nan'))))


class TestEnvironment:
    @pytest.fixture(autouse=True)
    def isolated(self, monkeypatch):
        for key in env_loader.ENV_KEYS:
            # setenv first so that teardown also removes values loaded from .env files
            monkeypatch.setenv(env_loader.ENV_PREFIX + key, '')
            monkeypatch.delenv(env_loader.ENV_PREFIX + key)

    def test_dotenv_file(self, tmp_path):
        env_file = tmp_path / '.env'
        env_file.write_text("FEDLAW_LOG_LEVEL=DEBUG\nFEDLAW_THREADS=3\n", encoding='utf-8')
        assert env_loader.load_environment(str(env_file)) is True
        assert env_loader.get_env('LOG_LEVEL') == 'DEBUG'
        assert env_loader.get_env_int('THREADS') == 3
        assert env_loader.get_config_summary() == {'FEDLAW_LOG_LEVEL': 'DEBUG', 'FEDLAW_THREADS': '3'}

    def test_process_environment_wins(self, tmp_path, monkeypatch):
        env_file = tmp_path / '.env'
        env_file.write_text("FEDLAW_THREADS=3\n", encoding='utf-8')
        monkeypatch.setenv('FEDLAW_THREADS', '8')
        env_loader.load_environment(str(env_file))
        assert env_loader.get_env_int('THREADS') == 8

    def test_missing_file(self, tmp_path):
        assert env_loader.load_environment(str(tmp_path / '.env')) is False
        assert env_loader.get_env('THREADS') is None
        assert env_loader.get_config_summary() == {}

    def test_blank_is_unset(self, monkeypatch):
        monkeypatch.setenv('FEDLAW_MNIST_IMAGES', '   ')
        assert env_loader.get_env('MNIST_IMAGES') is None

    def test_bad_integer(self, monkeypatch):
        monkeypatch.setenv('FEDLAW_THREADS', 'four')
        with pytest.raises(ConfigError):
            env_loader.get_env_int('THREADS')


class TestRunStatsManager:
    def test_records_runs(self, tmp_path):
        stats = RunStatsManager()
        stats.start_run(0, 10)
        stats.finish_run(5)
        stats.start_run(1, 11)
        stats.finish_run(2, diverged=True, divergence_epoch=2, reason='loss is inf')

        assert stats.any_diverged
        first, second = stats.runs
        assert first['seed'] == 10 and first['epochs_completed'] == 5
        assert 'divergence_epoch' not in first
        assert second['divergence_reason'] == 'loss is inf'

        path = tmp_path / 'stats.json'
        stats.save(str(path))
        saved = json.loads(path.read_text(encoding='utf-8'))
        assert len(saved['runs']) == 2
        assert saved['total_seconds'] >= 0

    def test_finish_without_start(self):
        with pytest.raises(RuntimeError):
            RunStatsManager().finish_run(1)

    def test_system_stats(self):
        snapshot = RunStatsManager().get_system_stats()
        assert snapshot['rss_mb'] > 0


def test_setup_logging_writes_log_file(tmp_path):
    log_file = tmp_path / 'run.log'
    setup_logging('debug', str(log_file))
    logging.getLogger('simulator.test').debug('epoch 3 finished')
    for handler in logging.getLogger().handlers:
        handler.flush()
    text = log_file.read_text(encoding='utf-8')
    assert ' - simulator.test - DEBUG - epoch 3 finished' in text
    setup_logging('WARNING')
