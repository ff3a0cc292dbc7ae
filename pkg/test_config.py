"""
Test Config

Layered run configuration: defaults, JSON file, environment and command-line
overrides, with validation of every layer.
"""
import json
import logging

import pytest

from config import (EFFECTIVE_CONFIG_NAME, RunConfig, enhance_settings,
                    load_config, write_effective_config)
from errors import ConfigurationError

logger = logging.getLogger('config_test')


def _write(tmp_path, data):
    path = tmp_path / 'config.json'
    path.write_text(json.dumps(data))
    return str(path)


def test_defaults():
    cfg = load_config(env={})
    assert cfg == RunConfig()
    assert cfg.pipeline.scope == 'both'
    assert cfg.pipeline.method == 'rule'
    assert cfg.compression.low_band_gain == 0.1
    assert cfg.temporal.base_weight == 0.3
    assert cfg.gmm.num_components == 8
    assert cfg.nmf.rank == 64


def test_precedence(tmp_path):
    """File < environment < flags"""
    path = _write(tmp_path, {'seed': 3, 'pipeline': {'jobs': 2, 'method': 'nmf'}})
    assert load_config(path, env={}).seed == 3
    cfg = load_config(path, env={'CLP_SEED': '5', 'CLP_JOBS': '4'})
    assert cfg.seed == 5
    assert cfg.pipeline.jobs == 4
    assert cfg.pipeline.method == 'nmf'
    cfg = load_config(path, env={'CLP_SEED': '5'}, overrides={'seed': 9, 'pipeline.jobs': None})
    assert cfg.seed == 9
    assert cfg.pipeline.jobs == 2


def test_unknown_keys_are_rejected(tmp_path):
    with pytest.raises(ConfigurationError):
        load_config(_write(tmp_path, {'sede': 1}), env={})
    with pytest.raises(ConfigurationError):
        load_config(_write(tmp_path, {'gmm': {'components': 4}}), env={})
    with pytest.raises(ConfigurationError):
        load_config(_write(tmp_path, {'gmm': 4}), env={})


def test_invalid_values(tmp_path):
    with pytest.raises(ConfigurationError):
        load_config(_write(tmp_path, {'compression': {'low_band_gain': 2.0}}), env={})
    with pytest.raises(ConfigurationError):
        load_config(_write(tmp_path, {'temporal': {'base_weight': -0.5}}), env={})
    with pytest.raises(ConfigurationError):
        load_config(_write(tmp_path, {'pipeline': {'scope': 'everything'}}), env={})
    with pytest.raises(ConfigurationError):
        load_config(_write(tmp_path, {'audio': {'enhance_rate': 22050}}), env={})
    with pytest.raises(ConfigurationError):
        load_config(_write(tmp_path, {'temporal': {'vowel_only_gate': 'maybe'}}), env={})
    with pytest.raises(ConfigurationError):
        load_config(env={'CLP_JOBS': 'many'})
    with pytest.raises(ConfigurationError):
        load_config(env={'CLP_JOBS': '0'})


def test_bad_config_file(tmp_path):
    path = tmp_path / 'broken.json'
    path.write_text('{"seed": ')
    with pytest.raises(ConfigurationError):
        load_config(str(path), env={})
    with pytest.raises(ConfigurationError):
        load_config(str(tmp_path / 'absent.json'), env={})


def test_boolean_coercion(tmp_path):
    cfg = load_config(_write(tmp_path, {'temporal': {'vowel_only_gate': 'no'}}), env={})
    assert cfg.temporal.vowel_only_gate is False


def test_effective_config_is_written(tmp_path):
    cfg = load_config(env={'CLP_LEDGER_URL': 'sqlite:///ledger.db'})
    path = write_effective_config(cfg, str(tmp_path / 'out'))
    assert path.endswith(EFFECTIVE_CONFIG_NAME)
    with open(path) as f:
        data = json.load(f)
    assert data['paths']['ledger_url'] == 'sqlite:///ledger.db'
    assert data['compression']['cutoff_hz'] == 2000.0


def test_enhance_settings_mapping(tmp_path):
    path = _write(tmp_path, {'temporal': {'base_weight': 0.5, 'vowel_only_gate': False},
                             'pipeline': {'fade_ms': 8}, 'nmf': {'iters': 40}})
    settings = enhance_settings(load_config(path, env={}))
    assert settings.temporal.base_weight == 0.5
    assert settings.gate_voiced is False
    assert settings.fade_ms == 8.0
    assert settings.nmf_iters == 40


if __name__ == "__main__":
    pytest.main([__file__])
