"""
Run configuration

Defaults < JSON config file < environment < command-line flags.
"""
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace

from audio_io import ENHANCE_RATE, METRICS_RATE
from dsp_core import DEFAULT_FRAME_LEN, DEFAULT_HOP
from errors import ConfigurationError
from pipeline import DEFAULT_FADE_MS, EnhanceSettings, Method, Scope
from transforms import (DEFAULT_GMM_COMPONENTS, DEFAULT_GMM_ORDER, DEFAULT_NMF_ITERS,
                        DEFAULT_NMF_RANK, DEFAULT_SEED, GMM_MAX_ITER, GMM_TOL,
                        SpectralCompressionConfig, TemporalEnhanceConfig)

# Initialize logger
logger = logging.getLogger(__name__)

EFFECTIVE_CONFIG_NAME = 'effective_config.json'

# Environment variable -> dotted config key
ENV_OVERRIDES = {
    'CLP_SEED': 'seed',
    'CLP_JOBS': 'pipeline.jobs',
    'CLP_LEDGER_URL': 'paths.ledger_url',
    'CLP_LOG_LEVEL': 'log_level',
}


@dataclass(frozen=True)
class AudioConfig:
    enhance_rate: int = ENHANCE_RATE
    metrics_rate: int = METRICS_RATE


@dataclass(frozen=True)
class StftConfig:
    frame_len: int = DEFAULT_FRAME_LEN
    hop: int = DEFAULT_HOP


@dataclass(frozen=True)
class TemporalConfig:
    gci_window_ms: float = 2.0
    base_weight: float = 0.3
    lpc_order: int = 12
    vowel_only_gate: bool = True    # keep GCIs in voiced frames only


@dataclass(frozen=True)
class GmmConfig:
    num_components: int = DEFAULT_GMM_COMPONENTS
    order: int = DEFAULT_GMM_ORDER
    include_c0: bool = False
    max_iter: int = GMM_MAX_ITER
    tol: float = GMM_TOL


@dataclass(frozen=True)
class NmfConfig:
    rank: int = DEFAULT_NMF_RANK
    iters: int = DEFAULT_NMF_ITERS


@dataclass(frozen=True)
class PipelineConfig:
    scope: str = Scope.BOTH.value
    method: str = Method.RULE.value
    fade_ms: float = DEFAULT_FADE_MS
    jobs: int = 1


@dataclass(frozen=True)
class PathsConfig:
    gmm_model: str = ''
    nmf_model: str = ''
    template_index: str = ''
    template_bank: str = ''
    ledger_url: str = ''


@dataclass(frozen=True)
class RunConfig:
    audio: AudioConfig = field(default_factory=AudioConfig)
    stft: StftConfig = field(default_factory=StftConfig)
    compression: SpectralCompressionConfig = field(default_factory=SpectralCompressionConfig)
    temporal: TemporalConfig = field(default_factory=TemporalConfig)
    gmm: GmmConfig = field(default_factory=GmmConfig)
    nmf: NmfConfig = field(default_factory=NmfConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    seed: int = DEFAULT_SEED
    log_level: str = 'INFO'

    def to_dict(self):
        return asdict(self)


def _coerce(value, current, key):
    """Convert value to the type of the current setting."""
    kind = type(current)
    try:
        if kind is bool:
            if isinstance(value, str):
                lowered = value.strip().lower()
                if lowered not in ('1', '0', 'true', 'false', 'yes', 'no'):
                    raise ValueError(value)
                return lowered in ('1', 'true', 'yes')
            return bool(value)
        if kind is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if kind is float:
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigurationError(f"Invalid value {value!r} for '{key}'") from None


def _apply(obj, values, prefix=''):
    """Return obj with values applied; unknown keys raise ConfigurationError."""
    if not isinstance(values, dict):
        raise ConfigurationError(f"Section '{prefix.rstrip('.')}' must be an object")
    known = {f.name: f for f in fields(obj)}
    changes = {}
    for key, value in values.items():
        if key not in known:
            raise ConfigurationError(f"Unknown configuration key '{prefix}{key}'")
        current = getattr(obj, key)
        if is_dataclass(current):
            changes[key] = _apply(current, value, f"{prefix}{key}.")
        else:
            changes[key] = _coerce(value, current, prefix + key)
    try:
        return replace(obj, **changes)
    except ValueError as e:
        raise ConfigurationError(f"Invalid configuration: {str(e)}") from e


def _nest(dotted):
    nested = {}
    for key, value in dotted.items():
        node = nested
        parts = key.split('.')
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return nested


def _validate(cfg):
    if cfg.audio.enhance_rate != ENHANCE_RATE or cfg.audio.metrics_rate != METRICS_RATE:
        raise ConfigurationError(
            f"Processing rates are fixed at {ENHANCE_RATE} Hz (enhancement) and {METRICS_RATE} Hz (metrics)")
    try:
        Scope(cfg.pipeline.scope)
        Method(cfg.pipeline.method)
    except ValueError as e:
        raise ConfigurationError(str(e)) from e
    if cfg.pipeline.jobs < 1:
        raise ConfigurationError(f"jobs must be at least 1, got {cfg.pipeline.jobs}")
    if cfg.pipeline.fade_ms < 0:
        raise ConfigurationError(f"fade_ms must be non-negative, got {cfg.pipeline.fade_ms}")
    try:
        temporal_config(cfg)
    except ValueError as e:
        raise ConfigurationError(f"Invalid temporal settings: {str(e)}") from e
    return cfg


def load_config(path=None, env=None, overrides=None):
    """
    Build the effective RunConfig.

    Args:
        path: optional JSON config file
        env: environment mapping (defaults to os.environ)
        overrides: dotted keys from command-line flags; None values are ignored

    Returns:
        RunConfig
    """
    cfg = RunConfig()
    if path:
        try:
            with open(path, encoding='utf-8') as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"Config file {path} is not valid JSON: {str(e)}") from e
        except OSError as e:
            raise ConfigurationError(f"Cannot read config file {path}: {str(e)}") from e
        cfg = _apply(cfg, data)
        logger.debug(f"Loaded configuration from {path}")

    env = os.environ if env is None else env
    from_env = {key: env[name] for name, key in ENV_OVERRIDES.items() if env.get(name)}
    if from_env:
        cfg = _apply(cfg, _nest(from_env))

    if overrides:
        cfg = _apply(cfg, _nest({k: v for k, v in overrides.items() if v is not None}))
    return _validate(cfg)


def write_effective_config(cfg, out_dir):
    """Echo the configuration next to a command's outputs."""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, EFFECTIVE_CONFIG_NAME)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(cfg.to_dict(), f, indent=2, sort_keys=True)
        f.write('\n')
    return path


def temporal_config(cfg):
    t = cfg.temporal
    return TemporalEnhanceConfig(gci_window_ms=t.gci_window_ms, base_weight=t.base_weight, lpc_order=t.lpc_order)


def enhance_settings(cfg):
    return EnhanceSettings(
        compression=cfg.compression,
        temporal=temporal_config(cfg),
        fade_ms=cfg.pipeline.fade_ms,
        nmf_iters=cfg.nmf.iters,
        gate_voiced=cfg.temporal.vowel_only_gate,
    )
