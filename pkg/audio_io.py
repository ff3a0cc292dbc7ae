"""
Audio I/O

Reads, writes, resamples and normalizes mono audio. Every other module works on
the in-memory Waveform defined here.
"""
import logging
import os
from dataclasses import dataclass
from math import gcd

import numpy as np
import soundfile as sf
from scipy.signal import firwin, resample_poly

from errors import DegenerateSignalError, UnsupportedCodecError, WavFormatError

# Initialize logger
logger = logging.getLogger(__name__)

# Canonical rates
SOURCE_RATE = 48000      # Recordings are stored at 48 kHz
ENHANCE_RATE = 16000     # Enhancement runs at 16 kHz
METRICS_RATE = 10000     # STOI-family metrics run at 10 kHz
CANONICAL_RATES = (8000, 10000, 16000, 48000)

PCM16_SCALE = 32768.0
KAISER_BETA = 8.0
TAPS_PER_BRANCH = 32

SUPPORTED_SUBTYPES = ('PCM_16', 'FLOAT')


@dataclass(frozen=True, eq=False)
class Waveform:
    """Mono float64 samples with their sample rate. Immutable."""
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.array(self.samples, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(samples)):
            raise ValueError("Waveform samples must be finite")
        rate = int(self.sample_rate)
        if rate <= 0 or rate != self.sample_rate:
            raise ValueError(f"Invalid sample rate: {self.sample_rate}")
        samples.setflags(write=False)
        object.__setattr__(self, 'samples', samples)
        object.__setattr__(self, 'sample_rate', rate)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self):
        """Duration in seconds."""
        return len(self) / self.sample_rate

    def rms(self):
        if len(self) == 0:
            return 0.0
        return float(np.sqrt(np.mean(self.samples ** 2)))

    def with_samples(self, samples):
        """New waveform at the same rate."""
        return Waveform(samples, self.sample_rate)

    def slice(self, start, end):
        return Waveform(self.samples[start:end], self.sample_rate)


def read_wav(path):
    """
    Read a PCM16 or float32 WAV file as a mono Waveform.

    Args:
        path: file path

    Returns:
        Waveform scaled to [-1, 1]; multi-channel input is averaged to mono
    """
    path = os.fspath(path)
    if not os.path.exists(path):
        raise FileNotFoundError(path)

    try:
        info = sf.info(path)
    except RuntimeError as e:
        raise WavFormatError(f"Malformed audio file {path}: {str(e)}") from e

    if info.format not in ('WAV', 'WAVEX'):
        raise WavFormatError(f"{path} is not a RIFF/WAVE file (format {info.format})")
    if info.subtype not in SUPPORTED_SUBTYPES:
        raise UnsupportedCodecError(f"{path} uses unsupported encoding {info.subtype}")

    try:
        if info.subtype == 'PCM_16':
            data, rate = sf.read(path, dtype='int16', always_2d=True)
            data = data.astype(np.float64) / PCM16_SCALE
        else:
            data, rate = sf.read(path, dtype='float32', always_2d=True)
            data = data.astype(np.float64)
    except RuntimeError as e:
        raise WavFormatError(f"Error reading {path}: {str(e)}") from e

    samples = data.mean(axis=1) if data.shape[1] > 1 else data[:, 0]
    logger.debug(f"Read {path}: {len(samples)} samples at {rate} Hz, {info.channels} channel(s)")
    return Waveform(samples, rate)


def quantize_pcm16(samples):
    """Saturating float to int16 conversion."""
    scaled = np.round(np.asarray(samples, dtype=np.float64) * PCM16_SCALE)
    return np.clip(scaled, -PCM16_SCALE, PCM16_SCALE - 1).astype(np.int16)


def write_wav(w, path):
    """Write a Waveform as a 16-bit PCM mono WAV file (saturating, not wrapping)."""
    path = os.fspath(path)
    data = quantize_pcm16(w.samples)
    try:
        sf.write(path, data, w.sample_rate, subtype='PCM_16', format='WAV')
    except RuntimeError as e:
        raise OSError(f"Error writing {path}: {str(e)}") from e
    logger.debug(f"Wrote {path}: {len(data)} samples at {w.sample_rate} Hz")


def _anti_alias_filter(up, down):
    """Kaiser-windowed sinc lowpass, 32 taps per polyphase branch."""
    max_rate = max(up, down)
    numtaps = TAPS_PER_BRANCH * max_rate + 1
    return firwin(numtaps, 1.0 / max_rate, window=('kaiser', KAISER_BETA))


def resample(w, target_rate):
    """
    Band-limited rational resampling.

    Args:
        w: input Waveform
        target_rate: one of CANONICAL_RATES

    Returns:
        Waveform of length round(len(w) * target_rate / w.sample_rate)
    """
    target_rate = int(target_rate)
    if target_rate <= 0:
        raise ValueError(f"Target rate must be positive, got {target_rate}")
    if target_rate not in CANONICAL_RATES:
        raise ValueError(f"Target rate {target_rate} is not one of {CANONICAL_RATES}")
    if target_rate == w.sample_rate:
        return w

    n_out = int(round(len(w) * target_rate / w.sample_rate))
    if len(w) == 0:
        return Waveform(np.zeros(0), target_rate)

    g = gcd(target_rate, w.sample_rate)
    up = target_rate // g
    down = w.sample_rate // g
    taps = _anti_alias_filter(up, down)
    out = resample_poly(w.samples, up, down, window=taps)

    if out.shape[0] >= n_out:
        out = out[:n_out]
    else:
        out = np.concatenate([out, np.zeros(n_out - out.shape[0])])
    return Waveform(out, target_rate)


def normalize_rms(w, target_rms):
    """Scale w by a positive constant so its RMS equals target_rms."""
    if target_rms <= 0:
        raise ValueError(f"Target RMS must be positive, got {target_rms}")
    current = w.rms()
    if current == 0.0:
        raise DegenerateSignalError("Cannot normalize an all-zero signal")
    return w.with_samples(w.samples * (target_rms / current))
