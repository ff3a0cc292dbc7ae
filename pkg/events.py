"""
Events

Glottal closure instants (GCIs) from zero-frequency filtering, and a rule-based
voicing track. These anchor temporal enhancement of vowels.
"""
import logging
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter1d
from scipy.signal import correlate

from dsp_core import frame_signal
from errors import TooShortError

# Initialize logger
logger = logging.getLogger(__name__)

MIN_ZFF_DURATION_MS = 100.0
MIN_PERIOD_MS = 2.5         # 400 Hz
MAX_PERIOD_MS = 20.0        # 50 Hz
DEFAULT_PERIOD_MS = 5.0     # used when the signal has no periodicity at all
TREND_REMOVAL_PASSES = 2
MERGE_FRACTION = 0.25
MAX_GAP_FACTOR = 4.0      # longer gaps separate voiced runs

# Voicing rule
VOICING_FRAME_MS = 25.0
VOICING_HOP_MS = 10.0
VOICING_ENERGY_RATIO = 0.01
VOICING_MAX_ZCR = 0.25
VOICING_MIN_PEAK = 0.3


@dataclass(frozen=True, eq=False)
class GciSequence:
    instants: np.ndarray    # sample indices, strictly increasing
    mean_period: float      # samples

    def __post_init__(self):
        instants = np.asarray(self.instants, dtype=np.int64).reshape(-1)
        if instants.size > 1 and np.any(np.diff(instants) <= 0):
            raise ValueError("GCI instants must be strictly increasing")
        object.__setattr__(self, 'instants', instants)

    def __len__(self):
        return self.instants.shape[0]

    def runs(self):
        """Instants split wherever consecutive GCIs are more than MAX_GAP_FACTOR periods apart."""
        if self.instants.size == 0:
            return []
        breaks = np.flatnonzero(np.diff(self.instants) > MAX_GAP_FACTOR * self.mean_period) + 1
        return np.split(self.instants, breaks)

    def shifted(self, offset, length=None):
        """Instants moved by offset, optionally restricted to [0, length)."""
        moved = self.instants + offset
        if length is not None:
            moved = moved[(moved >= 0) & (moved < length)]
        return GciSequence(moved, self.mean_period)


@dataclass(frozen=True, eq=False)
class VoicingTrack:
    flags: np.ndarray       # one boolean per frame
    frame_len: int
    hop: int
    sample_rate: int
    num_samples: int

    def __post_init__(self):
        flags = np.asarray(self.flags, dtype=bool).reshape(-1)
        expected = 1 + int(np.ceil(max(self.num_samples - self.frame_len, 0) / self.hop))
        if flags.shape[0] != expected:
            raise ValueError(f"Voicing track has {flags.shape[0]} frames, expected {expected}")
        object.__setattr__(self, 'flags', flags)

    @property
    def voiced_fraction(self):
        return float(self.flags.mean()) if self.flags.size else 0.0

    def sample_mask(self):
        """Per-sample voiced mask (a sample is voiced if any voiced frame covers it)."""
        mask = np.zeros(self.num_samples, dtype=bool)
        for index in np.flatnonzero(self.flags):
            start = index * self.hop
            mask[start:start + self.frame_len] = True
        return mask


def _period_bounds(sample_rate):
    lo = int(round(MIN_PERIOD_MS * sample_rate / 1000.0))
    hi = int(round(MAX_PERIOD_MS * sample_rate / 1000.0))
    return lo, hi


def estimate_mean_period(x, sample_rate):
    """Mean pitch period in samples from the autocorrelation peak in the 50-400 Hz lag range."""
    lo, hi = _period_bounds(sample_rate)
    x = np.asarray(x, dtype=np.float64)
    x = x - x.mean()
    if x.shape[0] <= hi or not np.any(x):
        return float(DEFAULT_PERIOD_MS * sample_rate / 1000.0)
    ac = correlate(x, x, mode='full', method='fft')[x.shape[0] - 1:]
    period = lo + int(np.argmax(ac[lo:hi + 1]))
    return float(np.clip(period, lo, hi))


def _remove_trend(y, window):
    return y - uniform_filter1d(y, size=window, mode='nearest')


def _zff(x, sample_rate, period=None):
    """Zero-frequency filtered signal and the period used for trend removal."""
    if period is None:
        period = estimate_mean_period(x, sample_rate)
    window = 2 * int(period // 2) + 1

    y = np.diff(np.asarray(x, dtype=np.float64), prepend=x[0] if len(x) else 0.0)
    # Two zero-frequency resonators, each a double cumulative sum; the trend
    # is pulled out after each one to keep the accumulation bounded
    for _ in range(2):
        y = np.cumsum(np.cumsum(y))
        y = _remove_trend(y, window)
    for _ in range(TREND_REMOVAL_PASSES):
        y = _remove_trend(y, window)
    return y, float(period)


def zero_frequency_filter(w, period=None):
    """
    Zero-frequency filter the signal.

    Args:
        w: 16 kHz Waveform of at least 100 ms
        period: trend-removal window in samples (estimated when omitted)

    Returns:
        filtered Waveform, same length and rate
    """
    min_len = int(MIN_ZFF_DURATION_MS * w.sample_rate / 1000.0)
    if len(w) < min_len:
        raise TooShortError(f"Zero-frequency filtering needs {min_len} samples, got {len(w)}")
    y, _ = _zff(w.samples, w.sample_rate, period)
    return w.with_samples(y)


def _drop_stranded(instants, mean_period):
    """Remove instants more than MAX_GAP_FACTOR periods from every neighbour."""
    instants = np.asarray(instants, dtype=np.int64)
    if instants.size < 2:
        return instants
    close = np.diff(instants) <= MAX_GAP_FACTOR * mean_period
    keep = np.zeros(instants.size, dtype=bool)
    keep[:-1] |= close
    keep[1:] |= close
    return instants[keep]


def detect_gci(w, period=None):
    """
    Glottal closure instants as negative-to-positive zero crossings of the
    zero-frequency filtered signal. Crossings closer than a quarter period are
    merged, keeping the steeper one. Instants more than four periods from both
    neighbours are dropped, so every gap inside a run stays within
    [0.25, 4] periods.
    """
    if len(w) < 2:
        return GciSequence(np.zeros(0, dtype=np.int64), float(DEFAULT_PERIOD_MS * w.sample_rate / 1000.0))
    if not np.any(w.samples):
        return GciSequence(np.zeros(0, dtype=np.int64), estimate_mean_period(w.samples, w.sample_rate))

    y, mean_period = _zff(w.samples, w.sample_rate, period)
    candidates = np.flatnonzero((y[:-1] < 0) & (y[1:] >= 0)) + 1
    slopes = y[candidates] - y[candidates - 1]

    min_gap = MERGE_FRACTION * mean_period
    kept = []
    kept_slopes = []
    for index, slope in zip(candidates, slopes):
        if kept and index - kept[-1] < min_gap:
            if slope > kept_slopes[-1]:
                kept[-1] = index
                kept_slopes[-1] = slope
            continue
        kept.append(index)
        kept_slopes.append(slope)

    instants = _drop_stranded(kept, mean_period)
    logger.debug(f"GCI detection: {len(candidates)} crossings, {len(instants)} kept, period {mean_period:.1f} samples")
    return GciSequence(instants, mean_period)


def voicing(w):
    """
    Per-frame voiced flags (25 ms frames, 10 ms hop).

    A frame is voiced when its energy exceeds 1% of the loudest frame, its zero
    crossing rate is below 0.25 per sample, and its normalized autocorrelation
    peak in the 50-400 Hz lag range exceeds 0.3.
    """
    frame_len = int(round(VOICING_FRAME_MS * w.sample_rate / 1000.0))
    hop = int(round(VOICING_HOP_MS * w.sample_rate / 1000.0))
    frames = frame_signal(w.samples, frame_len, hop)
    lo, hi = _period_bounds(w.sample_rate)
    hi = min(hi, frame_len - 1)

    energy = np.sum(frames ** 2, axis=1)
    max_energy = energy.max() if energy.size else 0.0
    flags = np.zeros(frames.shape[0], dtype=bool)
    if max_energy <= 0:
        return VoicingTrack(flags, frame_len, hop, w.sample_rate, len(w))

    signs = np.signbit(frames)
    zcr = np.count_nonzero(signs[:, 1:] != signs[:, :-1], axis=1) / frame_len

    for index, frame in enumerate(frames):
        if energy[index] <= VOICING_ENERGY_RATIO * max_energy or zcr[index] >= VOICING_MAX_ZCR:
            continue
        centered = frame - frame.mean()
        ac = np.correlate(centered, centered, mode='full')[frame_len - 1:]
        if ac[0] <= 0:
            continue
        flags[index] = ac[lo:hi + 1].max() / ac[0] > VOICING_MIN_PEAK

    return VoicingTrack(flags, frame_len, hop, w.sample_rate, len(w))


def voiced_gcis(w, track=None):
    """GCIs restricted to voiced samples of w."""
    if track is None:
        track = voicing(w)
    gcis = detect_gci(w)
    if len(gcis) == 0:
        return gcis
    mask = track.sample_mask()
    gated = _drop_stranded(gcis.instants[mask[gcis.instants]], gcis.mean_period)
    return GciSequence(gated, gcis.mean_period)
