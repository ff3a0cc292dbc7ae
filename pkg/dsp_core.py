"""
DSP Core

Shared numerical kernels: framing, STFT/ISTFT with perfect reconstruction, mel
cepstra, one-third-octave band energies, linear prediction, dynamic time warping
and cross-fade concatenation.
"""
import logging
from dataclasses import dataclass

import numpy as np
from dtw import dtw
from numpy.lib.stride_tricks import sliding_window_view
from pystoi.utils import thirdoct
from scipy.fft import dct
from scipy.linalg import LinAlgError, solve_toeplitz
from scipy.signal import get_window, lfilter
from scipy.spatial.distance import cdist

from audio_io import METRICS_RATE, Waveform
from errors import (DegenerateSignalError, DimensionMismatchError,
                    SpectrogramError, TooShortError)

# Initialize logger
logger = logging.getLogger(__name__)

# STFT defaults (32 ms frames at 16 kHz)
DEFAULT_FRAME_LEN = 512
DEFAULT_HOP = 128

# Mel cepstra
NUM_MEL_FILTERS = 26
DEFAULT_CEPSTRAL_ORDER = 13
CEPSTRA_FRAME_MS = 25.0
CEPSTRA_HOP_MS = 10.0
LOG_FLOOR = 1e-10

# One-third-octave analysis (canonical STOI recipe at 10 kHz)
THIRD_OCT_FRAME_LEN = 256
THIRD_OCT_HOP = 128
THIRD_OCT_NFFT = 512
NUM_THIRD_OCT_BANDS = 15
THIRD_OCT_MIN_FREQ = 150

DEFAULT_LPC_ORDER = 12


def _is_power_of_two(n):
    return n > 0 and (n & (n - 1)) == 0


def hann_window(frame_len):
    """Periodic Hann window; overlap-adds to a constant at hop = N/2 or N/4."""
    return get_window('hann', frame_len, fftbins=True)


@dataclass(frozen=True, eq=False)
class Spectrogram:
    frames: np.ndarray      # num_frames x (frame_len // 2 + 1), complex
    frame_len: int
    hop: int
    sample_rate: int
    window: str = 'hann'

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.complex128)
        if frames.ndim != 2:
            raise SpectrogramError(f"Spectrogram frames must be 2-D, got shape {frames.shape}")
        _check_frame_params(self.frame_len, self.hop)
        if frames.shape[1] != self.frame_len // 2 + 1:
            raise SpectrogramError(
                f"Expected {self.frame_len // 2 + 1} bins for frame_len {self.frame_len}, got {frames.shape[1]}")
        if self.window != 'hann':
            raise SpectrogramError(f"Unsupported window {self.window}")
        object.__setattr__(self, 'frames', frames)

    @property
    def num_frames(self):
        return self.frames.shape[0]

    @property
    def magnitude(self):
        return np.abs(self.frames)

    @property
    def phase(self):
        return np.angle(self.frames)

    def with_frames(self, frames):
        return Spectrogram(frames, self.frame_len, self.hop, self.sample_rate, self.window)


def _check_frame_params(frame_len, hop):
    if not _is_power_of_two(frame_len):
        raise SpectrogramError(f"frame_len must be a power of two, got {frame_len}")
    if hop not in (frame_len // 2, frame_len // 4):
        raise SpectrogramError(f"hop {hop} is not COLA-valid for a Hann window of {frame_len}")


def stft(w, frame_len=DEFAULT_FRAME_LEN, hop=DEFAULT_HOP):
    """
    Hann-windowed short-time Fourier transform without centering.

    Frame t covers samples [t*hop, t*hop + frame_len).
    """
    _check_frame_params(frame_len, hop)
    x = w.samples
    if x.shape[0] < frame_len:
        raise TooShortError(f"Signal of {x.shape[0]} samples is shorter than one frame ({frame_len})")
    frames = sliding_window_view(x, frame_len)[::hop] * hann_window(frame_len)
    return Spectrogram(np.fft.rfft(frames, axis=1), frame_len, hop, w.sample_rate)


def istft(s, original_len):
    """Overlap-add inverse of stft, normalized by the summed analysis window."""
    if original_len < 0:
        raise SpectrogramError(f"Invalid original length {original_len}")
    frames = np.fft.irfft(s.frames, n=s.frame_len, axis=1)
    window = hann_window(s.frame_len)
    total = max(original_len, (s.num_frames - 1) * s.hop + s.frame_len if s.num_frames else 0)
    out = np.zeros(total)
    env = np.zeros(total)
    for t in range(s.num_frames):
        start = t * s.hop
        out[start:start + s.frame_len] += frames[t]
        env[start:start + s.frame_len] += window
    covered = env > 1e-8
    out[covered] /= env[covered]
    out[~covered] = 0.0
    return Waveform(out[:original_len], s.sample_rate)


def padded_stft(w, frame_len=DEFAULT_FRAME_LEN, hop=DEFAULT_HOP):
    """STFT of w zero-padded by frame_len on both sides so every sample sits in the COLA interior."""
    if len(w) < frame_len:
        raise TooShortError(f"Segment of {len(w)} samples is shorter than one frame ({frame_len})")
    padded = w.with_samples(np.pad(w.samples, frame_len))
    return stft(padded, frame_len, hop)


def padded_istft(s, original_len):
    """Inverse of padded_stft, cropped back to original_len samples."""
    full = istft(s, original_len + 2 * s.frame_len)
    return Waveform(full.samples[s.frame_len:s.frame_len + original_len], s.sample_rate)


@dataclass(frozen=True, eq=False)
class CepstraTrack:
    frames: np.ndarray      # num_frames x order
    order: int
    frame_len: int
    hop: int
    sample_rate: int

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[1] != self.order:
            raise DimensionMismatchError(f"Cepstra shape {frames.shape} does not match order {self.order}")
        if self.order < 2:
            raise ValueError("Cepstral order must be at least 2")
        if not np.all(np.isfinite(frames)):
            raise ValueError("Cepstra must be finite")
        object.__setattr__(self, 'frames', frames)

    @property
    def num_frames(self):
        return self.frames.shape[0]


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(sample_rate, nfft, num_filters=NUM_MEL_FILTERS):
    """
    Triangular mel filters spanning 0 Hz to Nyquist, each normalized to unit sum
    so a flat power spectrum yields equal filter outputs.

    Returns:
        num_filters x (nfft // 2 + 1) weight matrix
    """
    freqs = np.fft.rfftfreq(nfft, d=1.0 / sample_rate)
    edges = _mel_to_hz(np.linspace(0.0, _hz_to_mel(sample_rate / 2.0), num_filters + 2))
    bank = np.zeros((num_filters, freqs.shape[0]))
    for m in range(num_filters):
        lo, center, hi = edges[m], edges[m + 1], edges[m + 2]
        rising = (freqs - lo) / (center - lo)
        falling = (hi - freqs) / (hi - center)
        bank[m] = np.maximum(0.0, np.minimum(rising, falling))
        total = bank[m].sum()
        if total <= 0:
            # Filter narrower than a bin: take the nearest bin
            bank[m, np.argmin(np.abs(freqs - center))] = 1.0
        else:
            bank[m] /= total
    return bank


def cepstra_frame_params(sample_rate):
    """(frame_len, hop, nfft) for 25 ms / 10 ms analysis at sample_rate."""
    frame_len = int(round(CEPSTRA_FRAME_MS * sample_rate / 1000.0))
    hop = int(round(CEPSTRA_HOP_MS * sample_rate / 1000.0))
    nfft = 1 << int(np.ceil(np.log2(frame_len)))
    return frame_len, hop, nfft


def frame_signal(x, frame_len, hop):
    """Frames of x (num_frames x frame_len); the last partial frame is zero-padded."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] < frame_len:
        x = np.pad(x, (0, frame_len - x.shape[0]))
    n_frames = 1 + int(np.ceil((x.shape[0] - frame_len) / hop))
    needed = (n_frames - 1) * hop + frame_len
    x = np.pad(x, (0, needed - x.shape[0]))
    return sliding_window_view(x, frame_len)[::hop][:n_frames]


def mel_cepstra(w, order=DEFAULT_CEPSTRAL_ORDER):
    """
    Mel-frequency cepstra c_0..c_{order-1} on 25 ms Hann frames with a 10 ms hop.

    Power spectrum -> 26 mel filters -> log (floored) -> orthonormal DCT-II.
    """
    if not 2 <= order <= NUM_MEL_FILTERS:
        raise ValueError(f"Cepstral order must be in [2, {NUM_MEL_FILTERS}], got {order}")
    frame_len, hop, nfft = cepstra_frame_params(w.sample_rate)
    frames = frame_signal(w.samples, frame_len, hop) * get_window('hann', frame_len, fftbins=True)
    power = np.abs(np.fft.rfft(frames, n=nfft, axis=1)) ** 2
    bank = mel_filterbank(w.sample_rate, nfft)
    log_energy = np.log(np.maximum(power @ bank.T, LOG_FLOOR))
    ceps = dct(log_energy, type=2, norm='ortho', axis=1)[:, :order]
    return CepstraTrack(ceps, order, frame_len, hop, w.sample_rate)


def cepstra_to_log_envelope(ceps, nfft, sample_rate):
    """
    Log power envelope on the rfft grid implied by mel cepstra.

    Inverts the truncated DCT to 26 log filter energies and interpolates them
    from the filter centers onto the linear frequency grid.
    """
    ceps = np.atleast_2d(ceps)
    padded = np.zeros((ceps.shape[0], NUM_MEL_FILTERS))
    padded[:, :ceps.shape[1]] = ceps
    log_energy = dct(padded, type=3, norm='ortho', axis=1)
    centers = _mel_to_hz(np.linspace(0.0, _hz_to_mel(sample_rate / 2.0), NUM_MEL_FILTERS + 2))[1:-1]
    freqs = np.fft.rfftfreq(nfft, d=1.0 / sample_rate)
    return np.stack([np.interp(freqs, centers, row) for row in log_energy])


@dataclass(frozen=True, eq=False)
class ThirdOctaveEnergies:
    frames: np.ndarray          # num_frames x 15
    center_freqs: np.ndarray    # 15 band centers, Hz

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[1] != NUM_THIRD_OCT_BANDS:
            raise DimensionMismatchError(f"Expected {NUM_THIRD_OCT_BANDS} bands, got shape {frames.shape}")
        if np.any(frames < 0):
            raise ValueError("Band energies must be non-negative")
        object.__setattr__(self, 'frames', frames)

    @property
    def num_frames(self):
        return self.frames.shape[0]


def third_octave_band_matrix(sample_rate=METRICS_RATE):
    """(band matrix 15 x 257, center frequencies) for the 512-point FFT grid."""
    obm, cf = thirdoct(sample_rate, THIRD_OCT_NFFT, NUM_THIRD_OCT_BANDS, THIRD_OCT_MIN_FREQ)
    return np.asarray(obm, dtype=np.float64), np.asarray(cf, dtype=np.float64)


def third_octave_spectra(x):
    """Complex 512-point spectra of 256-sample frames, hop 128, STOI window."""
    x = np.asarray(x, dtype=np.float64)
    window = np.hanning(THIRD_OCT_FRAME_LEN + 2)[1:-1]
    if x.shape[0] < THIRD_OCT_FRAME_LEN:
        return np.zeros((0, THIRD_OCT_NFFT // 2 + 1), dtype=np.complex128)
    frames = sliding_window_view(x, THIRD_OCT_FRAME_LEN)[::THIRD_OCT_HOP] * window
    return np.fft.rfft(frames, n=THIRD_OCT_NFFT, axis=1)


def third_octave_energies(w):
    """Per-frame energies of the 15 one-third-octave bands (input at 10 kHz)."""
    if w.sample_rate != METRICS_RATE:
        raise ValueError(f"third_octave_energies expects {METRICS_RATE} Hz input, got {w.sample_rate}")
    obm, cf = third_octave_band_matrix(w.sample_rate)
    spectra = third_octave_spectra(w.samples)
    energies = (np.abs(spectra) ** 2) @ obm.T
    return ThirdOctaveEnergies(energies, cf)


def lpc(frame, order=DEFAULT_LPC_ORDER):
    """
    Autocorrelation-method linear prediction.

    Args:
        frame: real samples
        order: prediction order, less than the frame length

    Returns:
        (coeffs, residual) where coeffs = [1, a_1, ..., a_p] is the inverse
        filter A(z) and residual = A(z) applied to the frame
    """
    x = np.asarray(frame, dtype=np.float64)
    if order >= x.shape[0]:
        raise ValueError(f"LPC order {order} must be less than frame length {x.shape[0]}")
    r = np.correlate(x, x, mode='full')[x.shape[0] - 1:x.shape[0] + order]
    if r[0] <= 0.0:
        raise DegenerateSignalError("Singular autocorrelation (all-zero frame)")
    try:
        a = solve_toeplitz(r[:order], -r[1:order + 1])
    except LinAlgError as e:
        raise DegenerateSignalError(f"Singular autocorrelation: {str(e)}") from e
    coeffs = np.concatenate([[1.0], a])
    if not np.all(np.isfinite(coeffs)):
        raise DegenerateSignalError("Non-finite LPC coefficients")
    residual = lfilter(coeffs, [1.0], x)
    return coeffs, residual


def lpc_synthesize(coeffs, residual):
    """All-pole synthesis 1/A(z) of a residual."""
    return lfilter([1.0], coeffs, residual)


@dataclass(frozen=True)
class DtwPath:
    pairs: tuple    # ((i, j), ...)
    cost: float

    def __len__(self):
        return len(self.pairs)

    def steps(self):
        return [(i1 - i0, j1 - j0) for (i0, j0), (i1, j1) in zip(self.pairs[:-1], self.pairs[1:])]


def dtw_align(a, b, distance='euclidean'):
    """
    Dynamic time warping with the symmetric (+1,0)/(0,+1)/(+1,+1) step pattern.

    Cost is the sum of local distances over every cell on the path.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if distance != 'euclidean':
        raise ValueError(f"Unsupported distance {distance}")
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("DTW inputs must be non-empty")
    if a.shape[1] != b.shape[1]:
        raise DimensionMismatchError(f"Feature dimensions differ: {a.shape[1]} vs {b.shape[1]}")

    local = cdist(a, b, metric='euclidean')
    m, n = local.shape
    if m == 1 or n == 1:
        # Only one path exists
        pairs = tuple((min(k, m - 1), min(k, n - 1)) for k in range(max(m, n)))
        return DtwPath(pairs, float(local.sum()))
    # symmetric1 weights every step by one
    alignment = dtw(local, step_pattern='symmetric1')
    pairs = tuple(zip(alignment.index1.tolist(), alignment.index2.tolist()))
    return DtwPath(pairs, float(alignment.distance))


def cross_fade_concat(segments, fade_ms):
    """
    Join segments, overlapping neighbours by fade_ms with complementary raised-cosine ramps.

    Output length is sum(len) - (n - 1) * fade_samples.
    """
    segments = list(segments)
    if not segments:
        raise ValueError("No segments to concatenate")
    rate = segments[0].sample_rate
    if any(seg.sample_rate != rate for seg in segments):
        raise ValueError("All segments must share one sample rate")
    if fade_ms < 0:
        raise ValueError(f"Fade must be non-negative, got {fade_ms}")
    fade = int(round(fade_ms * rate / 1000.0))
    if len(segments) > 1:
        for index, seg in enumerate(segments):
            if len(seg) < 2 * fade:
                raise TooShortError(f"Segment {index} has {len(seg)} samples, needs at least {2 * fade}")
    if len(segments) == 1 or fade == 0:
        return Waveform(np.concatenate([seg.samples for seg in segments]), rate)

    ramp_in = np.sin(0.5 * np.pi * (np.arange(fade) + 0.5) / fade) ** 2
    ramp_out = 1.0 - ramp_in
    parts = [segments[0].samples[:-fade]]
    tail = segments[0].samples[-fade:]
    for seg in segments[1:]:
        x = seg.samples
        parts.append(tail * ramp_out + x[:fade] * ramp_in)
        parts.append(x[fade:len(x) - fade])
        tail = x[len(x) - fade:]
    parts.append(tail)
    return Waveform(np.concatenate(parts), rate)


def band_energy(w, lo_hz, hi_hz):
    """Energy of w between lo_hz and hi_hz from its full-length power spectrum."""
    spectrum = np.abs(np.fft.rfft(w.samples)) ** 2
    freqs = np.fft.rfftfreq(len(w), d=1.0 / w.sample_rate)
    return float(spectrum[(freqs >= lo_hz) & (freqs < hi_hz)].sum())


def spectral_centroid(w):
    """Power-weighted mean frequency in Hz."""
    spectrum = np.abs(np.fft.rfft(w.samples)) ** 2
    total = spectrum.sum()
    if total <= 0:
        return 0.0
    freqs = np.fft.rfftfreq(len(w), d=1.0 / w.sample_rate)
    return float((freqs * spectrum).sum() / total)


def harmonic_to_noise_ratio(w, min_f0=50.0, max_f0=400.0, frame_ms=40.0, hop_ms=10.0):
    """
    Autocorrelation harmonic-to-noise ratio in dB, averaged over frames.

    Per frame, r is the normalized autocorrelation peak in the pitch lag range
    and HNR = 10 log10(r / (1 - r)).
    """
    frame_len = int(round(frame_ms * w.sample_rate / 1000.0))
    hop = int(round(hop_ms * w.sample_rate / 1000.0))
    lag_lo = int(w.sample_rate / max_f0)
    lag_hi = min(int(w.sample_rate / min_f0), frame_len - 1)
    values = []
    for frame in frame_signal(w.samples, frame_len, hop):
        frame = frame - frame.mean()
        ac = np.correlate(frame, frame, mode='full')[frame_len - 1:]
        if ac[0] <= 0:
            continue
        r = np.clip(ac[lag_lo:lag_hi + 1].max() / ac[0], 1e-6, 1 - 1e-6)
        values.append(10.0 * np.log10(r / (1.0 - r)))
    if not values:
        return float('-inf')
    return float(np.mean(values))
