"""
Metrics

Objective intelligibility and spectral-distance scoring against healthy word
templates: STOI / ESTOI kernels, template alignment, P-STOI, P-ESTOI and mel
cepstral distortion.
"""
import csv
import logging
import os
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from audio_io import ENHANCE_RATE, METRICS_RATE, read_wav, resample
from dsp_core import (NUM_MEL_FILTERS, THIRD_OCT_FRAME_LEN, THIRD_OCT_HOP,
                      cepstra_frame_params, dtw_align, frame_signal, hann_window, mel_cepstra,
                      third_octave_band_matrix, third_octave_energies,
                      third_octave_spectra)
from errors import (AlignmentError, DegenerateSignalError,
                    DimensionMismatchError, TemplateNotFoundError, TooShortError)

# Initialize logger
logger = logging.getLogger(__name__)

SEGMENT_FRAMES = 30         # 384 ms analysis segments
CLIP_BETA_DB = -15.0        # lower signal-to-distortion bound
SILENCE_RANGE_DB = 40.0
EPS = np.finfo(np.float64).eps

MCD_ORDER = 13
MCD_CONSTANT = 10.0 / np.log(10.0) * np.sqrt(2.0)
# c_0 drop of a frame SILENCE_RANGE_DB below another (orthonormal DCT of the log mel energies)
MCD_SILENCE_C0 = SILENCE_RANGE_DB * np.log(10.0) / 10.0 * np.sqrt(NUM_MEL_FILTERS)
MIN_TEMPLATE_RMS = 1e-4


@dataclass(frozen=True)
class MetricsReport:
    p_stoi: float
    p_estoi: float
    mcd: float

    def __post_init__(self):
        for name in ('p_stoi', 'p_estoi', 'mcd'):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if not -1.0 - 1e-9 <= self.p_stoi <= 1.0 + 1e-9:
            raise ValueError(f"p_stoi {self.p_stoi} outside [-1, 1]")
        if not -1.0 - 1e-9 <= self.p_estoi <= 1.0 + 1e-9:
            raise ValueError(f"p_estoi {self.p_estoi} outside [-1, 1]")
        if self.mcd < 0:
            raise ValueError(f"mcd {self.mcd} is negative")


@dataclass(frozen=True, eq=False)
class ReferenceTemplate:
    """Healthy word exemplar with its alignment and scoring features."""
    template_id: str
    word_label: str
    waveform: object            # 16 kHz Waveform
    metrics_waveform: object    # 10 kHz Waveform
    align_cepstra: np.ndarray   # c_1..c_12 at 10 kHz, frames x 12
    mcd_cepstra: np.ndarray     # c_0..c_12 at 16 kHz
    energies: object            # ThirdOctaveEnergies at 10 kHz

    @classmethod
    def from_waveform(cls, template_id, waveform, word_label=''):
        if waveform.rms() <= MIN_TEMPLATE_RMS:
            raise DegenerateSignalError(f"Template {template_id} is silent")
        enhance = resample(waveform, ENHANCE_RATE)
        metrics = resample(waveform, METRICS_RATE)
        return cls(
            template_id=template_id,
            word_label=word_label,
            waveform=enhance,
            metrics_waveform=metrics,
            align_cepstra=mel_cepstra(metrics, MCD_ORDER).frames[:, 1:],
            mcd_cepstra=mel_cepstra(enhance, MCD_ORDER).frames,
            energies=third_octave_energies(metrics),
        )


class TemplateStore:
    """Templates listed in an index CSV `template_id,wav_path,word_label`, loaded on first use."""

    def __init__(self, index_path):
        self.index_path = index_path
        self.root = os.path.dirname(os.path.abspath(index_path))
        self.rows = {}
        self._cache = {}
        with open(index_path, newline='', encoding='utf-8') as f:
            for row in csv.DictReader(f):
                self.rows[row['template_id']] = row
        logger.info(f"Template index {index_path}: {len(self.rows)} template(s)")

    def __contains__(self, template_id):
        return template_id in self.rows

    def __len__(self):
        return len(self.rows)

    def ids(self):
        return list(self.rows)

    def get(self, template_id):
        if template_id not in self.rows:
            raise TemplateNotFoundError(f"Unknown template id {template_id}")
        if template_id not in self._cache:
            row = self.rows[template_id]
            path = row['wav_path']
            if not os.path.isabs(path):
                path = os.path.join(self.root, path)
            self._cache[template_id] = ReferenceTemplate.from_waveform(
                template_id, read_wav(path), row.get('word_label', ''))
        return self._cache[template_id]

    def wav_path(self, template_id):
        path = self.rows[template_id]['wav_path']
        return path if os.path.isabs(path) else os.path.join(self.root, path)


def remove_silent_frames(x, y, dyn_range=SILENCE_RANGE_DB, frame_len=THIRD_OCT_FRAME_LEN, hop=THIRD_OCT_HOP):
    """Drop frames more than dyn_range dB below the loudest reference frame, then overlap-add."""
    window = np.hanning(frame_len + 2)[1:-1]
    x_frames = sliding_window_view(x, frame_len)[::hop] * window
    y_frames = sliding_window_view(y, frame_len)[::hop] * window
    energies = 20.0 * np.log10(np.linalg.norm(x_frames, axis=1) + EPS)
    keep = energies > energies.max() - dyn_range
    x_frames, y_frames = x_frames[keep], y_frames[keep]
    n = x_frames.shape[0]
    length = (n - 1) * hop + frame_len if n else 0
    x_out = np.zeros(length)
    y_out = np.zeros(length)
    for index in range(n):
        x_out[index * hop:index * hop + frame_len] += x_frames[index]
        y_out[index * hop:index * hop + frame_len] += y_frames[index]
    return x_out, y_out


def _band_envelopes(x):
    """One-third-octave band amplitudes (bands x frames)."""
    obm, _ = third_octave_band_matrix(METRICS_RATE)
    spectra = third_octave_spectra(x)
    return np.sqrt((np.abs(spectra) ** 2) @ obm.T).T


def _segments(test, ref, remove_silence):
    if test.sample_rate != METRICS_RATE or ref.sample_rate != METRICS_RATE:
        raise ValueError(f"STOI inputs must be at {METRICS_RATE} Hz")
    if len(test) != len(ref):
        raise DimensionMismatchError(f"Signals differ in length: {len(test)} vs {len(ref)}")
    x, y = ref.samples, test.samples
    if remove_silence:
        x, y = remove_silent_frames(x, y)
    x_env = _band_envelopes(x)
    y_env = _band_envelopes(y)
    if x_env.shape[1] < SEGMENT_FRAMES:
        raise TooShortError(f"STOI needs at least {SEGMENT_FRAMES} frames, got {x_env.shape[1]}")
    # segments x bands x frames
    x_seg = np.moveaxis(sliding_window_view(x_env, SEGMENT_FRAMES, axis=1), 1, 0)
    y_seg = np.moveaxis(sliding_window_view(y_env, SEGMENT_FRAMES, axis=1), 1, 0)
    return x_seg, y_seg


def stoi(test, ref, remove_silence=False):
    """
    Short-time objective intelligibility of test against ref (equal length, 10 kHz).

    Per band and 30-frame segment, the test envelope is scaled to the reference
    energy, clipped at -15 dB SDR and correlated with the reference envelope;
    the score is the mean correlation.
    """
    x_seg, y_seg = _segments(test, ref, remove_silence)
    scale = np.linalg.norm(x_seg, axis=2, keepdims=True) / (np.linalg.norm(y_seg, axis=2, keepdims=True) + EPS)
    y_norm = y_seg * scale
    clip = 10.0 ** (-CLIP_BETA_DB / 20.0)
    y_clipped = np.minimum(y_norm, x_seg * (1.0 + clip))

    x_c = x_seg - x_seg.mean(axis=2, keepdims=True)
    y_c = y_clipped - y_clipped.mean(axis=2, keepdims=True)
    x_c /= np.linalg.norm(x_c, axis=2, keepdims=True) + EPS
    y_c /= np.linalg.norm(y_c, axis=2, keepdims=True) + EPS
    return float(np.mean(np.sum(x_c * y_c, axis=2)))


def _row_col_normalize(block):
    """Mean/variance normalize each band over time, then each frame over bands."""
    rows = block - block.mean(axis=2, keepdims=True)
    rows /= np.linalg.norm(rows, axis=2, keepdims=True) + EPS
    cols = rows - rows.mean(axis=1, keepdims=True)
    cols /= np.linalg.norm(cols, axis=1, keepdims=True) + EPS
    return cols


def estoi(test, ref, remove_silence=False):
    """Extended STOI: mean per-frame spectral correlation of row/column normalized segments. No clipping."""
    x_seg, y_seg = _segments(test, ref, remove_silence)
    x_n = _row_col_normalize(x_seg)
    y_n = _row_col_normalize(y_seg)
    return float(np.mean(np.sum(x_n * y_n, axis=1)))


def _frame_mapping(path, num_template_frames):
    """Test frame for every template frame: the middle of the path run that touches it."""
    pairs = np.asarray(path.pairs)
    mapping = np.full(num_template_frames, -1, dtype=int)
    for j in range(num_template_frames):
        matched = pairs[pairs[:, 1] == j, 0]
        if matched.size:
            mapping[j] = int(matched[matched.size // 2])
    if np.any(mapping < 0):
        raise AlignmentError("Alignment path does not cover every template frame")
    return mapping


def p_align(test, template):
    """
    Warp test onto the template timeline.

    DTW on mel cepstra c_1..c_12 (25 ms / 10 ms at 10 kHz); for every template
    frame the matched test frame is windowed and overlap-added at the template
    frame position. The template is never modified.

    Returns:
        10 kHz Waveform with the template's length
    """
    test = resample(test, METRICS_RATE)
    if test.rms() == 0.0:
        raise AlignmentError("Cannot align a silent test signal")
    test_ceps = mel_cepstra(test, MCD_ORDER).frames[:, 1:]
    path = dtw_align(test_ceps, template.align_cepstra)
    if len(path) == 0:
        raise AlignmentError("Empty alignment path")

    frame_len, hop, _ = cepstra_frame_params(METRICS_RATE)
    num_frames = template.align_cepstra.shape[0]
    mapping = _frame_mapping(path, num_frames)

    test_frames = frame_signal(test.samples, frame_len, hop)
    window = hann_window(frame_len)
    total = (num_frames - 1) * hop + frame_len
    out = np.zeros(total)
    env = np.zeros(total)
    for j, i in enumerate(mapping):
        out[j * hop:j * hop + frame_len] += test_frames[i] * window
        env[j * hop:j * hop + frame_len] += window
    covered = env > 1e-8
    out[covered] /= env[covered]
    length = len(template.metrics_waveform)
    out = out[:length]
    if out.shape[0] < length:
        out = np.pad(out, (0, length - out.shape[0]))
    return test.with_samples(out)


def p_stoi(test, template, remove_silence=False):
    return stoi(p_align(test, template), template.metrics_waveform, remove_silence)


def p_estoi(test, template, remove_silence=False):
    return estoi(p_align(test, template), template.metrics_waveform, remove_silence)


def mel_cepstral_distortion(test_ceps, ref_ceps, path):
    """MCD in dB over aligned frame pairs, c_0 excluded."""
    pairs = np.asarray(path.pairs)
    diff = test_ceps[pairs[:, 0], 1:] - ref_ceps[pairs[:, 1], 1:]
    return float(MCD_CONSTANT * np.mean(np.sqrt(np.sum(diff ** 2, axis=1))))


def _active_frames(ceps):
    """Cepstral frames within SILENCE_RANGE_DB of the loudest one."""
    c0 = ceps[:, 0]
    return ceps[c0 >= c0.max() - MCD_SILENCE_C0]


def mcd(test, template):
    """
    Mel cepstral distortion (dB) between test and template at 16 kHz, DTW-aligned on c_1..c_12.

    Frames more than SILENCE_RANGE_DB below the loudest frame of their own signal
    are left out, so digital silence never meets the log floor.
    """
    test = resample(test, ENHANCE_RATE)
    if test.rms() == 0.0:
        raise DegenerateSignalError("Cannot score a silent test signal")
    test_ceps = _active_frames(mel_cepstra(test, MCD_ORDER).frames)
    ref_ceps = _active_frames(template.mcd_cepstra)
    path = dtw_align(test_ceps[:, 1:], ref_ceps[:, 1:])
    return mel_cepstral_distortion(test_ceps, ref_ceps, path)


def score_word(test, template, remove_silence=False):
    """P-STOI, P-ESTOI and MCD of one word, aligning once for the STOI pair."""
    aligned = p_align(test, template)
    return MetricsReport(
        p_stoi=stoi(aligned, template.metrics_waveform, remove_silence),
        p_estoi=estoi(aligned, template.metrics_waveform, remove_silence),
        mcd=mcd(test, template),
    )
