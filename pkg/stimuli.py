"""
Stimuli

Deterministic synthetic corpus of healthy and distorted /FVFV/ and /CVCV/
words with ground-truth annotations. Vowels come from an impulse train through
cascaded formant resonators; fricatives and stop bursts are band-limited noise.
Hypernasality adds a nasal pole/zero pair, damps F1 and mixes in nasal
turbulence noise.
"""
import csv
import logging
import os
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.signal import butter, lfilter, sosfilt, sosfiltfilt

from audio_io import ENHANCE_RATE, Waveform, write_wav
from dsp_core import band_energy, cross_fade_concat, harmonic_to_noise_ratio, spectral_centroid
from pipeline import (ErrorType, PhonemeClass, PhonemeSegment, WordAnnotation,
                      build_template_bank, write_annotation)

# Initialize logger
logger = logging.getLogger(__name__)

MIN_DURATION_MS = 50.0
DEFAULT_F0 = 220.0                  # child-like pitch
DEFAULT_NASAL_DEPTH = 0.8
BANK_SEED_OFFSET = 1000             # bank exemplars never share a seed with a scoring reference

# Per-word acoustic summary written next to the manifest
DESCRIPTOR_COLUMNS = ['stem', 'error', 'nasal_depth', 'centroid_hz', 'hnr_db', 'low_band_share']
LOW_BAND_HZ = 1000.0

VOWEL_FORMANTS = {
    'a': (800.0, 1200.0, 2800.0),
    'i': (300.0, 2300.0, 3000.0),
    'u': (350.0, 900.0, 2700.0),
}
FORMANT_BANDWIDTHS = (80.0, 100.0, 120.0)
NASAL_POLE = (250.0, 100.0)         # Hz, bandwidth
NASAL_ZERO = (500.0, 150.0)
F1_ATTENUATION_DB = 6.0             # at full nasal depth
NASAL_NOISE_DB = -15.0              # re vowel RMS, at full nasal depth
RETROFLEX_F3_ONSET_HZ = 1900.0
F3_TRANSITION_MS = 50.0
GLIDE_BLOCK = 16

VOWEL_RMS = 0.1
FRICATIVE_RMS = 0.05
BURST_RMS = 0.08
GLOTTAL_PULSE_PEAK = 0.15
GLOTTAL_PULSE_MS = 20.0
GLOTTAL_PULSE_OFFSET_MS = 10.0

S_BAND = (3500.0, 8000.0)
PA_FRICATION_BAND = (2000.0, 4000.0)
PSNAE_LOW_CUTOFF = 1000.0
PSNAE_HEALTHY_DB = -6.0
STOP_BURST_BANDS = {
    'k': (800.0, 1800.0),
    't': (2500.0, 4000.0),
    'T': (2000.0, 3500.0),
}
PA_BURST_BAND = (2000.0, 3000.0)
PALATAL_TAIL_MS = 40.0
NOISE_WARMUP = 256                  # filter transient discarded from noise

FRICATIVES = {'s'}
STOPS = {'k', 't', 'T'}
VOWELS = set(VOWEL_FORMANTS)

FVFV_WORDS = ('sasa', 'sisi', 'susu')
CVCV_WORDS = ('kaka', 'kiki', 'kuku', 'tata', 'titi', 'tutu', 'TaTa', 'TiTi', 'TuTu')
WORD_INVENTORY = FVFV_WORDS + CVCV_WORDS

APPLICABLE_ERRORS = {
    's': (ErrorType.GS, ErrorType.PA, ErrorType.PSNAE),
    'k': (ErrorType.GS,),
    't': (ErrorType.GS, ErrorType.VELAR, ErrorType.PA),
    'T': (ErrorType.GS, ErrorType.VELAR, ErrorType.PA),
}


@dataclass(frozen=True)
class Durations:
    fricative_ms: float = 180.0
    closure_ms: float = 60.0
    burst_ms: float = 20.0
    vowel_ms: float = 220.0
    fade_ms: float = 5.0


@dataclass(frozen=True)
class StimulusSpec:
    word: str
    error: ErrorType = ErrorType.NONE
    nasal_depth: float = 0.0
    seed: int = 0
    durations: Durations = field(default_factory=Durations)

    def __post_init__(self):
        if self.word not in WORD_INVENTORY:
            raise ValueError(f"Unknown word '{self.word}'; expected one of {', '.join(WORD_INVENTORY)}")
        error = ErrorType(self.error)
        object.__setattr__(self, 'error', error)
        if error is not ErrorType.NONE and error not in APPLICABLE_ERRORS[self.consonant]:
            raise ValueError(f"Error {error.label} does not apply to /{self.consonant}/")
        if not 0.0 <= self.nasal_depth <= 1.0:
            raise ValueError(f"nasal_depth must be in [0, 1], got {self.nasal_depth}")

    @property
    def consonant(self):
        return self.word[0]

    @property
    def is_healthy(self):
        return self.error is ErrorType.NONE and self.nasal_depth == 0.0

    def healthy(self):
        return replace(self, error=ErrorType.NONE, nasal_depth=0.0)

    @property
    def stem(self):
        return f"{self.word}_{self.error.label}_n{int(round(self.nasal_depth * 100)):03d}_s{self.seed}"

    @property
    def template_id(self):
        return f"{self.word}_s{self.seed}"


def _samples(ms, sample_rate):
    return int(round(ms * sample_rate / 1000.0))


def _check_duration(duration_ms):
    if duration_ms < MIN_DURATION_MS:
        raise ValueError(f"Duration must be at least {MIN_DURATION_MS} ms, got {duration_ms}")


def _resonator(freq, bandwidth, sample_rate):
    """Two-pole resonator with unity gain at DC."""
    r = np.exp(-np.pi * bandwidth / sample_rate)
    a = np.array([1.0, -2.0 * r * np.cos(2.0 * np.pi * freq / sample_rate), r * r])
    return np.array([a.sum()]), a


def _antiresonator(freq, bandwidth, sample_rate):
    _, a = _resonator(freq, bandwidth, sample_rate)
    return a / a.sum(), np.array([1.0])


def _gliding_resonator(x, start_hz, end_hz, bandwidth, transition, sample_rate):
    """Resonator whose frequency moves linearly from start_hz to end_hz over transition samples."""
    out = np.empty_like(x)
    zi = np.zeros(2)
    for start in range(0, x.shape[0], GLIDE_BLOCK):
        progress = min(start / transition, 1.0) if transition > 0 else 1.0
        b, a = _resonator(start_hz + (end_hz - start_hz) * progress, bandwidth, sample_rate)
        out[start:start + GLIDE_BLOCK], zi = lfilter(b, a, x[start:start + GLIDE_BLOCK], zi=zi)
    return out


def _scale_rms(x, target):
    rms = np.sqrt(np.mean(x ** 2)) if x.size else 0.0
    return x * (target / rms) if rms > 0 else x


def _band_noise(rng, n, lo_hz, hi_hz, sample_rate):
    """Unit-RMS Gaussian noise band-limited to [lo_hz, hi_hz]."""
    nyquist = sample_rate / 2.0
    if lo_hz <= 0:
        sos = butter(6, hi_hz, btype='lowpass', fs=sample_rate, output='sos')
    elif hi_hz >= nyquist * 0.98:
        sos = butter(6, lo_hz, btype='highpass', fs=sample_rate, output='sos')
    else:
        sos = butter(4, [lo_hz, hi_hz], btype='bandpass', fs=sample_rate, output='sos')
    white = rng.standard_normal(n + NOISE_WARMUP)
    return _scale_rms(sosfilt(sos, white)[NOISE_WARMUP:], 1.0)


def glottal_instants(n, f0, sample_rate=ENHANCE_RATE):
    """Sample positions of the glottal impulses in an n-sample vowel."""
    return np.unique(np.round(np.arange(0.0, n, sample_rate / f0)).astype(np.int64))


def glottal_source(n, f0, sample_rate=ENHANCE_RATE):
    source = np.zeros(n)
    source[glottal_instants(n, f0, sample_rate)] = -1.0
    return source


def _glottal_pulse(n, sample_rate):
    """A single decaying glottal transient of GLOTTAL_PULSE_MS placed GLOTTAL_PULSE_OFFSET_MS into n samples."""
    out = np.zeros(n)
    pulse_len = _samples(GLOTTAL_PULSE_MS, sample_rate)
    offset = min(_samples(GLOTTAL_PULSE_OFFSET_MS, sample_rate), max(n - pulse_len, 0))
    impulse = np.zeros(pulse_len)
    impulse[0] = -1.0
    b, a = _resonator(500.0, 400.0, sample_rate)
    pulse = lfilter(b, a, impulse) * np.linspace(1.0, 0.0, pulse_len)
    pulse *= GLOTTAL_PULSE_PEAK / np.max(np.abs(pulse))
    end = min(offset + pulse_len, n)
    out[offset:end] = pulse[:end - offset]
    return out


def synth_vowel(label, duration_ms, f0=DEFAULT_F0, nasal_depth=0.0, seed=0,
                sample_rate=ENHANCE_RATE, f3_onset_hz=None):
    """
    Synthesize a vowel.

    Args:
        label: 'a', 'i' or 'u'
        duration_ms: at least 50 ms
        f0: pitch of the impulse-train source in Hz
        nasal_depth: 0 (oral) to 1 (fully nasalized)
        seed: seeds the nasal turbulence noise
        f3_onset_hz: start F3 here and glide to its target (retroflex transition)

    Returns:
        Waveform at VOWEL_RMS (plus nasal noise when nasalized)
    """
    if label not in VOWEL_FORMANTS:
        raise ValueError(f"Unknown vowel '{label}'")
    _check_duration(duration_ms)
    if not 0.0 <= nasal_depth <= 1.0:
        raise ValueError(f"nasal_depth must be in [0, 1], got {nasal_depth}")

    n = _samples(duration_ms, sample_rate)
    oral = glottal_source(n, f0, sample_rate)
    for index, (freq, bandwidth) in enumerate(zip(VOWEL_FORMANTS[label], FORMANT_BANDWIDTHS)):
        if index == 2 and f3_onset_hz is not None:
            oral = _gliding_resonator(oral, f3_onset_hz, freq, bandwidth,
                                      _samples(F3_TRANSITION_MS, sample_rate), sample_rate)
        else:
            b, a = _resonator(freq, bandwidth, sample_rate)
            oral = lfilter(b, a, oral)

    if nasal_depth == 0.0:
        return Waveform(_scale_rms(oral, VOWEL_RMS), sample_rate)

    b, a = _resonator(*NASAL_POLE, sample_rate)
    nasal = lfilter(b, a, oral)
    b, a = _antiresonator(*NASAL_ZERO, sample_rate)
    nasal = lfilter(b, a, nasal)
    voiced = _scale_rms((1.0 - nasal_depth) * _scale_rms(oral, 1.0) + nasal_depth * _scale_rms(nasal, 1.0), 1.0)

    f1 = VOWEL_FORMANTS[label][0]
    sos = butter(2, [0.7 * f1, 1.3 * f1], btype='bandpass', fs=sample_rate, output='sos')
    keep = 10.0 ** (-F1_ATTENUATION_DB * nasal_depth / 20.0)
    voiced = _scale_rms(voiced - (1.0 - keep) * sosfiltfilt(sos, voiced), VOWEL_RMS)

    rng = np.random.default_rng(seed)
    b, a = _resonator(*NASAL_POLE, sample_rate)
    noise = lfilter(b, a, rng.standard_normal(n))
    noise = _scale_rms(noise, VOWEL_RMS * 10.0 ** (NASAL_NOISE_DB / 20.0) * nasal_depth)
    return Waveform(voiced + noise, sample_rate)


def synth_fricative_s(duration_ms, error=ErrorType.NONE, seed=0, sample_rate=ENHANCE_RATE):
    """
    /s/ frication: healthy 3.5-8 kHz noise; PSNAE adds equal-energy noise below
    1 kHz to the healthy band at -6 dB; GS leaves one glottal transient in
    silence; PA moves the band down to 2-4 kHz.
    """
    _check_duration(duration_ms)
    error = ErrorType(error)
    if error is not ErrorType.NONE and error not in APPLICABLE_ERRORS['s']:
        raise ValueError(f"Error {error.label} does not apply to /s/")
    n = _samples(duration_ms, sample_rate)
    rng = np.random.default_rng(seed)

    if error is ErrorType.GS:
        return Waveform(_glottal_pulse(n, sample_rate), sample_rate)
    if error is ErrorType.PA:
        return Waveform(FRICATIVE_RMS * _band_noise(rng, n, *PA_FRICATION_BAND, sample_rate), sample_rate)

    healthy = FRICATIVE_RMS * _band_noise(rng, n, S_BAND[0], min(S_BAND[1], sample_rate / 2.0), sample_rate)
    if error is ErrorType.NONE:
        return Waveform(healthy, sample_rate)
    high = healthy * 10.0 ** (PSNAE_HEALTHY_DB / 20.0)
    low = _band_noise(rng, n, 0.0, PSNAE_LOW_CUTOFF, sample_rate) * np.sqrt(np.mean(high ** 2))
    return Waveform(high + low, sample_rate)


def _burst(rng, n, band, sample_rate):
    env = np.exp(-np.arange(n) / max(1.0, n / 4.0))
    return _scale_rms(_band_noise(rng, n, *band, sample_rate) * env, BURST_RMS)


def synth_stop(label, error=ErrorType.NONE, closure_ms=60.0, burst_ms=20.0, seed=0, sample_rate=ENHANCE_RATE):
    """
    Stop consonant: closure silence followed by a decaying noise burst.

    GS replaces the burst with a glottal transient, Velar gives /t/ or /T/ the
    /k/ burst band, PA shifts the burst to 2-3 kHz and appends a palatal
    frication tail taken out of the closure so the duration is unchanged.
    """
    if label not in STOP_BURST_BANDS:
        raise ValueError(f"Unknown stop '{label}'")
    error = ErrorType(error)
    if error is not ErrorType.NONE and error not in APPLICABLE_ERRORS[label]:
        raise ValueError(f"Error {error.label} does not apply to /{label}/")
    _check_duration(closure_ms + burst_ms)
    closure = _samples(closure_ms, sample_rate)
    burst = _samples(burst_ms, sample_rate)
    rng = np.random.default_rng(seed)

    if error is ErrorType.GS:
        tail = _glottal_pulse(burst + _samples(GLOTTAL_PULSE_OFFSET_MS, sample_rate), sample_rate)
        out = np.concatenate([np.zeros(closure + burst - tail.shape[0]), tail])
    elif error is ErrorType.PA:
        tail_len = min(_samples(PALATAL_TAIL_MS, sample_rate), closure)
        palatal = _scale_rms(_band_noise(rng, tail_len, *PA_FRICATION_BAND, sample_rate)
                             * np.linspace(1.0, 0.0, tail_len), 0.5 * BURST_RMS)
        out = np.concatenate([np.zeros(closure - tail_len), _burst(rng, burst, PA_BURST_BAND, sample_rate), palatal])
    else:
        band = STOP_BURST_BANDS['k' if error is ErrorType.VELAR else label]
        out = np.concatenate([np.zeros(closure), _burst(rng, burst, band, sample_rate)])
    return Waveform(out, sample_rate)


def parse_word(word):
    """[(label, PhonemeClass)] for an inventory word."""
    if word not in WORD_INVENTORY:
        raise ValueError(f"Unknown word '{word}'")
    out = []
    for ch in word:
        if ch in FRICATIVES:
            out.append((ch, PhonemeClass.FRICATIVE))
        elif ch in STOPS:
            out.append((ch, PhonemeClass.STOP))
        else:
            out.append((ch, PhonemeClass.VOWEL))
    return out


def synth_word(spec, sample_rate=ENHANCE_RATE):
    """
    Synthesize a word and its annotation.

    Segment boundaries sit at the centre of each cross-fade, so the annotation
    tiles the waveform exactly. Each segment draws noise from its own
    (seed, position) stream, which makes the healthy and distorted variants of
    one seed share their noise.

    Returns:
        (Waveform, WordAnnotation)
    """
    d = spec.durations
    pieces = []
    labels = []
    previous = None
    for index, (label, cls) in enumerate(parse_word(spec.word)):
        seed = [spec.seed, index]
        if cls is PhonemeClass.VOWEL:
            f3_onset = RETROFLEX_F3_ONSET_HZ if previous == 'T' else None
            piece = synth_vowel(label, d.vowel_ms, nasal_depth=spec.nasal_depth, seed=seed,
                                sample_rate=sample_rate, f3_onset_hz=f3_onset)
            error = ErrorType.NASALIZED if spec.nasal_depth > 0 else ErrorType.NONE
        elif cls is PhonemeClass.FRICATIVE:
            piece = synth_fricative_s(d.fricative_ms, spec.error, seed=seed, sample_rate=sample_rate)
            error = spec.error
        else:
            piece = synth_stop(label, spec.error, d.closure_ms, d.burst_ms, seed=seed, sample_rate=sample_rate)
            error = spec.error
        pieces.append(piece)
        labels.append((label, cls, error))
        previous = label

    wav = cross_fade_concat(pieces, d.fade_ms)
    fade = _samples(d.fade_ms, sample_rate)
    starts = [0]
    offset = 0
    for k in range(1, len(pieces)):
        offset += len(pieces[k - 1])
        starts.append(offset - k * fade + fade // 2)
    ends = starts[1:] + [len(wav)]
    segments = tuple(PhonemeSegment(label, cls, error, start, end)
                     for (label, cls, error), start, end in zip(labels, starts, ends))
    return wav, WordAnnotation(spec.word, segments, source=spec.stem).validate(len(wav))


def corpus_specs(words, errors, seeds, nasal_depth=DEFAULT_NASAL_DEPTH, durations=Durations()):
    """
    Distorted specs for every word, applicable error and seed.

    A Nasalized entry in errors yields a word with healthy consonants and
    nasalized vowels; every other error also carries nasal_depth.
    """
    specs = []
    for word in words:
        consonant = word[0]
        for error in errors:
            error = ErrorType(error)
            if error is ErrorType.NASALIZED:
                if nasal_depth <= 0:
                    continue
                base = dict(error=ErrorType.NONE, nasal_depth=nasal_depth)
            elif error is ErrorType.NONE:
                base = dict(error=ErrorType.NONE, nasal_depth=0.0)
            elif error in APPLICABLE_ERRORS.get(consonant, ()):
                base = dict(error=error, nasal_depth=nasal_depth)
            else:
                continue
            for seed in seeds:
                specs.append(StimulusSpec(word, seed=seed, durations=durations, **base))
    return specs


@dataclass(frozen=True)
class CorpusFiles:
    manifest: str
    healthy_manifest: str
    template_index: str
    bank_dir: str
    descriptors: str
    num_words: int
    num_templates: int


def _write_manifest(path, rows):
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(['wav_path', 'annotation_path', 'reference_template_id'])
        writer.writerows(rows)


def describe_word(w):
    """(spectral centroid Hz, HNR dB, share of energy below 1 kHz) of a word."""
    total = band_energy(w, 0.0, w.sample_rate / 2.0 + 1.0)
    low_share = band_energy(w, 0.0, LOW_BAND_HZ) / total if total > 0 else 0.0
    return spectral_centroid(w), harmonic_to_noise_ratio(w), low_share


def write_corpus(out_dir, specs, sample_rate=ENHANCE_RATE):
    """
    Write distorted words, their healthy counterparts and the files that index them.

    Layout under out_dir:
        words/<stem>.wav, words/<stem>.csv      distorted words and annotations
        templates/<word>_s<seed>.wav/.csv       healthy counterparts
        templates/index.csv                     template_id,wav_path,word_label
        manifest.csv                            distorted words for batch_enhance
        healthy_manifest.csv                    healthy words (normal reference)
        descriptors.csv                         acoustic summary of every distorted word
        bank/                                   template bank from healthy words synthesized
                                                with seeds offset by BANK_SEED_OFFSET
    """
    words_dir = os.path.join(out_dir, 'words')
    templates_dir = os.path.join(out_dir, 'templates')
    os.makedirs(words_dir, exist_ok=True)
    os.makedirs(templates_dir, exist_ok=True)

    manifest_rows = []
    healthy_rows = []
    template_rows = []
    descriptor_rows = []
    bank_words = []
    seen = set()
    for spec in specs:
        template_id = spec.template_id
        if template_id not in seen:
            seen.add(template_id)
            wav, ann = synth_word(spec.healthy(), sample_rate)
            write_wav(wav, os.path.join(templates_dir, f"{template_id}.wav"))
            write_annotation(ann, sample_rate, os.path.join(templates_dir, f"{template_id}.csv"))
            template_rows.append([template_id, f"{template_id}.wav", spec.word])
            healthy_rows.append([f"templates/{template_id}.wav", f"templates/{template_id}.csv", template_id])
            bank_words.append(synth_word(replace(spec.healthy(), seed=spec.seed + BANK_SEED_OFFSET), sample_rate))

        wav, ann = synth_word(spec, sample_rate)
        write_wav(wav, os.path.join(words_dir, f"{spec.stem}.wav"))
        write_annotation(ann, sample_rate, os.path.join(words_dir, f"{spec.stem}.csv"))
        manifest_rows.append([f"words/{spec.stem}.wav", f"words/{spec.stem}.csv", template_id])
        centroid, hnr, low_share = describe_word(wav)
        descriptor_rows.append([spec.stem, spec.error.label, f"{spec.nasal_depth:.2f}", f"{centroid:.1f}",
                                f"{hnr:.2f}", f"{low_share:.4f}"])

    index_path = os.path.join(templates_dir, 'index.csv')
    with open(index_path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(['template_id', 'wav_path', 'word_label'])
        writer.writerows(template_rows)

    manifest = os.path.join(out_dir, 'manifest.csv')
    healthy_manifest = os.path.join(out_dir, 'healthy_manifest.csv')
    _write_manifest(manifest, manifest_rows)
    _write_manifest(healthy_manifest, healthy_rows)

    descriptors = os.path.join(out_dir, 'descriptors.csv')
    with open(descriptors, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(DESCRIPTOR_COLUMNS)
        writer.writerows(descriptor_rows)

    bank_dir = os.path.join(out_dir, 'bank')
    build_template_bank(bank_words).save(bank_dir)

    logger.info(f"Wrote corpus of {len(manifest_rows)} word(s) and {len(template_rows)} template(s) to {out_dir}")
    return CorpusFiles(manifest, healthy_manifest, index_path, bank_dir, descriptors,
                       len(manifest_rows), len(template_rows))
