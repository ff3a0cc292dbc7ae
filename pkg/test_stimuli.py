"""
Test Stimuli

Synthetic vowels, fricatives, stops and words: spectral shape of each
distortion, annotation tiling, determinism, and the corpus written to disk.
"""
import csv
import logging
import os

import numpy as np
import pytest

from audio_io import ENHANCE_RATE, read_wav
from dsp_core import band_energy, harmonic_to_noise_ratio, spectral_centroid
from pipeline import ErrorType, PhonemeClass, load_annotation
from stimuli import (GLOTTAL_PULSE_MS, GLOTTAL_PULSE_OFFSET_MS, StimulusSpec,
                     corpus_specs, synth_fricative_s, synth_stop, synth_vowel,
                     synth_word, write_corpus)
from transforms import TemplateBank

logger = logging.getLogger('stimuli_test')


def _harmonic_peaks(w, f0):
    """Frequencies of harmonics whose amplitude exceeds both neighbouring harmonics."""
    spectrum = np.abs(np.fft.rfft(w.samples * np.hanning(len(w))))
    freqs = np.fft.rfftfreq(len(w), 1.0 / w.sample_rate)
    harmonics = np.arange(f0, w.sample_rate / 2 - f0, f0)
    amps = np.array([spectrum[np.argmin(np.abs(freqs - h))] for h in harmonics])
    peaks = [harmonics[i] for i in range(1, len(amps) - 1) if amps[i] > amps[i - 1] and amps[i] > amps[i + 1]]
    return np.array(peaks)


@pytest.mark.parametrize('label,formants', [('a', (800, 1200)), ('i', (300, 2300)), ('u', (350, 900))])
def test_vowel_formant_peaks(label, formants):
    """With f0 = 50 Hz the harmonic envelope peaks at the formants"""
    w = synth_vowel(label, 500, f0=50)
    peaks = _harmonic_peaks(w, 50)
    for formant in formants:
        assert np.min(np.abs(peaks - formant)) <= 50, f"{label}: no peak near {formant} Hz in {peaks[:8]}"


def test_vowel_level_and_length():
    w = synth_vowel('a', 220)
    assert len(w) == int(0.22 * ENHANCE_RATE)
    assert w.rms() == pytest.approx(0.1)
    with pytest.raises(ValueError):
        synth_vowel('o', 220)
    with pytest.raises(ValueError):
        synth_vowel('a', 20)


def test_nasalization_moves_low_energy():
    """Nasal depth raises energy near the nasal pole relative to F1 and lowers HNR"""
    oral = synth_vowel('a', 400)
    nasal = synth_vowel('a', 400, nasal_depth=1.0)
    oral_ratio = band_energy(oral, 200, 300) / band_energy(oral, 700, 900)
    nasal_ratio = band_energy(nasal, 200, 300) / band_energy(nasal, 700, 900)
    logger.info(f"Low-band share: oral {oral_ratio:.3f}, nasal {nasal_ratio:.3f}")
    assert nasal_ratio > oral_ratio
    assert harmonic_to_noise_ratio(nasal) < harmonic_to_noise_ratio(oral)


def test_healthy_s_band():
    w = synth_fricative_s(180)
    assert band_energy(w, 3000, 8001) / band_energy(w, 0, 8001) >= 0.85
    assert w.rms() == pytest.approx(0.05)


def test_psnae_adds_low_frequency_noise():
    """Nasal emission noise below 1 kHz carries about half of the energy"""
    w = synth_fricative_s(180, ErrorType.PSNAE)
    share = band_energy(w, 0, 1000) / band_energy(w, 0, 8001)
    assert 0.35 < share < 0.65
    assert band_energy(w, 0, 1000) / band_energy(w, 3000, 8001) >= 0.5


def test_pa_fricative_is_lower():
    healthy = synth_fricative_s(180, seed=1)
    backed = synth_fricative_s(180, ErrorType.PA, seed=1)
    assert band_energy(backed, 2000, 4000) / band_energy(backed, 0, 8000) > 0.75
    assert spectral_centroid(backed) < spectral_centroid(healthy) - 1000


def test_gs_fricative_is_confined():
    """A glottal stop leaves one transient in otherwise silent frication"""
    w = synth_fricative_s(180, ErrorType.GS)
    active = np.flatnonzero(w.samples)
    start = int(GLOTTAL_PULSE_OFFSET_MS * ENHANCE_RATE / 1000)
    length = int(GLOTTAL_PULSE_MS * ENHANCE_RATE / 1000)
    assert active.min() >= start
    assert active.max() < start + length


def test_fricative_rejects_wrong_error():
    with pytest.raises(ValueError):
        synth_fricative_s(180, ErrorType.VELAR)


def test_stop_closure_and_burst():
    w = synth_stop('t', closure_ms=60, burst_ms=20)
    closure = int(0.06 * ENHANCE_RATE)
    assert len(w) == int(0.08 * ENHANCE_RATE)
    assert np.all(w.samples[:closure] == 0.0)
    assert np.sqrt(np.mean(w.samples[closure:] ** 2)) == pytest.approx(0.08)


def test_stop_error_variants():
    """Velar /t/ has the /k/ burst; PA keeps the stop's duration"""
    healthy = synth_stop('t', seed=2)
    velar = synth_stop('t', ErrorType.VELAR, seed=2)
    backed = synth_stop('t', ErrorType.PA, seed=2)
    k = synth_stop('k', seed=2)
    assert spectral_centroid(k) < spectral_centroid(healthy)
    assert abs(spectral_centroid(velar) - spectral_centroid(k)) < 200
    assert np.allclose(velar.samples, k.samples)
    assert len(backed) == len(healthy)
    with pytest.raises(ValueError):
        synth_stop('k', ErrorType.VELAR)


def test_word_annotation_tiles_waveform():
    wav, ann = synth_word(StimulusSpec('kiki', ErrorType.GS, nasal_depth=0.8, seed=4))
    assert ann.word == 'kiki'
    assert [s.label for s in ann.segments] == ['k', 'i', 'k', 'i']
    assert ann.segments[0].start == 0
    assert ann.segments[-1].end == len(wav)
    for a, b in zip(ann.segments, ann.segments[1:]):
        assert a.end == b.start
    assert [s.error for s in ann.segments] == [ErrorType.GS, ErrorType.NASALIZED] * 2
    assert ann.segments[1].phoneme_class is PhonemeClass.VOWEL
    assert ann.word_error() is ErrorType.GS


def test_word_is_deterministic():
    spec = StimulusSpec('sasa', ErrorType.PSNAE, nasal_depth=0.5, seed=7)
    a, _ = synth_word(spec)
    b, _ = synth_word(spec)
    assert np.array_equal(a.samples, b.samples)


def test_seeds_decorrelate_noise():
    a, _ = synth_word(StimulusSpec('sasa', seed=1))
    b, _ = synth_word(StimulusSpec('sasa', seed=2))
    n = int(0.15 * ENHANCE_RATE)
    assert abs(np.corrcoef(a.samples[:n], b.samples[:n])[0, 1]) < 0.1


def test_distortion_leaves_vowels_untouched():
    """Healthy and distorted renditions of one seed share their vowel interiors"""
    healthy, ann = synth_word(StimulusSpec('sasa', seed=5))
    distorted, _ = synth_word(StimulusSpec('sasa', ErrorType.PA, seed=5))
    vowel = ann.segments[1]
    inner = slice(vowel.start + 100, vowel.end - 100)
    assert np.array_equal(healthy.samples[inner], distorted.samples[inner])


def test_stimulus_spec_validation():
    with pytest.raises(ValueError):
        StimulusSpec('zaza')
    with pytest.raises(ValueError):
        StimulusSpec('kaka', ErrorType.PSNAE)
    with pytest.raises(ValueError):
        StimulusSpec('sasa', nasal_depth=1.5)
    spec = StimulusSpec('TaTa', ErrorType.VELAR, nasal_depth=0.8, seed=3)
    assert spec.stem == 'TaTa_Velar_n080_s3'
    assert spec.template_id == 'TaTa_s3'
    assert spec.healthy().is_healthy


def test_corpus_specs_follow_applicable_errors():
    specs = corpus_specs(['sasa', 'kaka'], [ErrorType.GS, ErrorType.PSNAE, ErrorType.NASALIZED], [0, 1])
    assert len(specs) == 10
    assert not any(s.word == 'kaka' and s.error is ErrorType.PSNAE for s in specs)
    nasal_only = [s for s in specs if s.error is ErrorType.NONE]
    assert all(s.nasal_depth == 0.8 for s in nasal_only)


def test_write_corpus(tmp_path):
    """Words, templates, manifests and the template bank land where the index files say"""
    specs = corpus_specs(['sasa', 'tata'], [ErrorType.PA], [0])
    files = write_corpus(str(tmp_path), specs)
    assert files.num_words == 2
    assert files.num_templates == 2
    with open(files.manifest, newline='') as f:
        rows = list(csv.reader(f))
    assert rows[0] == ['wav_path', 'annotation_path', 'reference_template_id']
    assert len(rows) == 3
    wav = read_wav(os.path.join(tmp_path, rows[1][0]))
    ann = load_annotation(os.path.join(tmp_path, rows[1][1]), wav)
    assert ann.word == 'sasa'
    assert ann.segments[0].error is ErrorType.PA
    with open(files.template_index, newline='') as f:
        index = list(csv.DictReader(f))
    assert {r['template_id'] for r in index} == {'sasa_s0', 'tata_s0'}
    assert os.path.exists(os.path.join(files.bank_dir, 'index.csv'))
    assert os.path.exists(os.path.join(tmp_path, 'templates', 'tata_s0.wav'))

    with open(files.descriptors, newline='') as f:
        descriptors = list(csv.DictReader(f))
    assert [r['stem'] for r in descriptors] == [s.stem for s in specs]
    assert all(0.0 < float(r['low_band_share']) < 1.0 for r in descriptors)
    assert all(np.isfinite(float(r['hnr_db'])) for r in descriptors)


def test_bank_exemplars_differ_from_references(tmp_path):
    """The template bank is synthesized from other seeds than the scoring references"""
    files = write_corpus(str(tmp_path), corpus_specs(['sasa'], [ErrorType.GS], [0]))
    entry = TemplateBank.load(files.bank_dir).get('s', 'a')
    reference = read_wav(os.path.join(tmp_path, 'templates', 'sasa_s0.wav'))
    ann = load_annotation(os.path.join(tmp_path, 'templates', 'sasa_s0.csv'), reference)
    start, end = ann.bounds(len(reference))[0]
    piece = reference.samples[start:end]
    assert len(entry.waveform) == len(piece)
    assert not np.allclose(entry.waveform.samples, piece, atol=1e-3)


if __name__ == "__main__":
    pytest.main([__file__])
