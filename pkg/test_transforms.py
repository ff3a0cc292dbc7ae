"""
Test Transforms

Spectral compression, GCI-anchored temporal enhancement, template insertion and
GMM / NMF conversion, including the identity configurations that must leave a
segment unchanged.
"""
import logging

import numpy as np
import pytest
from scipy.signal import lfilter

from audio_io import ENHANCE_RATE, Waveform
from dsp_core import (band_energy, cepstra_to_log_envelope, harmonic_to_noise_ratio,
                      padded_stft, Spectrogram)
from errors import (DimensionMismatchError, InsufficientDataError,
                    TemplateNotFoundError, TooShortError)
from events import GciSequence
from stimuli import glottal_instants, synth_fricative_s, synth_vowel
from pipeline import ErrorType
from transforms import (GmmJointModel, NmfDictionaries, SpectralCompressionConfig,
                        TemplateBank, TemporalEnhanceConfig, conversion_cepstra, fit_gmm,
                        gci_weight_function, gmm_convert, gmm_map_features,
                        gmm_posteriors, insert_template, kl_divergence,
                        nmf_activations, nmf_convert, spectral_compress,
                        temporal_enhance, train_joint_gmm, train_nmf)

logger = logging.getLogger('transforms_test')


def _noise(n, seed=0, scale=0.1):
    return Waveform(np.random.default_rng(seed).standard_normal(n) * scale, ENHANCE_RATE)


def _db(x):
    return 10.0 * np.log10(x)


# --------------------------------------------------------------------------
# Spectral compression
# --------------------------------------------------------------------------

def test_compression_reduces_nasal_emission_noise():
    """PSNAE frication loses at least 15 dB below the cutoff"""
    seg = synth_fricative_s(180, ErrorType.PSNAE, seed=1)
    out = spectral_compress(seg)
    drop = _db(band_energy(seg, 0, 2000)) - _db(band_energy(out, 0, 2000))
    logger.info(f"Low-band drop: {drop:.1f} dB")
    assert drop >= 15.0
    assert len(out) == len(seg)


def test_compression_unit_gain_is_identity():
    seg = _noise(3000, seed=2)
    out = spectral_compress(seg, SpectralCompressionConfig(low_band_gain=1.0))
    assert np.max(np.abs(out.samples - seg.samples)) <= 1e-6


def test_compression_keeps_high_band_noise_energy():
    seg = synth_fricative_s(180, ErrorType.NONE, seed=3)
    out = spectral_compress(seg)
    total_in = np.sum(seg.samples ** 2)
    assert abs(np.sum(out.samples ** 2) - total_in) / total_in < 1e-3


def test_compression_config_and_length_checks():
    with pytest.raises(ValueError):
        SpectralCompressionConfig(low_band_gain=1.5)
    with pytest.raises(ValueError):
        SpectralCompressionConfig(cutoff_hz=0)
    with pytest.raises(TooShortError):
        spectral_compress(_noise(100))
    with pytest.raises(ValueError):
        spectral_compress(_noise(2000), SpectralCompressionConfig(cutoff_hz=9000))


# --------------------------------------------------------------------------
# Temporal enhancement
# --------------------------------------------------------------------------

def test_weight_function_shape():
    cfg = TemporalEnhanceConfig(gci_window_ms=2.0, base_weight=0.3)
    weights = gci_weight_function(400, GciSequence(np.array([100, 300]), 200.0), cfg, ENHANCE_RATE)
    assert weights[100] == pytest.approx(1.0)
    assert weights[300] == pytest.approx(1.0)
    assert weights[200] == pytest.approx(0.3)
    assert np.all((weights >= 0.3) & (weights <= 1.0))


def test_temporal_enhancement_improves_hnr():
    """Vowel in stationary noise at 10 dB SNR gains at least 1 dB of HNR"""
    clean = synth_vowel('a', 300, f0=150)
    noise = np.random.default_rng(4).standard_normal(len(clean))
    noise *= clean.rms() / np.sqrt(np.mean(noise ** 2)) / np.sqrt(10.0)
    noisy = clean.with_samples(clean.samples + noise)
    gcis = GciSequence(glottal_instants(len(clean), 150), ENHANCE_RATE / 150)
    result = temporal_enhance(noisy, gcis)
    assert not result.skipped
    before = harmonic_to_noise_ratio(noisy)
    after = harmonic_to_noise_ratio(result.waveform)
    logger.info(f"HNR {before:.2f} dB -> {after:.2f} dB")
    assert after - before >= 1.0
    assert len(result.waveform) == len(noisy)
    assert abs(result.waveform.rms() - noisy.rms()) < 1e-9


def test_temporal_unit_weight_is_identity():
    seg = synth_vowel('i', 200)
    gcis = GciSequence(glottal_instants(len(seg), 220), ENHANCE_RATE / 220)
    result = temporal_enhance(seg, gcis, TemporalEnhanceConfig(base_weight=1.0))
    assert np.max(np.abs(result.waveform.samples - seg.samples)) <= 1e-6


def test_temporal_without_gcis_is_skipped():
    seg = synth_vowel('u', 100)
    result = temporal_enhance(seg, GciSequence(np.zeros(0, dtype=np.int64), 72.0))
    assert result.skipped
    assert result.waveform is seg


def test_temporal_handles_silent_stretch():
    """Degenerate LP blocks pass through without producing NaN"""
    x = np.concatenate([np.zeros(1600), synth_vowel('a', 100).samples])
    seg = Waveform(x, ENHANCE_RATE)
    result = temporal_enhance(seg, GciSequence(np.array([1700, 1770, 1840]), 72.0))
    assert np.all(np.isfinite(result.waveform.samples))
    assert np.all(result.waveform.samples[:1000] == 0.0)


# --------------------------------------------------------------------------
# Template insertion
# --------------------------------------------------------------------------

def _bank():
    bank = TemplateBank()
    bank.add('s', 'a', synth_fricative_s(180, seed=5), cv_ratio=0.5)
    return bank


def test_insert_same_length_returns_exemplar():
    bank = _bank()
    exemplar = bank.get('s', 'a').waveform
    neighbor_rms = exemplar.rms() / 0.5
    out = insert_template(len(exemplar), 's', 'a', bank, neighbor_rms)
    assert abs(out.rms() - exemplar.rms()) < 1e-6
    assert np.allclose(out.samples, exemplar.samples, atol=1e-6)


def test_insert_time_scales_to_slot():
    bank = _bank()
    exemplar = bank.get('s', 'a').waveform
    out = insert_template(2 * len(exemplar), 's', 'a', bank, 0.1)
    assert len(out) == 2 * len(exemplar)
    assert out.rms() == pytest.approx(0.05)


def test_insert_missing_template():
    with pytest.raises(TemplateNotFoundError):
        insert_template(1000, 'T', 'a', _bank(), 0.1)


def test_bank_save_and_load(tmp_path):
    bank = _bank()
    bank.save(tmp_path / 'bank')
    loaded = TemplateBank.load(tmp_path / 'bank')
    assert ('s', 'a') in loaded
    entry = loaded.get('s', 'a')
    assert entry.cv_ratio == 0.5
    assert np.allclose(entry.waveform.samples, bank.get('s', 'a').waveform.samples, atol=1.0 / 32768)


def test_bank_rejects_silent_exemplar():
    with pytest.raises(ValueError):
        TemplateBank().add('k', 'a', Waveform(np.zeros(800), ENHANCE_RATE), 0.3)


# --------------------------------------------------------------------------
# GMM
# --------------------------------------------------------------------------

def test_em_objective_never_decreases():
    """Twenty random corpora, each EM trajectory non-decreasing"""
    for seed in range(20):
        rng = np.random.default_rng(seed)
        centers = rng.normal(0, 3, size=(3, 4))
        data = np.vstack([rng.normal(c, rng.uniform(0.3, 1.5), size=(150, 4)) for c in centers])
        _, _, _, log = fit_gmm(data, 3, max_iter=60, tol=0.0, seed=seed)
        diffs = np.diff(log.log_likelihoods)
        assert np.all(diffs >= -1e-9), f"corpus {seed}: {diffs.min()}"


def test_em_recovers_two_component_means():
    rng = np.random.default_rng(10)
    true_means = np.array([[-3.0, -3.0, -3.0, -3.0], [3.0, 3.0, 3.0, 3.0]])
    data = np.vstack([rng.normal(m, 1.0, size=(1000, 4)) for m in true_means])
    weights, means, _, _ = fit_gmm(data, 2, seed=0)
    means = means[np.argsort(means[:, 0])]
    assert np.max(np.abs(means - true_means)) < 0.1
    assert abs(weights.sum() - 1.0) < 1e-9


def test_single_component_is_empirical_gaussian():
    rng = np.random.default_rng(11)
    data = rng.normal(size=(500, 3)) @ np.array([[1.0, 0.3, 0.0], [0.0, 1.0, 0.5], [0.0, 0.0, 1.0]])
    weights, means, covs, _ = fit_gmm(data, 1, reg=1e-6)
    assert weights[0] == pytest.approx(1.0)
    assert np.allclose(means[0], data.mean(axis=0), atol=1e-6)
    empirical = np.cov(data, rowvar=False, bias=True)
    assert np.allclose(covs[0] - 1e-6 * np.eye(3), empirical, atol=1e-6)


def _coloured_utterances(count, seconds=1.0):
    out = []
    for k in range(count):
        rng = np.random.default_rng(100 + k)
        pole = rng.uniform(-0.9, 0.9)
        x = lfilter([1.0], [1.0, -pole], rng.standard_normal(int(seconds * ENHANCE_RATE))) * 0.05
        out.append(Waveform(x, ENHANCE_RATE))
    return out


def test_identity_trained_gmm_keeps_envelope():
    """A model trained on identical source and target leaves the spectrum within 1 dB"""
    utterances = _coloured_utterances(8)
    feats = [conversion_cepstra(w) for w in utterances]
    model, log = train_joint_gmm(feats, feats, num_components=2, align=False, seed=0)
    assert log.frames >= 480
    seg = _coloured_utterances(1, seconds=0.3)[0]
    out = gmm_convert(seg, model)
    x = padded_stft(seg).magnitude
    y = padded_stft(out).magnitude
    strong = x > 1e-3 * x.max()
    deviation = np.sqrt(np.mean((20.0 * np.log10(y[strong] / x[strong])) ** 2))
    logger.info(f"Identity GMM envelope deviation: {deviation:.3f} dB")
    assert deviation < 1.0


def test_trained_gmm_reaches_held_out_target():
    """A model trained on conversion features moves a held-out utterance onto its target's envelope"""
    utterances = _coloured_utterances(9)
    targets = [w.with_samples(lfilter([1.0, -0.7], [1.0], w.samples)) for w in utterances]
    src = [conversion_cepstra(w) for w in utterances[:8]]
    tgt = [conversion_cepstra(w) for w in targets[:8]]
    model, _ = train_joint_gmm(src, tgt, num_components=1, align=False, seed=0)

    held_out, goal = utterances[8], conversion_cepstra(targets[8]).frames
    before = conversion_cepstra(held_out).frames
    after = conversion_cepstra(gmm_convert(held_out, model)).frames
    assert after.shape == goal.shape

    def distance(a):
        return np.mean(np.linalg.norm(a[:, 1:] - goal[:, 1:], axis=1))

    logger.info(f"Held-out cepstral distance: {distance(before):.3f} -> {distance(after):.3f}")
    assert distance(after) < 0.5 * distance(before)


def test_conversion_cepstra_follow_stft_grid():
    seg = _noise(4000, seed=21)
    ceps = conversion_cepstra(seg)
    assert (ceps.frame_len, ceps.hop, ceps.order) == (512, 128, 13)
    assert ceps.num_frames == padded_stft(seg).num_frames
    with pytest.raises(TooShortError):
        conversion_cepstra(_noise(300))


def _tilt_model(tilt):
    d = 12
    eye = np.eye(d)
    cov = np.block([[eye, eye], [eye, 2.0 * eye]])
    means = np.concatenate([np.zeros(d), tilt])[None, :]
    return GmmJointModel(np.array([1.0]), means, cov[None], order=13, include_c0=False)


def test_single_component_regression_adds_tilt():
    tilt = np.linspace(0.5, -0.5, 12)
    model = _tilt_model(tilt)
    x = np.random.default_rng(12).normal(size=(30, 12))
    assert np.allclose(gmm_map_features(model, x), x + tilt)
    post = gmm_posteriors(model, x)
    assert np.allclose(post.sum(axis=1), 1.0, atol=1e-9)


def test_tilt_model_shifts_spectrum_by_tilt():
    """Output envelope = input envelope + the tilt implied by the mean offset"""
    tilt = np.zeros(12)
    tilt[0] = 2.0
    model = _tilt_model(tilt)
    seg = _noise(8000, seed=13)
    out = gmm_convert(seg, model)
    expected = cepstra_to_log_envelope(np.concatenate([[0.0], tilt]), 512, ENHANCE_RATE)[0]
    x = padded_stft(seg).magnitude
    y = padded_stft(out).magnitude
    interior = (slice(8, -8), slice(4, -4))
    x, y = x[interior], y[interior]
    strong = x > 0.3 * np.median(x)
    error = 20.0 * np.log10(y / x) - 10.0 / np.log(10.0) * expected[None, 4:-4]
    assert np.sqrt(np.mean(error[strong] ** 2)) < 1.0


def test_gmm_convert_silence_and_mismatch():
    model = _tilt_model(np.zeros(12))
    silent = Waveform(np.zeros(2000), ENHANCE_RATE)
    assert np.all(gmm_convert(silent, model).samples == 0.0)
    with pytest.raises(DimensionMismatchError):
        gmm_map_features(model, np.zeros((3, 5)))


def test_gmm_needs_enough_frames():
    feats = [conversion_cepstra(w) for w in _coloured_utterances(1, seconds=0.5)]
    with pytest.raises(InsufficientDataError):
        train_joint_gmm(feats, feats, num_components=8, align=False)


def test_gmm_model_invariants():
    with pytest.raises(ValueError):
        GmmJointModel(np.array([0.5, 0.4]), np.zeros((2, 24)), np.stack([np.eye(24)] * 2), order=13)
    with pytest.raises(DimensionMismatchError):
        GmmJointModel(np.array([1.0]), np.zeros((1, 20)), np.eye(20)[None], order=13)


# --------------------------------------------------------------------------
# NMF
# --------------------------------------------------------------------------

def _bumpy_dictionary(bins=64, rank=4):
    grid = np.arange(bins)[:, None]
    centers = np.linspace(8, bins - 8, rank)[None, :]
    w = np.exp(-0.5 * ((grid - centers) / 3.0) ** 2) + 1e-3
    return w / w.sum(axis=0)


def test_nmf_kl_monotone_and_converges():
    """Representable V is fitted to within 1e-4 of its L1 norm, KL never rising"""
    w = _bumpy_dictionary()
    h_true = np.random.default_rng(14).uniform(0.5, 2.0, size=(4, 10))
    v = w @ h_true
    h, history = nmf_activations(v, w, iters=500)
    assert np.all(np.diff(history) <= 1e-9)
    assert history[-1] <= 1e-4 * np.abs(v).sum()
    assert np.all(h >= 0)
    assert np.abs(w @ h - v).sum() <= 2e-2 * np.abs(v).sum()


def test_nmf_kl_monotone_on_random_v():
    rng = np.random.default_rng(15)
    w = rng.uniform(size=(40, 6))
    w /= w.sum(axis=0)
    v = rng.uniform(size=(40, 12))
    _, history = nmf_activations(v, w, iters=100)
    assert np.all(np.diff(history) <= 1e-9)
    assert kl_divergence(v, v) == pytest.approx(0.0)


def _spectrogram(mags):
    return Spectrogram(mags.astype(np.complex128), 512, 128, ENHANCE_RATE)


def test_train_nmf_exhaustive_sampling():
    """With exactly R frames, the dictionaries are those frames normalized"""
    rng = np.random.default_rng(16)
    src = rng.uniform(0.1, 1.0, size=(6, 257))
    tgt = rng.uniform(0.1, 1.0, size=(6, 257))
    dicts = train_nmf([_spectrogram(src)], [_spectrogram(tgt)], rank=6, seed=3, align=False)
    norms = src.sum(axis=1)
    assert np.allclose(dicts.w_src, (src / norms[:, None]).T)
    assert np.allclose(dicts.w_tgt, (tgt / norms[:, None]).T)


def test_train_nmf_determinism_and_rank_check():
    rng = np.random.default_rng(17)
    src = _spectrogram(rng.uniform(0.1, 1.0, size=(50, 257)))
    tgt = _spectrogram(rng.uniform(0.1, 1.0, size=(50, 257)))
    a = train_nmf([src], [tgt], rank=10, seed=4, align=False)
    b = train_nmf([src], [tgt], rank=10, seed=4, align=False)
    assert np.array_equal(a.w_src, b.w_src)
    assert np.array_equal(a.w_tgt, b.w_tgt)
    with pytest.raises(InsufficientDataError):
        train_nmf([src], [tgt], rank=51, align=False)


def test_train_nmf_identical_frames():
    frame = np.random.default_rng(18).uniform(0.1, 1.0, size=257)
    spec = _spectrogram(np.tile(frame, (20, 1)))
    dicts = train_nmf([spec], [spec], rank=5, align=False)
    assert np.allclose(dicts.w_src, dicts.w_src[:, :1])


def test_nmf_convert_is_linear_in_target_dictionary():
    """Activations depend only on W_src, so scaling W_tgt scales the output"""
    seg = _noise(4096, seed=19)
    mags = padded_stft(seg).magnitude
    w = (mags / mags.sum(axis=1, keepdims=True)).T
    same = nmf_convert(seg, NmfDictionaries(w, w.copy()), iters=200)
    doubled = nmf_convert(seg, NmfDictionaries(w, 2.0 * w), iters=200)
    assert len(same) == len(seg)
    assert np.allclose(doubled.samples, 2.0 * same.samples, atol=1e-12)
    # Same dictionaries built from the segment reconstruct it
    error = np.max(np.abs(same.samples - seg.samples)) / np.max(np.abs(seg.samples))
    assert error <= 0.01


def test_nmf_dictionary_invariants():
    w = _bumpy_dictionary(bins=257, rank=3)
    with pytest.raises(ValueError):
        NmfDictionaries(-w, w)
    with pytest.raises(DimensionMismatchError):
        NmfDictionaries(w[:100], w[:100])
    with pytest.raises(ValueError):
        nmf_convert(_noise(2000), NmfDictionaries(w, w), iters=0)


# --------------------------------------------------------------------------
# Robustness
# --------------------------------------------------------------------------

def test_transforms_on_random_inputs():
    """Finite random input gives finite, length-preserving output for every transform"""
    rng = np.random.default_rng(20)
    model = _tilt_model(rng.normal(0, 0.3, size=12))
    w = _bumpy_dictionary(bins=257, rank=8)
    dicts = NmfDictionaries(w, w[:, ::-1].copy())
    for trial in range(10):
        n = int(rng.integers(600, 4000))
        seg = Waveform(rng.standard_normal(n) * rng.uniform(1e-4, 1.0), ENHANCE_RATE)
        gcis = GciSequence(np.sort(rng.choice(n, size=5, replace=False)), 80.0)
        outputs = [
            spectral_compress(seg),
            temporal_enhance(seg, gcis).waveform,
            gmm_convert(seg, model),
            nmf_convert(seg, dicts, iters=20),
        ]
        for out in outputs:
            assert len(out) == n
            assert out.sample_rate == ENHANCE_RATE
            assert np.all(np.isfinite(out.samples))


if __name__ == "__main__":
    pytest.main([__file__])
