"""
Test Audio I/O

WAV reading and writing, resampling and RMS normalization.
"""
import logging

import numpy as np
import pytest
import soundfile as sf

from audio_io import (ENHANCE_RATE, METRICS_RATE, SOURCE_RATE, Waveform,
                      normalize_rms, quantize_pcm16, read_wav, resample,
                      write_wav)
from errors import (DegenerateSignalError, UnsupportedCodecError,
                    WavFormatError)

logging.basicConfig(level=logging.INFO,
                    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger('audio_io_test')


def test_pcm16_round_trip(tmp_path):
    """Samples on the 1/32768 grid survive write and read exactly"""
    rng = np.random.default_rng(0)
    ints = rng.integers(-32768, 32767, size=4000)
    w = Waveform(ints / 32768.0, ENHANCE_RATE)
    path = tmp_path / 'x.wav'
    write_wav(w, path)
    back = read_wav(path)
    assert back.sample_rate == ENHANCE_RATE
    assert np.array_equal(back.samples, w.samples)


def test_write_saturates():
    """Out-of-range samples clip to the int16 limits instead of wrapping"""
    q = quantize_pcm16(np.array([1.5, -1.5, 1.0, -1.0, 0.0]))
    assert list(q) == [32767, -32768, 32767, -32768, 0]


def test_stereo_is_averaged(tmp_path):
    """Two channels are averaged to mono"""
    left = np.full(100, 0.5)
    right = np.full(100, -0.25)
    path = tmp_path / 'stereo.wav'
    sf.write(path, np.stack([left, right], axis=1), ENHANCE_RATE, subtype='PCM_16')
    w = read_wav(path)
    assert len(w) == 100
    assert np.allclose(w.samples, 0.125, atol=1.0 / 32768)


def test_float_wav_is_read(tmp_path):
    """32-bit float WAV files are accepted"""
    path = tmp_path / 'f.wav'
    data = np.linspace(-0.5, 0.5, 256).astype(np.float32)
    sf.write(path, data, METRICS_RATE, subtype='FLOAT')
    w = read_wav(path)
    assert w.sample_rate == METRICS_RATE
    assert np.allclose(w.samples, data, atol=1e-7)


def test_missing_file_raises(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_wav(tmp_path / 'absent.wav')


def test_malformed_file_raises(tmp_path):
    """A file that is not RIFF/WAVE is rejected"""
    path = tmp_path / 'bad.wav'
    path.write_bytes(b'not a wav file at all' * 10)
    with pytest.raises(WavFormatError):
        read_wav(path)


def test_unsupported_encoding_raises(tmp_path):
    """24-bit PCM is not a supported encoding"""
    path = tmp_path / 'pcm24.wav'
    sf.write(path, np.zeros(64), ENHANCE_RATE, subtype='PCM_24')
    with pytest.raises(UnsupportedCodecError):
        read_wav(path)


def test_resample_length_and_identity():
    """Output length is round(n * target / source); same-rate resampling is a no-op"""
    w = Waveform(np.random.default_rng(1).standard_normal(48001), SOURCE_RATE)
    assert len(resample(w, ENHANCE_RATE)) == 16000
    assert len(resample(w, METRICS_RATE)) == 10000
    assert resample(w, SOURCE_RATE) is w


def test_resample_preserves_passband_tone():
    """A 1 kHz tone keeps its amplitude through 48 kHz -> 16 kHz"""
    t = np.arange(SOURCE_RATE) / SOURCE_RATE
    w = Waveform(0.5 * np.sin(2 * np.pi * 1000 * t), SOURCE_RATE)
    out = resample(w, ENHANCE_RATE)
    interior = out.samples[1000:-1000]
    assert abs(np.sqrt(np.mean(interior ** 2)) - 0.5 / np.sqrt(2)) < 0.01


def test_resample_tone_snr():
    """48 kHz -> 16 kHz on a 1 kHz sine stays within 60 dB of the ideal 16 kHz sine"""
    n = SOURCE_RATE // 2
    w = Waveform(0.5 * np.sin(2 * np.pi * 1000 * np.arange(n) / SOURCE_RATE), SOURCE_RATE)
    out = resample(w, ENHANCE_RATE).samples[64:-64]
    ideal = 0.5 * np.sin(2 * np.pi * 1000 * np.arange(len(out) + 128) / ENHANCE_RATE)[64:-64]
    snr = 10 * np.log10(np.sum(ideal ** 2) / np.sum((out - ideal) ** 2))
    logger.info(f"Resampling SNR: {snr:.1f} dB")
    assert snr >= 60.0


def test_resample_rejects_other_rates():
    w = Waveform(np.zeros(100), ENHANCE_RATE)
    with pytest.raises(ValueError):
        resample(w, 22050)
    with pytest.raises(ValueError):
        resample(w, 0)


def test_normalize_rms():
    w = Waveform(np.array([0.1, -0.2, 0.3, -0.4]), ENHANCE_RATE)
    out = normalize_rms(w, 0.05)
    assert abs(out.rms() - 0.05) < 1e-12
    assert np.allclose(out.samples / w.samples, out.samples[0] / w.samples[0])


def test_normalize_rms_rejects_silence():
    with pytest.raises(DegenerateSignalError):
        normalize_rms(Waveform(np.zeros(10), ENHANCE_RATE), 0.1)


def test_waveform_invariants():
    """Samples must be finite and are read-only"""
    with pytest.raises(ValueError):
        Waveform(np.array([0.0, np.nan]), ENHANCE_RATE)
    w = Waveform(np.zeros(4), ENHANCE_RATE)
    with pytest.raises(ValueError):
        w.samples[0] = 1.0
    assert w.duration == 4 / ENHANCE_RATE


if __name__ == "__main__":
    pytest.main([__file__])
