import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from milscene import featex
from milscene.featex import AudioClip, AudioFormatError


def sine(freq, seconds, sr, amp=0.5):
    t = np.arange(int(round(seconds * sr))) / sr
    return amp * np.sin(2 * np.pi * freq * t)


# ----------------------------------------------------------------------------
# WAV decoding


def test_decode_silence(tmp_path):
    path = tmp_path / "z.wav"
    featex.write_wav(path, np.zeros(16000), 16000)
    clip = featex.decode_wav(path)
    assert clip.sample_rate == 16000 and clip.channels == 1
    np.testing.assert_array_equal(clip.samples[0], np.zeros(16000))


def test_decode_stereo_keeps_both_channels(tmp_path):
    left, right = sine(440, 0.1, 16000), sine(660, 0.1, 16000, 0.25)
    path = tmp_path / "s.wav"
    featex.write_wav(path, np.stack([left, right]), 16000)
    clip = featex.decode_wav(path)
    assert clip.channels == 2
    np.testing.assert_allclose(clip.samples, np.stack([left, right]), atol=1 / 32768)


def test_pcm16_round_trip_within_one_lsb(tmp_path):
    x = sine(440, 1.0, 16000, 0.9)
    path = tmp_path / "a.wav"
    featex.write_wav(path, x, 16000)
    np.testing.assert_allclose(featex.decode_wav(path).samples[0], x, atol=1 / 32768)


def test_float32_round_trip(tmp_path):
    x = sine(440, 0.2, 44100)
    path = tmp_path / "f.wav"
    featex.write_wav(path, x, 44100, encoding="float32")
    clip = featex.decode_wav(path)
    assert clip.sample_rate == 44100
    np.testing.assert_array_equal(clip.samples[0], x.astype(np.float32))


def _riff(fmt_tag, bits, payload=b"\x00\x00" * 8, declared=None):
    fmt = struct.pack("<HHIIHH", fmt_tag, 1, 16000, 16000 * bits // 8, bits // 8, bits)
    size = len(payload) if declared is None else declared
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", size) + payload
    return b"RIFF" + struct.pack("<I", len(body)) + body


def test_unsupported_encoding_names_format_tag(tmp_path):
    path = tmp_path / "alaw.wav"
    path.write_bytes(_riff(6, 8))
    with pytest.raises(AudioFormatError, match="6"):
        featex.decode_wav(path)


def test_truncated_data_chunk_rejected(tmp_path):
    path = tmp_path / "t.wav"
    path.write_bytes(_riff(1, 16, declared=1000))
    with pytest.raises(AudioFormatError, match="truncated"):
        featex.decode_wav(path)


def test_not_riff_rejected(tmp_path):
    path = tmp_path / "x.wav"
    path.write_bytes(b"OggS" + bytes(40))
    with pytest.raises(AudioFormatError):
        featex.decode_wav(path)


# ----------------------------------------------------------------------------
# preprocessing


def test_conforming_input_returned_unchanged():
    clip = AudioClip(sine(440, 0.1, 16000)[None], 16000)
    assert featex.preprocess(clip) is clip


def test_identical_stereo_downmix_equals_channel():
    x = sine(440, 0.1, 16000)
    out = featex.preprocess(AudioClip(np.stack([x, x]), 16000))
    np.testing.assert_array_equal(out.samples[0], x)


def test_empty_clip_rejected():
    with pytest.raises(ValueError, match="empty"):
        featex.preprocess(AudioClip(np.zeros((1, 0)), 16000))


@pytest.mark.parametrize("sr_in", [48000, 44100])
def test_resampled_sine_peak_within_one_bin(sr_in):
    out = featex.preprocess(AudioClip(sine(440, 1.0, sr_in)[None], sr_in))
    assert out.sample_rate == 16000
    y = out.samples[0]
    spec = np.abs(np.fft.rfft(y * np.hanning(len(y))))
    freqs = np.fft.rfftfreq(len(y), 1 / 16000)
    assert abs(freqs[np.argmax(spec)] - 440.0) <= freqs[1]


def test_resample_suppresses_content_above_new_nyquist():
    x = sine(440, 1.0, 48000) + sine(12000, 1.0, 48000)
    y = featex.resample(x, 48000, 16000)
    spec = np.abs(np.fft.rfft(y[1000:-1000]))
    freqs = np.fft.rfftfreq(len(y) - 2000, 1 / 16000)
    keep = spec[np.argmin(np.abs(freqs - 440))]
    # 12 kHz would alias to 4 kHz
    alias = spec[np.argmin(np.abs(freqs - 4000))]
    assert alias < 1e-2 * keep


# ----------------------------------------------------------------------------
# log-mel


def test_ten_second_clip_shape():
    clip = AudioClip(np.random.default_rng(0).normal(0, 0.1, 160000)[None], 16000)
    spec = featex.logmel(clip)
    assert spec.values.shape == (256, 313)
    assert spec.n_frames == featex.expected_frames(160000) == 313
    assert spec.window_ms == 128.0 and spec.hop_ms == 32.0


def test_silence_hits_floor():
    spec = featex.logmel(AudioClip(np.zeros((1, 16000)), 16000))
    np.testing.assert_array_equal(spec.values, np.log(1e-10))


def test_one_kilohertz_peaks_at_filter_covering_it():
    fb = featex.mel_filterbank()
    # bin 128 of a 2048-point FFT at 16 kHz is exactly 1000 Hz
    assert np.fft.rfftfreq(2048, 1 / 16000)[128] == 1000.0
    expected = int(np.argmax(fb[:, 128]))
    spec = featex.logmel(AudioClip(sine(1000, 1.0, 16000)[None], 16000))
    assert np.all(np.argmax(spec.values, axis=0) == expected)


def test_filterbank_rows_and_peaks():
    fb = featex.mel_filterbank()
    assert fb.shape == (256, 1025)
    assert np.all(fb >= 0)
    assert np.all(fb.max(axis=1) > 0)
    peaks = np.argmax(fb, axis=1)
    assert np.all(np.diff(peaks) >= 0)
    assert np.all(np.diff(featex.mel_centres()) > 0)


def test_mel_scale_round_trip():
    f = np.linspace(0, 8000, 101)
    np.testing.assert_allclose(featex.mel_to_hz(featex.hz_to_mel(f)), f, atol=1e-9)
    assert featex.hz_to_mel(700.0) == pytest.approx(2595 * np.log10(2))


def test_shorter_than_hop_rejected():
    with pytest.raises(ValueError, match="hop"):
        featex.logmel(AudioClip(np.zeros((1, 100)), 16000))


def test_logmel_requires_mono_16k():
    with pytest.raises(ValueError):
        featex.logmel(AudioClip(np.zeros((1, 48000)), 48000))


@settings(max_examples=15, deadline=None)
@given(st.integers(512, 40000), st.integers(0, 1000))
def test_shape_depends_only_on_sample_count(n, seed):
    rng = np.random.default_rng(seed)
    a = featex.logmel(AudioClip(rng.normal(size=n)[None], 16000))
    b = featex.logmel(AudioClip(np.zeros((1, n)), 16000))
    assert a.values.shape == b.values.shape == (256, featex.expected_frames(n))


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000))
def test_doubling_amplitude_adds_two_ln2(seed):
    x = np.random.default_rng(seed).normal(0, 0.2, 8000)
    a = featex.logmel(AudioClip(x[None], 16000)).values
    b = featex.logmel(AudioClip(2 * x[None], 16000)).values
    energetic = a > np.log(1e-10) + 20  # energy dominates the floor by e^20
    assert energetic.mean() > 0.9
    np.testing.assert_allclose((b - a)[energetic], 2 * np.log(2), atol=1e-6)


# ----------------------------------------------------------------------------
# feature cache


def test_lmel_round_trip_is_bitwise(tmp_path):
    values = np.random.default_rng(1).normal(size=(256, 63)).astype(np.float32)
    path = tmp_path / "c.lmel"
    featex.save_features(values, path)
    raw = path.read_bytes()
    assert raw[:4] == b"LMEL"
    assert struct.unpack_from("<III", raw, 4) == (1, 256, 63)
    assert len(raw) == 16 + 4 * 256 * 63
    assert np.array_equal(featex.load_features(path), values)


def test_lmel_rejects_bad_magic_and_size(tmp_path):
    path = tmp_path / "c.lmel"
    featex.save_features(np.zeros((2, 3), np.float32), path)
    raw = path.read_bytes()
    path.write_bytes(b"XMEL" + raw[4:])
    with pytest.raises(ValueError, match="magic"):
        featex.load_features(path)
    path.write_bytes(raw[:-4])
    with pytest.raises(ValueError, match="bytes"):
        featex.load_features(path)


def test_extract_end_to_end(tmp_path):
    path = tmp_path / "e.wav"
    featex.write_wav(path, np.stack([sine(440, 2.0, 48000)] * 2), 48000)
    spec = featex.extract(path)
    assert spec.values.shape == (256, 63)
    assert np.all(np.isfinite(spec.values))
