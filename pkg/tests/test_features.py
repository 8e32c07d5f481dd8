import math
import wave

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from attvad import features as F


def tone(freq, seconds=0.5, amp=0.5):
    t = np.arange(int(seconds * F.SAMPLE_RATE)) / F.SAMPLE_RATE
    return F.AudioClip(amp * np.sin(2 * np.pi * freq * t))


def write_raw_wav(path, rate=16000, channels=1, width=2, frames=b"\x00\x00" * 10):
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(channels)
        wf.setsampwidth(width)
        wf.setframerate(rate)
        wf.writeframes(frames)


def test_wav_round_trip_and_scaling(tmp_path):
    pcm = np.array([0, 1, -1, 32767, -32768, 1234], dtype="<i2")
    path = tmp_path / "a.wav"
    write_raw_wav(path, frames=pcm.tobytes())
    clip = F.read_wav(path)
    assert clip.samples[4] == -1.0 and clip.samples[0] == 0.0
    assert np.array_equal(clip.samples, pcm / 32768.0)
    F.write_wav(tmp_path / "b.wav", clip)
    assert np.array_equal(F.read_wav(tmp_path / "b.wav").samples, clip.samples)
    assert np.array_equal(F.to_pcm16(clip.samples), pcm)


@pytest.mark.parametrize("kw,field", [
    (dict(rate=8000), "sample rate"),
    (dict(channels=2, frames=b"\x00" * 8), "channels"),
    (dict(width=1, frames=b"\x80" * 4), "sample width"),
])
def test_wav_format_errors_name_the_field(tmp_path, kw, field):
    path = tmp_path / "bad.wav"
    write_raw_wav(path, **kw)
    with pytest.raises(F.AudioFormatError) as info:
        F.read_wav(path)
    assert info.value.field == field and "bad.wav" in str(info.value)


def test_not_a_wav(tmp_path):
    path = tmp_path / "x.wav"
    path.write_bytes(b"hello world, definitely not riff")
    with pytest.raises(F.AudioFormatError):
        F.read_wav(path)


def test_frame_count():
    assert F.logmel(F.AudioClip(np.zeros(16000))).shape == (98, 40)
    assert F.n_frames(399) == 0 and F.n_frames(400) == 1 and F.n_frames(559) == 1 and F.n_frames(560) == 2
    with pytest.raises(ValueError):
        F.logmel(F.AudioClip(np.zeros(399)))


@settings(max_examples=30, deadline=None)
@given(st.integers(400, 5000))
def test_frame_count_formula(n):
    clip = F.AudioClip(np.random.default_rng(n).normal(scale=0.1, size=n))
    assert F.logmel(clip).shape[0] == (n - 400) // 160 + 1


def test_silence_is_log_floor():
    feats = F.logmel(F.AudioClip(np.zeros(1600)))
    assert np.all(feats == math.log(F.LOG_FLOOR))


def test_filterbank_against_independent_centres():
    fb = F.mel_filterbank()
    assert fb.shape == (40, 257)
    top = 2 * math.log10(1 + 8000 / 700) * 2595 / 2
    step = top / 41
    centres = [700 * (10 ** (k * step / 2595) - 1) for k in range(1, 41)]
    assert np.allclose(F.mel_band_edges()[1:-1], centres, rtol=1e-12)
    assert np.all(fb >= 0) and np.all(fb.max(axis=1) <= 1.0)
    # peak bin of each filter is the FFT bin nearest to its centre
    bin_hz = 16000 / 512
    for row, c in zip(fb, centres):
        assert abs(np.argmax(row) * bin_hz - c) <= bin_hz


def test_pure_tone_peaks_in_bracketing_band():
    feats = F.logmel(tone(1000.0))
    mel_1k = oracles.hz_to_mel(1000.0)
    step = oracles.hz_to_mel(8000.0) / 41
    nearest = int(round(mel_1k / step)) - 1  # centre k*step belongs to row k-1
    lower = int(mel_1k // step) - 1
    peak = int(np.argmax(feats.mean(axis=0)))
    assert peak in (lower, lower + 1)
    assert peak == nearest


def test_single_frame_matches_direct_dft():
    clip = F.AudioClip(np.random.default_rng(0).normal(scale=0.1, size=400))
    frame = clip.samples * [0.54 - 0.46 * math.cos(2 * math.pi * n / 399) for n in range(400)]
    power = oracles.dft_power(frame, 512)
    expect = np.log(np.maximum(F.mel_filterbank() @ power, F.LOG_FLOOR))
    assert np.allclose(F.logmel(clip)[0], expect, atol=1e-9)


def test_deterministic_and_scale_homogeneous():
    clip = F.AudioClip(np.random.default_rng(1).normal(scale=0.05, size=4000))
    a = F.logmel(clip)
    assert np.array_equal(a, F.logmel(F.AudioClip(clip.samples.copy())))
    c = 3.0
    b = F.logmel(F.AudioClip(c * clip.samples))
    assert np.allclose(b - a, 2 * math.log(c), atol=1e-9)


def test_norm_fit_and_apply():
    r = np.random.default_rng(2)
    mats = [r.normal(3.0, 2.0, size=(30, 40)), r.normal(3.0, 2.0, size=(11, 40))]
    mats[0][:, 5] = mats[1][:, 5] = 7.0
    stats = F.fit_norm(mats)
    out = F.apply_norm(stats, np.concatenate(mats))
    assert np.allclose(out.mean(axis=0), 0.0, atol=1e-12)
    live = np.arange(40) != 5
    assert np.allclose(out.var(axis=0)[live], 1.0)
    assert stats.std[5] == F.STD_FLOOR and np.all(out[:, 5] == 0.0)
    other = r.normal(size=(2, 40))
    assert np.allclose(F.apply_norm(stats, other)[1, 0], (other[1, 0] - stats.mean[0]) / stats.std[0])


def test_feature_cache_round_trip(tmp_path):
    feats = np.random.default_rng(3).normal(size=(17, 40))
    F.save_features(tmp_path / "u.feat", feats)
    assert F.load_features(tmp_path / "u.feat").tobytes() == feats.tobytes()
    (tmp_path / "bad.feat").write_bytes(b"nope\n")
    with pytest.raises(ValueError):
        F.load_features(tmp_path / "bad.feat")
