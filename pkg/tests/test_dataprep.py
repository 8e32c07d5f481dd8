import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attvad import dataprep as dp
from attvad.features import AudioClip, logmel, n_frames


def measured_snr(speech, mixed):
    noise = mixed.samples - speech.samples
    return 10 * math.log10(np.mean(speech.samples ** 2) / np.mean(noise ** 2))


def clip_with_labels(n_frames_total, speech_frames, seed=0):
    n = (n_frames_total - 1) * 160 + 400
    samples = np.random.default_rng(seed).normal(scale=0.05, size=n)
    labels = np.zeros(n_frames_total, np.int8)
    labels[list(speech_frames)] = 1
    return AudioClip(samples), labels


def test_mix_random_cases_hit_target_snr():
    r = np.random.default_rng(0)
    worst = 0.0
    for case in range(100):
        n = int(r.integers(2000, 20000))
        speech = AudioClip(r.normal(scale=r.uniform(0.01, 0.1), size=n))
        noise = AudioClip(r.normal(scale=r.uniform(0.01, 0.2), size=n + int(r.integers(0, 5000))))
        target = float(r.uniform(-10, 20))
        mixed = dp.mix_at_snr(speech, noise, target, np.random.default_rng(case))
        worst = max(worst, abs(measured_snr(speech, mixed) - target))
    assert worst < 0.01


def test_mix_equal_power_gives_unit_scale_and_high_snr_limit():
    s = np.sin(np.arange(1000) * 0.1) * 0.1
    n = np.cos(np.arange(1000) * 0.37) * 0.1
    n *= math.sqrt(np.mean(s ** 2) / np.mean(n ** 2))
    assert dp.noise_scale(s, n, 0.0) == pytest.approx(1.0, abs=1e-12)
    mixed = dp.mix_at_snr(AudioClip(s), AudioClip(n), 100.0)
    assert np.max(np.abs(mixed.samples - s)) < 1e-5


def test_mix_errors_and_clipping(caplog):
    speech = AudioClip(np.full(100, 0.5))
    with pytest.raises(dp.DataError):
        dp.mix_at_snr(AudioClip(np.zeros(100)), AudioClip(np.ones(200)), 0.0)
    with pytest.raises(dp.DataError):
        dp.mix_at_snr(speech, AudioClip(np.zeros(200)), 0.0)
    with pytest.raises(dp.DataError):
        dp.mix_at_snr(speech, AudioClip(np.ones(50)), 0.0)
    with caplog.at_level("WARNING"):
        out = dp.mix_at_snr(AudioClip(np.full(100, 0.9)), AudioClip(np.ones(100)), -20.0)
    assert np.max(np.abs(out.samples)) <= 1.0
    assert "clipped" in caplog.text


def test_pad_silence():
    clip, labels = clip_with_labels(20, range(5, 10))
    same = dp.pad_silence(clip, labels, 0)
    assert np.array_equal(same[0].samples, clip.samples) and np.array_equal(same[1], labels)
    padded, plabels = dp.pad_silence(clip, labels, 1)
    assert len(padded) == len(clip) + 32000
    assert plabels.size == labels.size + 200
    assert not plabels[:100].any() and not plabels[-100:].any()
    assert np.array_equal(plabels[100:-100], labels)
    assert n_frames(len(padded)) == plabels.size


def test_speech_ratio_decreases_with_padding():
    clip, labels = clip_with_labels(50, [20])
    ratios = [dp.class_ratio(dp.pad_silence(clip, labels, s)[1])[0] for s in (0, 1, 2, 3)]
    assert all(a > b for a, b in zip(ratios, ratios[1:]))


def test_epd_trim():
    clip, labels = clip_with_labels(7, [3, 4])
    trimmed, tl = dp.epd_trim(clip, labels)
    assert np.array_equal(tl, [1, 1])
    assert np.array_equal(trimmed.samples, clip.samples[3 * 160: 4 * 160 + 400])
    assert n_frames(len(trimmed)) == tl.size
    again, tl2 = dp.epd_trim(trimmed, tl)
    assert np.array_equal(again.samples, trimmed.samples) and np.array_equal(tl2, tl)
    with pytest.raises(dp.DataError):
        dp.epd_trim(clip, np.zeros(7, np.int8))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 1), min_size=1, max_size=60).filter(any))
def test_epd_never_lowers_speech_ratio(bits):
    clip, labels = clip_with_labels(len(bits), [i for i, b in enumerate(bits) if b])
    _, tl = dp.epd_trim(clip, labels)
    assert dp.class_ratio(tl)[0] >= dp.class_ratio(labels)[0]
    assert tl[0] == 1 and tl[-1] == 1


def test_class_ratio():
    assert dp.class_ratio(np.ones(5)) == (100.0, 0.0)
    assert dp.class_ratio(np.array([1, 1, 0, 0])) == (50.0, 50.0)
    assert dp.class_ratio([np.array([1, 0]), np.array([1, 1])]) == (75.0, 25.0)
    with pytest.raises(ValueError):
        dp.class_ratio(np.array([]))


def test_energy_labeler():
    assert not dp.energy_label(AudioClip(np.zeros(16000))).any()
    t = np.arange(32000) / 16000
    samples = np.zeros(32000)
    samples[16000:24000] = np.sin(2 * np.pi * 1000 * t[16000:24000])
    clip = AudioClip(samples)
    labels = dp.energy_label(clip)
    # frame f covers [160 f, 160 f + 400); it overlaps the burst iff 98 <= f <= 149
    expect = np.zeros(n_frames(32000), np.int8)
    expect[98:150] = 1
    assert np.array_equal(labels, expect)
    assert np.array_equal(dp.energy_label(clip), labels)


def test_energy_labeler_hangover_rules():
    samples = np.zeros(16000)
    samples[4000:4160] = 0.5  # 1 hop: touches only 3 frames, kept (run >= 3)
    samples[8000:8001] = 0.5  # one sample: touches 3 frames too
    labels = dp.energy_label(AudioClip(samples))
    runs = [(a, b) for a, b, v in dp._runs(labels.astype(bool)) if v]
    assert all(b - a >= 3 for a, b in runs)


def test_label_and_manifest_files(tmp_path):
    labels = np.array([0, 1, 1, 0], np.int8)
    dp.write_labels(tmp_path / "a.lab", labels)
    assert (tmp_path / "a.lab").read_text() == "0110\n"
    assert np.array_equal(dp.read_labels(tmp_path / "a.lab"), labels)
    (tmp_path / "b.lab").write_text("01x\n")
    with pytest.raises(dp.DataError):
        dp.read_labels(tmp_path / "b.lab")
    rec = dp.ManifestRecord("u1", "wav/u1.wav", "labels/u1.lab", "train", "pink", -5.0, "pad1")
    dp.write_manifest(tmp_path / "m.csv", [rec])
    (back,) = dp.read_manifest(tmp_path / "m.csv")
    assert back.wav_path == str(tmp_path / "wav/u1.wav") and back.snr_db == -5.0
    (tmp_path / "bad.csv").write_text("utt_id,wav_path\nx,y\n")
    with pytest.raises(dp.DataError):
        dp.read_manifest(tmp_path / "bad.csv")


def test_condition_parsing():
    assert dp.ImbalanceCondition.parse("Pad3s") is dp.ImbalanceCondition.PAD3
    assert dp.ImbalanceCondition.parse("no-pad") is dp.ImbalanceCondition.NOPAD
    assert dp.ImbalanceCondition.PAD2.pad_seconds == 2
    with pytest.raises(ValueError):
        dp.ImbalanceCondition.parse("pad9")


def test_synth_labels_match_construction():
    cfg = dp.SynthConfig(n_train=4)
    for index in range(4):
        clip, labels, spans, _, _ = dp.synth_utterance(3, index, cfg, "nopad")
        assert labels.size == n_frames(len(clip)) == logmel(clip).shape[0]
        assert spans
        for a, b in spans:
            centres = np.arange(labels.size) * 160 + 200
            inside = (centres >= a) & (centres < b)
            assert labels[inside].all()
        assert dp.class_ratio(labels)[0] < 100


@pytest.mark.parametrize("condition", list(dp.ImbalanceCondition))
def test_synth_alignment_every_condition(condition):
    clip, labels, *_ = dp.synth_utterance(5, 0, dp.SynthConfig(), condition)
    assert labels.size == logmel(clip).shape[0]


def test_condition_ratios_are_monotone():
    cfg = dp.SynthConfig()
    ratios = []
    for cond in ("epd", "nopad", "pad1", "pad2", "pad3"):
        labels = [dp.synth_utterance(11, i, cfg, cond)[1] for i in range(6)]
        ratios.append(dp.class_ratio(labels)[0])
    assert all(a > b for a, b in zip(ratios, ratios[1:]))


def test_synth_corpus_is_deterministic(tmp_path):
    cfg = dp.SynthConfig(n_train=3, n_valid=1, n_test=2, dur_range=(1.0, 1.5))
    a = dp.synth_corpus(7, cfg, tmp_path / "a")
    b = dp.synth_corpus(7, cfg, tmp_path / "b")
    assert [r.utt_id for r in a] == [r.utt_id for r in b]
    assert (tmp_path / "a/manifest.csv").read_bytes() == (tmp_path / "b/manifest.csv").read_bytes()
    for ra, rb in zip(a, b):
        assert open(ra.wav_path, "rb").read() == open(rb.wav_path, "rb").read()
    assert {r.split for r in a} == {"train", "valid", "test"}
    assert all(r.condition == "nopad" for r in a if r.split == "test")
    utts = dp.load_split(a, "train")
    assert len(utts) == 3 and all(u.labels.size == u.features.shape[0] for u in utts)
    c = dp.synth_corpus(8, cfg, tmp_path / "c")
    assert open(c[0].wav_path, "rb").read() != open(a[0].wav_path, "rb").read()


def test_load_utterance_uses_cache_and_checks_alignment(tmp_path):
    from attvad.features import save_features

    cfg = dp.SynthConfig(n_train=1, n_valid=0, n_test=0, dur_range=(1.0, 1.0))
    (rec,) = dp.synth_corpus(1, cfg, tmp_path)
    utt = dp.load_utterance(rec)
    save_features(tmp_path / f"{rec.utt_id}.feat", utt.features + 1.0)
    cached = dp.load_utterance(rec, tmp_path)
    assert np.array_equal(cached.features, utt.features + 1.0)
    dp.write_labels(rec.label_path, utt.labels[:-1])
    with pytest.raises(dp.DataError):
        dp.load_utterance(rec)
