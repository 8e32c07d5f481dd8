"""Dataset construction: SNR mixing, silence padding, endpoint trimming,
energy-based labels and a seeded synthetic corpus."""
from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .features import (
    HOP_LENGTH,
    SAMPLE_RATE,
    WIN_LENGTH,
    AudioClip,
    frame_signal,
    load_features,
    logmel,
    n_frames,
    read_wav,
    write_wav,
)

log = logging.getLogger(__name__)

MANIFEST_COLUMNS = ("utt_id", "wav_path", "label_path", "split", "noise_type", "snr_db", "condition")
NOISE_TYPES = ("white", "pink", "babble", "machine")

# energy labeler
ENERGY_FLOOR_DB = -100.0
FLOOR_PERCENTILE = 10.0
MARGIN_DB = 6.0
MIN_SPEECH_RUN = 3
MIN_GAP_RUN = 5


class DataError(ValueError):
    """Input data cannot be processed (bad file, degenerate signal, misaligned labels)."""


class ImbalanceCondition(str, enum.Enum):
    EPD = "epd"
    NOPAD = "nopad"
    PAD1 = "pad1"
    PAD2 = "pad2"
    PAD3 = "pad3"

    @classmethod
    def parse(cls, text) -> "ImbalanceCondition":
        if isinstance(text, cls):
            return text
        key = str(text).strip().lower().replace("_", "").replace("-", "")
        aliases = {"pad1s": "pad1", "pad2s": "pad2", "pad3s": "pad3", "nopadding": "nopad"}
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise ValueError(f"unknown condition {text!r}; expected one of "
                             + ", ".join(c.value for c in cls)) from None

    @property
    def pad_seconds(self) -> int:
        return {"pad1": 1, "pad2": 2, "pad3": 3}.get(self.value, 0)


# ---------------------------------------------------------------------------
# signal-level operations


def power(x: np.ndarray) -> float:
    return float(np.mean(np.square(x)))


def mix_at_snr(speech: AudioClip, noise: AudioClip, snr_db: float,
               rng: np.random.Generator | None = None) -> AudioClip:
    """Add a randomly cropped noise segment scaled to hit ``snr_db``.

    Powers are mean squares over the whole clip.  The result is clipped to
    [-1, 1]; a warning is logged when any sample clips.
    """
    if not math.isfinite(snr_db):
        raise ValueError("snr_db must be finite")
    n = len(speech)
    if len(noise) < n:
        raise DataError(f"noise has {len(noise)} samples, speech needs {n}")
    rng = rng if rng is not None else np.random.default_rng(0)
    offset = int(rng.integers(0, len(noise) - n + 1))
    segment = noise.samples[offset:offset + n]
    p_s, p_n = power(speech.samples), power(segment)
    if p_s == 0.0:
        raise DataError("speech is digitally silent; SNR undefined")
    if p_n == 0.0:
        raise DataError("noise segment is digitally silent; SNR undefined")
    alpha = math.sqrt(p_s / (p_n * 10.0 ** (snr_db / 10.0)))
    mixed = speech.samples + alpha * segment
    clipped = np.abs(mixed) > 1.0
    if clipped.any():
        log.warning("mix_at_snr: %.3f%% of samples clipped", 100.0 * clipped.mean())
        mixed = np.clip(mixed, -1.0, 1.0)
    return AudioClip(mixed, speech.sample_rate)


def noise_scale(speech: np.ndarray, noise_segment: np.ndarray, snr_db: float) -> float:
    return math.sqrt(power(speech) / (power(noise_segment) * 10.0 ** (snr_db / 10.0)))


def pad_silence(clip: AudioClip, labels: np.ndarray, seconds: float):
    """Prepend and append ``seconds`` of zeros; the added frames are labelled 0."""
    if seconds < 0:
        raise ValueError("seconds must be >= 0")
    n_pad = int(round(seconds * clip.sample_rate))
    if n_pad % HOP_LENGTH:
        raise ValueError(f"padding of {n_pad} samples is not a whole number of {HOP_LENGTH}-sample hops")
    labels = np.asarray(labels, dtype=np.int8)
    if n_pad == 0:
        return clip, labels
    k = n_pad // HOP_LENGTH
    samples = np.concatenate([np.zeros(n_pad), clip.samples, np.zeros(n_pad)])
    new_labels = np.concatenate([np.zeros(k, np.int8), labels, np.zeros(k, np.int8)])
    return AudioClip(samples, clip.sample_rate), new_labels


def epd_trim(clip: AudioClip, labels: np.ndarray):
    """Drop audio and labels before the first and after the last speech frame."""
    labels = np.asarray(labels, dtype=np.int8)
    speech = np.flatnonzero(labels)
    if speech.size == 0:
        raise DataError("epd_trim: no speech frames")
    first, last = int(speech[0]), int(speech[-1])
    start = first * HOP_LENGTH
    stop = last * HOP_LENGTH + WIN_LENGTH
    return AudioClip(clip.samples[start:stop], clip.sample_rate), labels[first:last + 1].copy()


def class_ratio(labels) -> tuple[float, float]:
    """(speech %, non-speech %) over all frames of one or several label tracks."""
    if isinstance(labels, (list, tuple)) and labels and np.ndim(labels[0]) > 0:
        labels = np.concatenate([np.asarray(l).reshape(-1) for l in labels])
    labels = np.asarray(labels).reshape(-1)
    if labels.size == 0:
        raise ValueError("class_ratio needs at least one frame")
    speech = 100.0 * float(np.count_nonzero(labels)) / labels.size
    return speech, 100.0 - speech


def _runs(mask: np.ndarray):
    """(start, stop, value) runs of a boolean array."""
    if mask.size == 0:
        return []
    edges = np.flatnonzero(np.diff(mask.astype(np.int8))) + 1
    starts = np.concatenate([[0], edges])
    stops = np.concatenate([edges, [mask.size]])
    return [(int(a), int(b), bool(mask[a])) for a, b in zip(starts, stops)]


def frame_energy_db(clip: AudioClip) -> np.ndarray:
    frames = frame_signal(clip.samples)
    energy = np.mean(np.square(frames), axis=1)
    return np.maximum(10.0 * np.log10(np.maximum(energy, 1e-30)), ENERGY_FLOOR_DB)


def energy_label(clip: AudioClip) -> np.ndarray:
    """Frame labels from log energy on the 25/10 ms grid.

    Threshold: 10th-percentile frame energy + 6 dB.  Speech runs shorter than
    3 frames are erased, then interior gaps shorter than 5 frames are filled.
    """
    if len(clip) < WIN_LENGTH:
        return np.zeros(0, np.int8)
    energy = frame_energy_db(clip)
    floor = np.percentile(energy, FLOOR_PERCENTILE)
    speech = energy > floor + MARGIN_DB
    for a, b, val in _runs(speech):
        if val and b - a < MIN_SPEECH_RUN:
            speech[a:b] = False
    for a, b, val in _runs(speech):
        if not val and a > 0 and b < speech.size and b - a < MIN_GAP_RUN:
            speech[a:b] = True
    return speech.astype(np.int8)


# ---------------------------------------------------------------------------
# label files and manifests


def write_labels(path, labels) -> None:
    text = "".join("1" if v else "0" for v in np.asarray(labels).reshape(-1))
    Path(path).write_text(text + "\n")


def read_labels(path) -> np.ndarray:
    text = Path(path).read_text().strip()
    if text and set(text) - {"0", "1"}:
        raise DataError(f"{path}: label file must contain only 0/1 characters")
    return np.frombuffer(text.encode(), dtype=np.uint8).astype(np.int8) - ord("0")


@dataclass
class ManifestRecord:
    utt_id: str
    wav_path: str
    label_path: str
    split: str
    noise_type: str
    snr_db: float
    condition: str


def write_manifest(path, records) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_COLUMNS)
        writer.writeheader()
        for rec in records:
            row = asdict(rec)
            row["snr_db"] = f"{rec.snr_db:g}"
            writer.writerow(row)


def read_manifest(path) -> list[ManifestRecord]:
    """Read a manifest CSV; relative paths are resolved against its directory."""
    path = Path(path)
    base = path.parent
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise DataError(f"{path}: missing manifest columns {sorted(missing)}")
        for row in reader:
            rec = ManifestRecord(
                utt_id=row["utt_id"],
                wav_path=str(base / row["wav_path"]),
                label_path=str(base / row["label_path"]),
                split=row["split"],
                noise_type=row["noise_type"],
                snr_db=float(row["snr_db"]) if row["snr_db"] not in ("", "inf") else math.inf,
                condition=row["condition"],
            )
            out.append(rec)
    return out


@dataclass
class Utterance:
    utt_id: str
    features: np.ndarray  # T x 40, un-normalized
    labels: np.ndarray  # T
    split: str = "train"
    noise_type: str = ""
    snr_db: float = math.nan


def load_utterance(rec: ManifestRecord, cache_dir=None) -> Utterance:
    feats = None
    if cache_dir is not None:
        cached = Path(cache_dir) / f"{rec.utt_id}.feat"
        if cached.exists():
            feats = load_features(cached)
    if feats is None:
        feats = logmel(read_wav(rec.wav_path))
    labels = read_labels(rec.label_path)
    if labels.size != feats.shape[0]:
        raise DataError(f"{rec.label_path}: {labels.size} labels for {feats.shape[0]} frames")
    return Utterance(rec.utt_id, feats, labels, rec.split, rec.noise_type, rec.snr_db)


def load_split(records, split: str, cache_dir=None) -> list[Utterance]:
    return [load_utterance(r, cache_dir) for r in records if r.split == split]


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass
class SynthConfig:
    n_train: int = 200
    n_valid: int = 20
    n_test: int = 50
    dur_range: tuple[float, float] = (2.0, 4.0)
    snr_set: tuple[float, ...] = (-5.0, 0.0, 5.0)
    condition: ImbalanceCondition = ImbalanceCondition.PAD1
    noise_types: tuple[str, ...] = NOISE_TYPES
    speech_rms: float = 0.08

    def __post_init__(self):
        self.condition = ImbalanceCondition.parse(self.condition)
        self.dur_range = tuple(float(v) for v in self.dur_range)
        self.snr_set = tuple(float(v) for v in self.snr_set)
        self.noise_types = tuple(self.noise_types)
        for nt in self.noise_types:
            if nt not in NOISE_TYPES:
                raise ValueError(f"unknown noise type {nt!r}")
        if not 0 < self.dur_range[0] <= self.dur_range[1]:
            raise ValueError("dur_range must satisfy 0 < lo <= hi")


def _envelope(n: int, ramp: int) -> np.ndarray:
    env = np.ones(n)
    r = min(ramp, n // 2)
    if r:
        env[:r] = np.linspace(0.0, 1.0, r, endpoint=False)
        env[n - r:] = env[:r][::-1]
    return env


def _harmonic_voice(rng, n: int, sr: int, f0_range=(90.0, 250.0), formants=None) -> np.ndarray:
    """Harmonic complex with drifting f0, formant weighting and syllabic modulation."""
    t = np.arange(n) / sr
    f0 = rng.uniform(*f0_range)
    drift = 1.0 + 0.08 * np.sin(2 * np.pi * rng.uniform(0.5, 2.0) * t + rng.uniform(0, 2 * np.pi))
    phase = 2 * np.pi * np.cumsum(f0 * drift) / sr
    if formants is None:
        formants = [rng.uniform(300, 900), rng.uniform(900, 2300), rng.uniform(2300, 3500)]
    sig = np.zeros(n)
    for h in range(1, int(4000 // f0) + 1):
        freq = h * f0
        weight = sum(math.exp(-0.5 * ((freq - fm) / 120.0) ** 2) for fm in formants) + 0.05
        sig += weight / math.sqrt(h) * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
    rate = rng.uniform(3.0, 6.0)
    syllabic = 0.55 + 0.45 * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))
    return sig * syllabic


def _band_noise(rng, n: int, sr: int, lo: float, hi: float) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / sr)
    spec[(freqs < lo) | (freqs > hi)] = 0.0
    return np.fft.irfft(spec, n)


def _speech_segment(rng, n: int, sr: int) -> np.ndarray:
    voiced = _harmonic_voice(rng, n, sr)
    voiced /= np.sqrt(np.mean(voiced ** 2)) + 1e-12
    fric = _band_noise(rng, n, sr, rng.uniform(2500, 4000), rng.uniform(5000, 7500))
    fric /= np.sqrt(np.mean(fric ** 2)) + 1e-12
    seg = voiced + rng.uniform(0.1, 0.4) * fric
    return seg * _envelope(n, int(0.01 * sr))


def synth_base_utterance(rng: np.random.Generator, dur_range=(2.0, 4.0), speech_rms: float = 0.08,
                         sr: int = SAMPLE_RATE):
    """Clean speech-like utterance, its frame labels and the speech sample spans.

    Leading and trailing silences bracket alternating speech segments and
    pauses.  A frame is labelled speech when its centre sample falls inside a
    speech segment.
    """
    total = int(rng.uniform(*dur_range) * sr)
    lead = int(rng.uniform(0.15, 0.5) * sr)
    trail = int(rng.uniform(0.15, 0.5) * sr)
    samples = np.zeros(total)
    spans = []
    pos = lead
    while True:
        seg = int(rng.uniform(0.3, 1.0) * sr)
        if pos + seg > total - trail:
            seg = total - trail - pos
        if seg < int(0.15 * sr):
            break
        samples[pos:pos + seg] = _speech_segment(rng, seg, sr)
        spans.append((pos, pos + seg))
        pos += seg + int(rng.uniform(0.1, 0.4) * sr)
    if not spans:
        seg = max(int(0.2 * sr), total - lead - trail)
        samples = np.concatenate([samples, np.zeros(max(0, lead + seg + trail - total))])
        samples[lead:lead + seg] = _speech_segment(rng, seg, sr)
        spans.append((lead, lead + seg))
    active = np.concatenate([np.arange(a, b) for a, b in spans])
    samples *= speech_rms / np.sqrt(np.mean(samples[active] ** 2))
    return AudioClip(samples, sr), labels_from_spans(len(samples), spans), spans


def labels_from_spans(n_samples: int, spans) -> np.ndarray:
    count = n_frames(n_samples)
    centres = np.arange(count) * HOP_LENGTH + WIN_LENGTH // 2
    labels = np.zeros(count, np.int8)
    for a, b in spans:
        labels[(centres >= a) & (centres < b)] = 1
    return labels


def synth_noise(rng: np.random.Generator, kind: str, n: int, sr: int = SAMPLE_RATE) -> np.ndarray:
    if kind == "white":
        x = rng.standard_normal(n)
    elif kind == "pink":
        spec = np.fft.rfft(rng.standard_normal(n))
        freqs = np.fft.rfftfreq(n, 1.0 / sr)
        spec[1:] /= np.sqrt(freqs[1:])
        spec[0] = 0.0
        x = np.fft.irfft(spec, n)
    elif kind == "babble":
        x = np.zeros(n)
        for _ in range(int(rng.integers(4, 8))):
            x += _harmonic_voice(rng, n, sr) * (0.6 + 0.4 * np.sin(
                2 * np.pi * rng.uniform(0.2, 1.0) * np.arange(n) / sr + rng.uniform(0, 6.3)))
    elif kind == "machine":
        t = np.arange(n) / sr
        hum = rng.uniform(40, 120)
        x = sum(np.sin(2 * np.pi * k * hum * t + rng.uniform(0, 6.3)) / k for k in range(1, 8))
        rumble = _band_noise(rng, n, sr, 100, 2500)
        x = x / np.sqrt(np.mean(x ** 2)) + 0.7 * rumble / (np.sqrt(np.mean(rumble ** 2)) + 1e-12)
    else:
        raise ValueError(f"unknown noise type {kind!r}")
    return x / (np.sqrt(np.mean(x ** 2)) + 1e-12)


def apply_condition(clip: AudioClip, labels: np.ndarray, condition) -> tuple[AudioClip, np.ndarray]:
    condition = ImbalanceCondition.parse(condition)
    if condition is ImbalanceCondition.EPD:
        return epd_trim(clip, labels)
    return pad_silence(clip, labels, condition.pad_seconds)


def utterance_rng(master_seed: int, index: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(master_seed), int(index), int(stream)])


def synth_utterance(master_seed: int, index: int, cfg: SynthConfig, condition=None):
    """Noisy utterance ``index`` of the corpus: (clip, labels, spans, noise type, snr)."""
    condition = cfg.condition if condition is None else ImbalanceCondition.parse(condition)
    base_rng = utterance_rng(master_seed, index, 0)
    clip, labels, spans = synth_base_utterance(base_rng, cfg.dur_range, cfg.speech_rms)
    if condition is ImbalanceCondition.EPD:
        first = int(np.flatnonzero(labels)[0])
        shift = -first * HOP_LENGTH
    else:
        shift = condition.pad_seconds * SAMPLE_RATE
    spans = [(a + shift, b + shift) for a, b in spans]
    clip, labels = apply_condition(clip, labels, condition)

    mix_rng = utterance_rng(master_seed, index, 1)
    noise_type = cfg.noise_types[int(mix_rng.integers(len(cfg.noise_types)))]
    snr = float(cfg.snr_set[int(mix_rng.integers(len(cfg.snr_set)))])
    noise = synth_noise(mix_rng, noise_type, len(clip) + SAMPLE_RATE // 2)
    noisy = mix_at_snr(clip, AudioClip(noise), snr, mix_rng)
    return noisy, labels, spans, noise_type, snr


def synth_corpus(seed: int, cfg: SynthConfig, out_dir) -> list[ManifestRecord]:
    """Write WAVs, label files and ``manifest.csv`` under ``out_dir``.

    The imbalance condition applies to the train and valid splits; the test
    split is always left unpadded.
    """
    out_dir = Path(out_dir)
    (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    (out_dir / "labels").mkdir(parents=True, exist_ok=True)
    records = []
    plan = [("train", cfg.n_train), ("valid", cfg.n_valid), ("test", cfg.n_test)]
    index = 0
    for split, count in plan:
        cond = cfg.condition if split != "test" else ImbalanceCondition.NOPAD
        for _ in range(count):
            noisy, labels, _, noise_type, snr = synth_utterance(seed, index, cfg, cond)
            utt_id = f"{split}{index:05d}"
            write_wav(out_dir / "wav" / f"{utt_id}.wav", noisy)
            write_labels(out_dir / "labels" / f"{utt_id}.lab", labels)
            records.append(ManifestRecord(utt_id, f"wav/{utt_id}.wav", f"labels/{utt_id}.lab",
                                          split, noise_type, snr, cond.value))
            index += 1
    write_manifest(out_dir / "manifest.csv", records)
    return read_manifest(out_dir / "manifest.csv")
