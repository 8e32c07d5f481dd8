"""Audio ingestion and the 40-band log-mel front end (25 ms window, 10 ms hop)."""
from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SAMPLE_RATE = 16000
WIN_LENGTH = 400  # 25 ms
HOP_LENGTH = 160  # 10 ms
N_FFT = 512
N_MELS = 40
LOG_FLOOR = 1e-10
STD_FLOOR = 1e-8
FEATURE_MAGIC = b"ATTVAD-FEAT 1"


class AudioFormatError(ValueError):
    """A WAV file violates the PCM16 / mono / 16 kHz input contract."""

    def __init__(self, path, field: str, found, expected):
        self.path, self.field, self.found, self.expected = str(path), field, found, expected
        super().__init__(f"{path}: {field} is {found}, expected {expected}")


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("AudioClip samples must be one-dimensional")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("AudioClip samples must be finite")

    def __len__(self):
        return self.samples.size

    @property
    def seconds(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray


def read_wav(path) -> AudioClip:
    """Read a PCM16 mono 16 kHz WAV file, scaling samples by 1/32768."""
    try:
        with wave.open(str(path), "rb") as wf:
            if wf.getcomptype() != "NONE":
                raise AudioFormatError(path, "compression", wf.getcomptype(), "NONE (PCM)")
            if wf.getsampwidth() != 2:
                raise AudioFormatError(path, "sample width", 8 * wf.getsampwidth(), "16 bits")
            if wf.getnchannels() != 1:
                raise AudioFormatError(path, "channels", wf.getnchannels(), 1)
            if wf.getframerate() != SAMPLE_RATE:
                raise AudioFormatError(path, "sample rate", wf.getframerate(), SAMPLE_RATE)
            raw = wf.readframes(wf.getnframes())
    except wave.Error as exc:
        raise AudioFormatError(path, "container", str(exc), "RIFF/WAVE PCM") from None
    pcm = np.frombuffer(raw, dtype="<i2")
    return AudioClip(pcm.astype(np.float64) / 32768.0, SAMPLE_RATE)


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    scaled = np.round(np.asarray(samples, dtype=np.float64) * 32768.0)
    return np.clip(scaled, -32768, 32767).astype("<i2")


def write_wav(path, clip: AudioClip) -> None:
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(clip.sample_rate)
        wf.writeframes(to_pcm16(clip.samples).tobytes())


def n_frames(n_samples: int) -> int:
    """Frames on the 25 ms / 10 ms grid; 0 for clips shorter than one window."""
    if n_samples < WIN_LENGTH:
        return 0
    return (n_samples - WIN_LENGTH) // HOP_LENGTH + 1


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(n_mels: int = N_MELS, fmin: float = 0.0, fmax: float = SAMPLE_RATE / 2):
    """``n_mels + 2`` frequencies (Hz): lower edge, band centres, upper edge."""
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))


def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT, sample_rate: int = SAMPLE_RATE):
    """Triangular HTK-mel filters of unit peak, shape ``(n_mels, n_fft // 2 + 1)``."""
    edges = mel_band_edges(n_mels, 0.0, sample_rate / 2)
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lower, centre, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lower) / (centre - lower)
    falling = (upper - freqs) / (upper - centre)
    return np.maximum(0.0, np.minimum(rising, falling))


_FBANK = mel_filterbank()
_WINDOW = np.hamming(WIN_LENGTH)


def frame_signal(samples: np.ndarray) -> np.ndarray:
    count = n_frames(samples.size)
    idx = np.arange(WIN_LENGTH)[None, :] + HOP_LENGTH * np.arange(count)[:, None]
    return samples[idx]


def logmel(clip: AudioClip, n_mels: int = N_MELS) -> np.ndarray:
    """``T x n_mels`` natural-log mel energies of a 16 kHz clip."""
    if clip.sample_rate != SAMPLE_RATE:
        raise ValueError(f"sample rate {clip.sample_rate} unsupported, expected {SAMPLE_RATE}")
    if clip.samples.size < WIN_LENGTH:
        raise ValueError(f"clip has {clip.samples.size} samples, need at least {WIN_LENGTH}")
    fbank = _FBANK if n_mels == N_MELS else mel_filterbank(n_mels)
    frames = frame_signal(clip.samples) * _WINDOW
    spec = np.abs(np.fft.rfft(frames, n=N_FFT, axis=1)) ** 2
    return np.log(np.maximum(spec @ fbank.T, LOG_FLOOR))


def fit_norm(feature_mats) -> NormStats:
    """Global per-dimension mean and (floored) standard deviation."""
    stacked = np.concatenate([np.asarray(f, dtype=np.float64) for f in feature_mats], axis=0)
    if stacked.shape[0] == 0:
        raise ValueError("fit_norm needs at least one frame")
    return NormStats(stacked.mean(axis=0), np.maximum(stacked.std(axis=0), STD_FLOOR))


def apply_norm(stats: NormStats, feats: np.ndarray) -> np.ndarray:
    return (np.asarray(feats, dtype=np.float64) - stats.mean) / stats.std


# feature cache: b"ATTVAD-FEAT 1 <T> <dims>\n" followed by little-endian f64 rows

def save_features(path, feats: np.ndarray) -> None:
    feats = np.ascontiguousarray(feats, dtype="<f8")
    header = FEATURE_MAGIC + f" {feats.shape[0]} {feats.shape[1]}\n".encode()
    Path(path).write_bytes(header + feats.tobytes())


def load_features(path) -> np.ndarray:
    data = Path(path).read_bytes()
    head, _, body = data.partition(b"\n")
    parts = head.split()
    if b" ".join(parts[:2]) != FEATURE_MAGIC or len(parts) != 4:
        raise ValueError(f"{path}: not a feature cache file")
    rows, dims = int(parts[2]), int(parts[3])
    if len(body) != 8 * rows * dims:
        raise ValueError(f"{path}: expected {rows}x{dims} values, found {len(body) // 8}")
    return np.frombuffer(body, dtype="<f8").reshape(rows, dims).copy()
