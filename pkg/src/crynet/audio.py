"""WAV decoding, silence trimming, length normalisation and MFCC features.

Pipeline for one clip::

    load_wav -> remove_silence -> normalize_length(3 s) -> mfcc  => (13, 298)
"""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.fft import dct

from .errors import (
    AllSilentError,
    CorruptHeaderError,
    TooShortError,
    UnsupportedFormatError,
)

FEATURE_MAGIC = b"CRYF"
FEATURE_VERSION = 1


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self) -> None:
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class FeatureMap:
    values: np.ndarray  # (C, T)
    frame_hop_s: float

    @property
    def num_coeffs(self) -> int:
        return self.values.shape[0]

    @property
    def num_frames(self) -> int:
        return self.values.shape[1]


def load_wav(path: str | Path) -> AudioClip:
    """Decode 16-bit PCM WAV (mono or stereo) to floats in [-1, 1)."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    try:
        with wave.open(str(path), "rb") as wf:
            width = wf.getsampwidth()
            channels = wf.getnchannels()
            rate = wf.getframerate()
            n = wf.getnframes()
            raw = wf.readframes(n)
    except wave.Error as exc:
        msg = str(exc)
        if "unknown format" in msg:
            raise UnsupportedFormatError(f"{path}: {msg}") from exc
        raise CorruptHeaderError(f"{path}: {msg}") from exc
    except (EOFError, struct.error) as exc:
        raise CorruptHeaderError(f"{path}: truncated header") from exc
    if width != 2:
        raise UnsupportedFormatError(f"{path}: {8 * width}-bit samples, only 16-bit PCM is supported")
    if channels < 1 or rate <= 0:
        raise CorruptHeaderError(f"{path}: {channels} channels at {rate} Hz")
    usable = len(raw) // (2 * channels) * 2 * channels
    pcm = np.frombuffer(raw[:usable], dtype="<i2").astype(np.float64) / 32768.0
    samples = pcm.reshape(-1, channels).mean(axis=1)
    return AudioClip(samples, rate)


def save_wav(path: str | Path, samples: np.ndarray, sample_rate: int) -> None:
    """Write mono or (N, channels) float samples as 16-bit PCM."""
    data = np.asarray(samples, dtype=np.float64)
    channels = 1 if data.ndim == 1 else data.shape[1]
    pcm = np.clip(np.round(data * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(channels)
        wf.setsampwidth(2)
        wf.setframerate(sample_rate)
        wf.writeframes(pcm.tobytes())


def _windows(samples: np.ndarray, size: int) -> list[np.ndarray]:
    return [samples[i:i + size] for i in range(0, len(samples), size)]


def remove_silence(clip: AudioClip, threshold_db: float = -35.0,
                   window_s: float = 0.050) -> AudioClip:
    """Drop non-overlapping windows whose RMS is ``threshold_db`` below the loudest window."""
    if window_s <= 0:
        raise ValueError("window_s must be positive")
    size = max(1, int(round(window_s * clip.sample_rate)))
    frames = _windows(clip.samples, size)
    rms = np.array([np.sqrt(np.mean(f * f)) for f in frames]) if frames else np.zeros(0)
    peak = rms.max() if rms.size else 0.0
    if peak <= 0.0:
        raise AllSilentError("clip contains no signal")
    floor = peak * 10.0 ** (threshold_db / 20.0)
    kept = [f for f, r in zip(frames, rms) if r >= floor]
    return AudioClip(np.concatenate(kept), clip.sample_rate)


def normalize_length(clip: AudioClip, target_s: float = 3.0) -> AudioClip:
    """Centre-crop or symmetrically zero-pad to ``floor(target_s * sample_rate)`` samples."""
    n = len(clip.samples)
    if n == 0:
        raise TooShortError("empty clip")
    target = int(np.floor(target_s * clip.sample_rate))
    if n >= target:
        start = (n - target) // 2
        out = clip.samples[start:start + target]
    else:
        left = (target - n) // 2
        out = np.pad(clip.samples, (left, target - n - left))
    return AudioClip(out.copy(), clip.sample_rate)


def resample(samples: np.ndarray, rate: int, target_rate: int) -> np.ndarray:
    """Linear-interpolation resampling; output length ``floor(n * target / rate)``."""
    if rate == target_rate:
        return samples
    n_out = int(len(samples) * target_rate // rate)
    t_out = np.arange(n_out) / target_rate
    return np.interp(t_out, np.arange(len(samples)) / rate, samples)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular filters spaced evenly in mel from 0 Hz to Nyquist, shape (n_mels, n_fft//2+1)."""
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))
    freqs = np.linspace(0.0, sample_rate / 2.0, n_fft // 2 + 1)
    bank = np.zeros((n_mels, freqs.size))
    for m in range(n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        rising = (freqs - lo) / (mid - lo)
        falling = (hi - freqs) / (hi - mid)
        bank[m] = np.clip(np.minimum(rising, falling), 0.0, None)
    return bank


def _frames(samples: np.ndarray, frame_len: int, hop: int) -> np.ndarray:
    if len(samples) < frame_len:
        raise TooShortError(f"{len(samples)} samples, need at least one {frame_len}-sample frame")
    count = (len(samples) - frame_len) // hop + 1
    idx = np.arange(frame_len)[None, :] + hop * np.arange(count)[:, None]
    return samples[idx]


def log_mel_spectrogram(clip: AudioClip, frame_s: float = 0.025, hop_s: float = 0.010,
                        n_mels: int = 26, sample_rate: int = 16000,
                        preemphasis: float = 0.97) -> np.ndarray:
    """Log mel energies, shape (n_mels, T)."""
    x = resample(np.asarray(clip.samples, dtype=np.float64), clip.sample_rate, sample_rate)
    x = np.concatenate([x[:1], x[1:] - preemphasis * x[:-1]])
    frame_len = int(round(frame_s * sample_rate))
    hop = int(round(hop_s * sample_rate))
    frames = _frames(x, frame_len, hop) * np.hamming(frame_len)
    n_fft = 1 << (frame_len - 1).bit_length()
    power = np.abs(np.fft.rfft(frames, n_fft)) ** 2 / n_fft
    energies = power @ mel_filterbank(n_mels, n_fft, sample_rate).T
    return np.log(np.maximum(energies, np.finfo(np.float64).eps)).T


def mfcc(clip: AudioClip, n_coeffs: int = 13, frame_s: float = 0.025, hop_s: float = 0.010,
         n_mels: int = 26, sample_rate: int = 16000, preemphasis: float = 0.97,
         normalize: bool = True) -> FeatureMap:
    """MFCCs (orthonormal DCT-II of log mel energies), per-coefficient mean/variance normalised."""
    logmel = log_mel_spectrogram(clip, frame_s, hop_s, n_mels, sample_rate, preemphasis)
    ceps = dct(logmel, type=2, axis=0, norm="ortho")[:n_coeffs]
    if normalize:
        ceps = ceps - ceps.mean(axis=1, keepdims=True)
        ceps = ceps / np.maximum(ceps.std(axis=1, keepdims=True), 1e-10)
    return FeatureMap(ceps, hop_s)


def extract_features(path: str | Path, frontend=None) -> FeatureMap:
    """Full preprocessing for one file using a :class:`~crynet.config.FrontendConfig`."""
    from .config import FrontendConfig

    fc = frontend or FrontendConfig()
    clip = load_wav(path)
    clip = remove_silence(clip, fc.silence_threshold_db, fc.silence_window_s)
    clip = normalize_length(clip, fc.target_seconds)
    return mfcc(clip, fc.n_mfcc, fc.frame_s, fc.hop_s, fc.n_mels, fc.sample_rate, fc.preemphasis)


def write_feature_file(path: str | Path, values: np.ndarray) -> None:
    """``CRYF``, version byte, C and T as u32, then C*T little-endian f64 (row-major)."""
    values = np.ascontiguousarray(values, dtype="<f8")
    c, t = values.shape
    Path(path).write_bytes(FEATURE_MAGIC + struct.pack("<BII", FEATURE_VERSION, c, t) + values.tobytes())


def read_feature_file(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 13 or data[:4] != FEATURE_MAGIC:
        raise CorruptHeaderError(f"{path}: not a feature file")
    version, c, t = struct.unpack("<BII", data[4:13])
    if version != FEATURE_VERSION:
        raise CorruptHeaderError(f"{path}: unsupported feature version {version}")
    if len(data) != 13 + 8 * c * t:
        raise CorruptHeaderError(f"{path}: payload size does not match {c}x{t}")
    return np.frombuffer(data[13:], dtype="<f8").reshape(c, t).copy()
