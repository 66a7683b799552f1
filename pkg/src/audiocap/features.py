"""Log mel-band energy extraction and the ``.lmel`` feature file format."""
from __future__ import annotations

import struct
import wave
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from scipy.signal import get_window

from .errors import (
    AudioFileMissing,
    ConfigurationError,
    EmptyAudio,
    FormatError,
    UnsupportedEncoding,
)

LMEL_MAGIC = b"LMEL"
LMEL_VERSION = 1
_LMEL_HEADER = struct.Struct("<4sHII")


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class FeatureExtractionConfig:
    window_length: int = 1024
    hop_length: int = 512
    num_mels: int = 64
    window_function: str = "hamming"
    centered: bool = True
    log_floor: float = 1e-10
    mel_fmin: float = 0.0
    mel_fmax: float | None = None  # None -> sample_rate / 2

    def __post_init__(self):
        if not 1 <= self.hop_length <= self.window_length:
            raise ConfigurationError("hop_length must lie in [1, window_length]")
        if self.num_mels < 1:
            raise ConfigurationError("num_mels must be >= 1")
        if self.log_floor <= 0:
            raise ConfigurationError("log_floor must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureExtractionConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown feature config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class FeatureSequence:
    data: np.ndarray  # (T, F)
    source_id: str = ""

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]


def read_wav(path) -> AudioClip:
    """Read linear PCM WAV as float64 in [-1, 1]; multi-channel audio is averaged to mono."""
    path = Path(path)
    if not path.is_file():
        raise AudioFileMissing(f"audio file not found: {path}")
    try:
        with wave.open(str(path), "rb") as w:
            channels = w.getnchannels()
            width = w.getsampwidth()
            rate = w.getframerate()
            raw = w.readframes(w.getnframes())
    except wave.Error as exc:
        raise UnsupportedEncoding(f"{path}: not a linear-PCM WAV file ({exc})") from None
    if width == 2:
        pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    elif width == 1:
        pcm = (np.frombuffer(raw, dtype=np.uint8).astype(np.float64) - 128.0) / 128.0
    elif width == 4:
        pcm = np.frombuffer(raw, dtype="<i4").astype(np.float64) / 2147483648.0
    else:
        raise UnsupportedEncoding(f"{path}: unsupported sample width of {width} bytes")
    if pcm.size == 0:
        raise EmptyAudio(f"{path}: no audio samples")
    samples = pcm.reshape(-1, channels).mean(axis=1)
    return AudioClip(samples, rate)


def write_wav(path, samples, sample_rate: int = 44100) -> None:
    """Write mono 16-bit PCM; samples are clipped to [-1, 1 - 2^-15]."""
    pcm = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: FeatureExtractionConfig, fft_bins: int, sample_rate: int) -> np.ndarray:
    """Triangular, area-normalized filters of shape (num_mels, fft_bins).

    Peaks are equally spaced on the mel scale; each triangle is scaled by
    2 / (upper edge - lower edge) in Hz.
    """
    fmax = sample_rate / 2.0 if cfg.mel_fmax is None else cfg.mel_fmax
    if fmax > sample_rate / 2.0:
        raise ConfigurationError(
            f"sample rate {sample_rate} Hz is below twice the mel upper edge {fmax} Hz"
        )
    n_fft = 2 * (fft_bins - 1)
    freqs = np.arange(fft_bins) * sample_rate / n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.mel_fmin), hz_to_mel(fmax), cfg.num_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling)) * (2.0 / (hi - lo))
    empty = np.flatnonzero(fb.max(axis=1) <= 0.0)
    if empty.size:
        raise ConfigurationError(
            f"{cfg.num_mels} mel bands are too many for {fft_bins} FFT bins "
            f"(filters {empty.tolist()} are empty)"
        )
    return fb


def expected_frames(num_samples: int, hop_length: int = 512) -> int:
    return num_samples // hop_length + 1


def power_spectrogram(samples: np.ndarray, cfg: FeatureExtractionConfig) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64)
    n = cfg.window_length
    if cfg.centered:
        x = np.pad(x, n // 2, mode="reflect")
    if x.size < n:
        x = np.pad(x, (0, n - x.size))
    frames = np.lib.stride_tricks.sliding_window_view(x, n)[:: cfg.hop_length]
    win = get_window(cfg.window_function, n, fftbins=True)
    spec = np.fft.rfft(frames * win, axis=-1)
    return spec.real ** 2 + spec.imag ** 2


def log_mel(clip: AudioClip, cfg: FeatureExtractionConfig | None = None,
            source_id: str = "") -> FeatureSequence:
    """Log mel-band energies, T = floor(n / hop) + 1 frames under centered framing."""
    cfg = cfg or FeatureExtractionConfig()
    if len(clip.samples) < 1:
        raise EmptyAudio("clip has no samples")
    fb = mel_filterbank(cfg, cfg.window_length // 2 + 1, clip.sample_rate)
    power = power_spectrogram(clip.samples, cfg)
    return FeatureSequence(np.log(power @ fb.T + cfg.log_floor), source_id)


def save_lmel(path, data: np.ndarray) -> None:
    data = np.asarray(data)
    if data.ndim != 2:
        raise FormatError(f"feature matrix must be 2-D, got shape {data.shape}")
    T, F = data.shape
    with open(path, "wb") as fh:
        fh.write(_LMEL_HEADER.pack(LMEL_MAGIC, LMEL_VERSION, T, F))
        fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def load_lmel(path) -> np.ndarray:
    """Read an ``.lmel`` file as a float64 (T, F) matrix."""
    blob = Path(path).read_bytes()
    if len(blob) < _LMEL_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, T, F = _LMEL_HEADER.unpack_from(blob)
    if magic != LMEL_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != LMEL_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    body = blob[_LMEL_HEADER.size:]
    if len(body) != 4 * T * F:
        raise FormatError(f"{path}: expected {T}x{F} floats, found {len(body) // 4}")
    return np.frombuffer(body, dtype="<f4").astype(np.float64).reshape(T, F)
