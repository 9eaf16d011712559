"""Acoustic front end: WAV I/O, resampling, STFT, log-mel features."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

from .errors import (
    EmptyAudioError,
    InvalidBandError,
    InvalidConfigError,
    ShapeMismatchError,
    TooShortError,
)

DEFAULT_SAMPLE_RATE = 16000
DEFAULT_N_MELS = 40
DEFAULT_FRAME_LEN_S = 0.030
DEFAULT_FRAME_HOP_S = 0.010  # 10 ms frame shift, the usual SED hop
DEFAULT_N_FFT = 512
DEFAULT_F_MIN = 0.0
DEFAULT_F_MAX = 8000.0
LOG_FLOOR = 1e-10

# Kaiser beta for the polyphase resampler's windowed-sinc prototype.
RESAMPLE_KAISER_BETA = 5.0

FEATURE_MAGIC = b"FSED"
FEATURE_VERSION = 1


@dataclass(frozen=True)
class EventAnnotation:
    """Ground-truth event span, in seconds, with a class label."""

    onset_s: float
    offset_s: float
    class_name: str


@dataclass
class AudioClip:
    """Mono waveform plus sample rate and optional event annotations."""

    samples: np.ndarray
    sample_rate: int
    annotations: list[EventAnnotation] | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise InvalidConfigError(f"sample_rate must be positive, got {self.sample_rate}")

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class MelFeatures:
    """Log-mel feature matrix of shape (n_mels, n_frames), natural log."""

    values: np.ndarray
    frame_hop_s: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise ShapeMismatchError(f"expected 2-D features, got shape {self.values.shape}")
        if self.frame_hop_s <= 0:
            raise InvalidConfigError(f"frame_hop_s must be positive, got {self.frame_hop_s}")

    @property
    def n_mels(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


@dataclass
class MelFilterbank:
    """Triangular mel filterbank, rows are filters over FFT bins."""

    weights: np.ndarray
    sample_rate: int
    n_fft: int


@dataclass(frozen=True)
class FeatureConfig:
    """End-to-end feature extraction settings."""

    sample_rate: int = DEFAULT_SAMPLE_RATE
    n_mels: int = DEFAULT_N_MELS
    frame_len_s: float = DEFAULT_FRAME_LEN_S
    frame_hop_s: float = DEFAULT_FRAME_HOP_S
    window: str = "hann"
    n_fft: int = DEFAULT_N_FFT
    f_min: float = DEFAULT_F_MIN
    f_max: float = DEFAULT_F_MAX
    log_floor: float = LOG_FLOOR

    @property
    def frame_len(self) -> int:
        return int(round(self.frame_len_s * self.sample_rate))

    @property
    def frame_hop(self) -> int:
        return int(round(self.frame_hop_s * self.sample_rate))

    def window_samples(self, n_frames: int) -> int:
        """Samples covered by n_frames consecutive analysis frames."""
        return self.frame_len + (n_frames - 1) * self.frame_hop


def hz_to_mel(f_hz):
    """HTK mel scale: 2595 * log10(1 + f/700)."""
    return 2595.0 * np.log10(1.0 + np.asarray(f_hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """Resample a clip with a polyphase windowed-sinc filter.

    Identity (bit-exact) when the rates already match. Annotations are in
    seconds and carry over unchanged.
    """
    if len(clip) == 0:
        raise EmptyAudioError("cannot resample an empty clip")
    if target_rate <= 0:
        raise InvalidConfigError(f"target_rate must be positive, got {target_rate}")
    if clip.sample_rate == target_rate:
        return clip
    ratio = Fraction(target_rate, clip.sample_rate)
    out = resample_poly(
        clip.samples, ratio.numerator, ratio.denominator,
        window=("kaiser", RESAMPLE_KAISER_BETA),
    )
    return AudioClip(out, target_rate, annotations=clip.annotations)


def _window_vector(window: str, frame_len: int) -> np.ndarray:
    # Periodic windows: standard for STFT analysis.
    n = np.arange(frame_len)
    if window == "hann":
        return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / frame_len)
    if window == "hamming":
        return 0.54 - 0.46 * np.cos(2.0 * np.pi * n / frame_len)
    if window == "rectangular":
        return np.ones(frame_len)
    raise InvalidConfigError(f"unknown window {window!r}")


def stft_magnitude(
    clip: AudioClip,
    frame_len_s: float = DEFAULT_FRAME_LEN_S,
    hop_s: float = DEFAULT_FRAME_HOP_S,
    window: str = "hann",
    n_fft: int = DEFAULT_N_FFT,
) -> np.ndarray:
    """Power spectrogram of shape (n_fft//2 + 1, n_frames).

    Frames are left-aligned (no centering): frame t covers samples
    [t*hop, t*hop + frame_len), so n_frames = (len - frame_len)//hop + 1.
    Frames shorter than n_fft are zero-padded before the FFT.
    """
    if len(clip) == 0:
        raise EmptyAudioError("cannot compute STFT of an empty clip")
    frame_len = int(round(frame_len_s * clip.sample_rate))
    hop = int(round(hop_s * clip.sample_rate))
    if frame_len <= 0 or hop <= 0:
        raise InvalidConfigError("frame length and hop must be positive")
    if n_fft < frame_len:
        raise InvalidConfigError(f"n_fft={n_fft} shorter than frame_len={frame_len}")
    if len(clip) < frame_len:
        raise TooShortError(
            f"clip of {len(clip)} samples is shorter than one {frame_len}-sample frame"
        )
    frames = np.lib.stride_tricks.sliding_window_view(clip.samples, frame_len)[::hop]
    win = _window_vector(window, frame_len)
    spectrum = np.fft.rfft(frames * win, n=n_fft, axis=1)
    power = (spectrum.real**2 + spectrum.imag**2).T
    return np.ascontiguousarray(power)


def mel_filterbank(
    n_mels: int = DEFAULT_N_MELS,
    n_fft: int = DEFAULT_N_FFT,
    sample_rate: int = DEFAULT_SAMPLE_RATE,
    f_min: float = DEFAULT_F_MIN,
    f_max: float = DEFAULT_F_MAX,
) -> MelFilterbank:
    """Build triangular filters with peaks equally spaced on the HTK mel scale."""
    if n_mels < 1:
        raise InvalidConfigError(f"n_mels must be >= 1, got {n_mels}")
    nyquist = sample_rate / 2.0
    if f_max > nyquist:
        raise InvalidBandError(f"f_max={f_max} exceeds Nyquist {nyquist}")
    if not 0.0 <= f_min < f_max:
        raise InvalidBandError(f"need 0 <= f_min < f_max, got [{f_min}, {f_max}]")

    # n_mels + 2 equally spaced mel points; filter i spans points i-1..i+1.
    mel_points = np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2)
    hz_points = mel_to_hz(mel_points)
    bin_freqs = np.arange(n_fft // 2 + 1) * (sample_rate / n_fft)

    weights = np.zeros((n_mels, n_fft // 2 + 1))
    for i in range(n_mels):
        left, peak, right = hz_points[i], hz_points[i + 1], hz_points[i + 2]
        rising = (bin_freqs - left) / (peak - left)
        falling = (right - bin_freqs) / (right - peak)
        weights[i] = np.maximum(0.0, np.minimum(rising, falling))
    return MelFilterbank(weights=weights, sample_rate=sample_rate, n_fft=n_fft)


def log_mel(
    spec: np.ndarray,
    fb: MelFilterbank,
    floor: float = LOG_FLOOR,
    frame_hop_s: float = DEFAULT_FRAME_HOP_S,
) -> MelFeatures:
    """Apply the filterbank to a power spectrogram and take the natural log."""
    spec = np.asarray(spec)
    if spec.ndim != 2 or spec.shape[0] != fb.weights.shape[1]:
        raise ShapeMismatchError(
            f"spectrogram has {spec.shape} rows/cols, filterbank expects "
            f"{fb.weights.shape[1]} bins"
        )
    if floor <= 0:
        raise InvalidConfigError("log floor must be positive")
    values = np.log(np.maximum(fb.weights @ spec, floor))
    return MelFeatures(values=values.astype(np.float32), frame_hop_s=frame_hop_s)


def extract_features(clip: AudioClip, cfg: FeatureConfig = FeatureConfig()) -> MelFeatures:
    """Full pipeline: resample -> STFT power -> mel -> natural log."""
    clip = resample(clip, cfg.sample_rate)
    spec = stft_magnitude(clip, cfg.frame_len_s, cfg.frame_hop_s, cfg.window, cfg.n_fft)
    fb = _cached_filterbank(cfg)
    return log_mel(spec, fb, cfg.log_floor, cfg.frame_hop_s)


_FB_CACHE: dict[tuple, MelFilterbank] = {}


def _cached_filterbank(cfg: FeatureConfig) -> MelFilterbank:
    key = (cfg.n_mels, cfg.n_fft, cfg.sample_rate, cfg.f_min, cfg.f_max)
    if key not in _FB_CACHE:
        _FB_CACHE[key] = mel_filterbank(*key)
    return _FB_CACHE[key]


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------

def read_wav(path: str | Path) -> AudioClip:
    """Read a WAV file (PCM 16-bit or IEEE float); keep the first channel."""
    rate, data = wavfile.read(str(path))
    if data.ndim > 1:
        data = data[:, 0]
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise InvalidConfigError(f"unsupported WAV sample format {data.dtype}")
    return AudioClip(samples, int(rate))


def write_wav(path: str | Path, clip: AudioClip) -> None:
    """Write a clip as a mono IEEE float32 WAV."""
    wavfile.write(str(path), clip.sample_rate, clip.samples.astype(np.float32))


# ---------------------------------------------------------------------------
# Feature dumps: "FSED" | version u32 | F u32 | T u32 | hop_us u64 | f32 data
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sIIIQ")


def save_features(feats: MelFeatures, path: str | Path) -> None:
    """Serialize features to the flat little-endian binary dump format."""
    hop_us = int(round(feats.frame_hop_s * 1e6))
    header = _HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, feats.n_mels, feats.n_frames, hop_us)
    data = np.ascontiguousarray(feats.values, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data.tobytes())


def load_features(path: str | Path) -> MelFeatures:
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
        if len(raw) < _HEADER.size:
            raise ShapeMismatchError(f"{path}: truncated feature dump header")
        magic, version, n_mels, n_frames, hop_us = _HEADER.unpack(raw)
        if magic != FEATURE_MAGIC:
            raise ShapeMismatchError(f"{path}: bad magic {magic!r}")
        if version != FEATURE_VERSION:
            raise ShapeMismatchError(f"{path}: unsupported version {version}")
        body = fh.read(4 * n_mels * n_frames)
        if len(body) < 4 * n_mels * n_frames:
            raise ShapeMismatchError(f"{path}: truncated feature data")
    values = np.frombuffer(body, dtype="<f4").reshape(n_mels, n_frames)
    return MelFeatures(values=values.copy(), frame_hop_s=hop_us / 1e6)
