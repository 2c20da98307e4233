"""Audio ingestion and MFCC feature extraction at a 20 ms frame rate.

The feature pipeline is deliberately plain and deterministic: Hamming window,
power spectrum, triangular mel filterbank, floored log, orthonormal DCT-II,
and +/-2-frame regression deltas. No pre-emphasis, no dithering.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.fft import dct

REQUIRED_SAMPLE_RATE = 16000

FEATURE_MAGIC = b"FEA1"


class WavFormatError(ValueError):
    """Raised for WAV files outside the supported subset (PCM16 / IEEE float, mono, 16 kHz)."""


@dataclass
class AudioBuffer:
    """Mono audio, samples in [-1, 1], fixed 16 kHz sample rate."""

    samples: np.ndarray
    sample_rate: int = REQUIRED_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError(f"samples must be mono 1-D, got shape {self.samples.shape}")
        if self.samples.size == 0:
            raise ValueError("samples must be non-empty")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("samples contain non-finite values")
        if self.sample_rate != REQUIRED_SAMPLE_RATE:
            raise ValueError(f"sample_rate={self.sample_rate} unsupported, expected {REQUIRED_SAMPLE_RATE}")
        peak = float(np.max(np.abs(self.samples)))
        if peak > 1.0 + 1e-9:
            raise ValueError(f"sample amplitude {peak:.6g} outside [-1, 1]")

    def __len__(self):
        return self.samples.size


@dataclass
class MfccConfig:
    window_ms: float = 25.0
    hop_ms: float = 20.0
    mel_bands: int = 26
    cepstral_coeffs: int = 13
    include_deltas: bool = True
    log_floor: float = 1e-10

    def __post_init__(self):
        if self.hop_ms > self.window_ms:
            raise ValueError(f"hop_ms={self.hop_ms} must be <= window_ms={self.window_ms}")
        if self.cepstral_coeffs > self.mel_bands:
            raise ValueError(
                f"cepstral_coeffs={self.cepstral_coeffs} must be <= mel_bands={self.mel_bands}"
            )
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")

    def window_samples(self, sample_rate: int = REQUIRED_SAMPLE_RATE) -> int:
        return int(round(self.window_ms * sample_rate / 1000.0))

    def hop_samples(self, sample_rate: int = REQUIRED_SAMPLE_RATE) -> int:
        return int(round(self.hop_ms * sample_rate / 1000.0))

    @property
    def feature_dim(self) -> int:
        return self.cepstral_coeffs * (3 if self.include_deltas else 1)


@dataclass
class FeatureMatrix:
    """Per-utterance feature frames, shape (T, D)."""

    utt_id: str
    frames: np.ndarray

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise ValueError(f"frames must be 2-D, got shape {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("frames contain non-finite values")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


def frame_count(num_samples: int, window: int, hop: int) -> int:
    """Number of full analysis windows: floor((N - window)/hop) + 1, no padding."""
    if num_samples < window:
        raise ValueError(f"audio of {num_samples} samples is shorter than one window ({window})")
    return (num_samples - window) // hop + 1


# ---------------------------------------------------------------------------
# WAV reading / writing (RIFF subset: PCM16 and IEEE float, mono, 16 kHz)
# ---------------------------------------------------------------------------

_WAVE_FORMAT_PCM = 1
_WAVE_FORMAT_IEEE_FLOAT = 3


def read_wav(path) -> AudioBuffer:
    """Read a mono 16 kHz PCM16 or IEEE-float WAV file.

    PCM16 samples are scaled by 1/32768 so the full positive scale maps to
    32767/32768. Anything outside the supported subset is rejected with a
    message naming the offending header field.
    """
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    data = None
    offset = 12
    while offset + 8 <= len(raw):
        chunk_id = raw[offset : offset + 4]
        (chunk_size,) = struct.unpack_from("<I", raw, offset + 4)
        body = raw[offset + 8 : offset + 8 + chunk_size]
        if len(body) < chunk_size:
            raise WavFormatError(f"{path}: truncated {chunk_id!r} chunk")
        if chunk_id == b"fmt ":
            if chunk_size < 16:
                raise WavFormatError(f"{path}: fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif chunk_id == b"data":
            data = body
        offset += 8 + chunk_size + (chunk_size & 1)  # chunks are word-aligned

    if fmt is None:
        raise WavFormatError(f"{path}: missing fmt chunk")
    if data is None:
        raise WavFormatError(f"{path}: missing data chunk")
    audio_format, channels, sample_rate, _byte_rate, _block_align, bits = fmt

    if channels != 1:
        raise WavFormatError(f"{path}: channels={channels} unsupported")
    if sample_rate != REQUIRED_SAMPLE_RATE:
        raise WavFormatError(f"{path}: sample_rate={sample_rate} unsupported")

    if audio_format == _WAVE_FORMAT_PCM:
        if bits != 16:
            raise WavFormatError(f"{path}: bits_per_sample={bits} unsupported for PCM")
        samples = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0
    elif audio_format == _WAVE_FORMAT_IEEE_FLOAT:
        if bits == 32:
            samples = np.frombuffer(data, dtype="<f4").astype(np.float64)
        elif bits == 64:
            samples = np.frombuffer(data, dtype="<f8").astype(np.float64)
        else:
            raise WavFormatError(f"{path}: bits_per_sample={bits} unsupported for float")
    else:
        raise WavFormatError(f"{path}: audio_format={audio_format} unsupported")

    try:
        return AudioBuffer(samples, sample_rate)
    except ValueError as e:
        raise WavFormatError(f"{path}: {e}") from e


def write_wav_pcm16(path, samples: np.ndarray, sample_rate: int = REQUIRED_SAMPLE_RATE) -> None:
    """Write mono float samples in [-1, 1] as a PCM16 WAV file."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 1:
        raise ValueError("samples must be 1-D")
    if np.max(np.abs(samples), initial=0.0) > 1.0:
        raise ValueError("samples exceed [-1, 1]")
    pcm = np.round(samples * 32767.0).astype("<i2")
    data = pcm.tobytes()
    with open(path, "wb") as f:
        f.write(b"RIFF")
        f.write(struct.pack("<I", 36 + len(data)))
        f.write(b"WAVE")
        f.write(b"fmt ")
        f.write(struct.pack("<IHHIIHH", 16, _WAVE_FORMAT_PCM, 1, sample_rate,
                            sample_rate * 2, 2, 16))
        f.write(b"data")
        f.write(struct.pack("<I", len(data)))
        f.write(data)


# ---------------------------------------------------------------------------
# MFCC pipeline
# ---------------------------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_bands: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular mel filters evaluated at rfft bin frequencies, shape (n_bands, n_fft//2+1)."""
    nyquist = sample_rate / 2.0
    mel_points = np.linspace(hz_to_mel(0.0), hz_to_mel(nyquist), n_bands + 2)
    hz_points = mel_to_hz(mel_points)
    bin_freqs = np.arange(n_fft // 2 + 1) * (sample_rate / n_fft)
    fb = np.zeros((n_bands, n_fft // 2 + 1))
    for j in range(n_bands):
        left, center, right = hz_points[j], hz_points[j + 1], hz_points[j + 2]
        up = (bin_freqs - left) / (center - left)
        down = (right - bin_freqs) / (right - center)
        fb[j] = np.maximum(0.0, np.minimum(up, down))
    return fb


def filter_band_edges(n_bands: int, sample_rate: int) -> list[tuple[float, float]]:
    """(left, right) support in Hz of each triangular filter."""
    nyquist = sample_rate / 2.0
    hz_points = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(nyquist), n_bands + 2))
    return [(float(hz_points[j]), float(hz_points[j + 2])) for j in range(n_bands)]


def _frame_signal(samples: np.ndarray, window: int, hop: int) -> np.ndarray:
    n_frames = frame_count(samples.size, window, hop)
    idx = np.arange(window)[None, :] + hop * np.arange(n_frames)[:, None]
    return samples[idx]


def log_mel_energies(audio: AudioBuffer, config: MfccConfig | None = None) -> np.ndarray:
    """Floored log mel-filterbank energies, shape (T, mel_bands)."""
    config = config or MfccConfig()
    window = config.window_samples(audio.sample_rate)
    hop = config.hop_samples(audio.sample_rate)
    frames = _frame_signal(audio.samples, window, hop)
    frames = frames * np.hamming(window)
    n_fft = 1
    while n_fft < window:
        n_fft *= 2
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    fb = mel_filterbank(config.mel_bands, n_fft, audio.sample_rate)
    energies = power @ fb.T
    return np.log(np.maximum(energies, config.log_floor))


def append_deltas(static: np.ndarray, span: int = 2) -> np.ndarray:
    """Append delta and delta-delta columns (regression over +/-span frames, edges replicated)."""
    d1 = _delta(static, span)
    d2 = _delta(d1, span)
    return np.concatenate([static, d1, d2], axis=1)


def _delta(x: np.ndarray, span: int) -> np.ndarray:
    denom = 2.0 * sum(n * n for n in range(1, span + 1))
    padded = np.concatenate([np.repeat(x[:1], span, axis=0), x, np.repeat(x[-1:], span, axis=0)])
    t = np.arange(x.shape[0]) + span
    out = np.zeros_like(x)
    for n in range(1, span + 1):
        out += n * (padded[t + n] - padded[t - n])
    return out / denom


def compute_mfcc(audio: AudioBuffer, config: MfccConfig | None = None,
                 utt_id: str = "") -> FeatureMatrix:
    """MFCC features: T x D with D = cepstral_coeffs * (3 if deltas else 1)."""
    config = config or MfccConfig()
    logmel = log_mel_energies(audio, config)
    ceps = dct(logmel, type=2, norm="ortho", axis=1)[:, : config.cepstral_coeffs]
    feats = append_deltas(ceps) if config.include_deltas else ceps
    return FeatureMatrix(utt_id, feats)


# ---------------------------------------------------------------------------
# Feature file format: magic, T, D (uint32 LE), then T*D float32 row-major
# ---------------------------------------------------------------------------

def save_features(path, features: FeatureMatrix) -> None:
    frames = features.frames.astype("<f4")
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<II", frames.shape[0], frames.shape[1]))
        f.write(np.ascontiguousarray(frames).tobytes())


def load_features(path, utt_id: str = "") -> FeatureMatrix:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12 or raw[:4] != FEATURE_MAGIC:
        raise ValueError(f"{path}: not a feature file (bad magic)")
    t, d = struct.unpack_from("<II", raw, 4)
    expected = 12 + 4 * t * d
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for {t}x{d} frames, got {len(raw)}")
    frames = np.frombuffer(raw, dtype="<f4", offset=12).reshape(t, d)
    return FeatureMatrix(utt_id, frames.astype(np.float64))
