"""Deterministic synthetic speech-like corpus with exact phone alignments.

Each pseudo-phone is a fixed mixture of two or three sinusoids plus a little
band-limited noise; per-occurrence phase, amplitude jitter, and noise keep
occurrences from being bit-identical, which is what gives downstream codes
realistic within-phone variation. Golden boundaries are exact by
construction, and every utterance gets a one-character-per-phone transcript
for CTC fine-tuning.
"""

from __future__ import annotations

import string
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .evaluation import AlignmentTier, save_alignments
from .features import REQUIRED_SAMPLE_RATE, write_wav_pcm16


@dataclass
class SynthConfig:
    n_phones: int = 12
    min_duration_frames: int = 4
    max_duration_frames: int = 12
    min_phones: int = 8
    max_phones: int = 20
    n_utterances: int = 200
    noise_level: float = 0.08
    sample_rate: int = REQUIRED_SAMPLE_RATE
    hop_samples: int = 320   # one 20 ms frame
    tail_samples: int = 80   # window minus hop, so frame count equals label count

    def __post_init__(self):
        if not (1 <= self.n_phones <= 26):
            raise ValueError("n_phones must be in [1, 26] (one letter per phone)")
        if not (1 <= self.min_duration_frames <= self.max_duration_frames):
            raise ValueError("invalid duration range")
        if not (1 <= self.min_phones <= self.max_phones):
            raise ValueError("invalid utterance length range")
        if self.n_utterances < 1:
            raise ValueError("n_utterances must be >= 1")
        if self.noise_level < 0:
            raise ValueError("noise_level must be >= 0")

    @property
    def alphabet(self) -> str:
        return string.ascii_lowercase[: self.n_phones]


@dataclass
class SynthCorpus:
    out_dir: Path
    manifest_path: Path
    alignment_path: Path
    transcript_path: Path
    wav_dir: Path
    utt_ids: list
    tiers: list
    transcripts: dict


def _phone_inventory(config: SynthConfig, rng: np.random.Generator):
    """Per phone: sinusoid frequencies, their weights, and a noise band in Hz."""
    nyquist = config.sample_rate / 2.0
    base = np.geomspace(280.0, 0.72 * nyquist, config.n_phones)
    inventory = []
    for i in range(config.n_phones):
        n_partials = 2 + int(rng.integers(0, 2))  # 2 or 3 sinusoids
        ratios = np.array([1.0, 1.9, 2.6][:n_partials])
        freqs = np.minimum(base[i] * ratios, 0.95 * nyquist)
        weights = np.array([1.0, 0.55, 0.3][:n_partials])
        band = (0.75 * base[i], min(1.4 * base[i], 0.98 * nyquist))
        inventory.append((freqs, weights, band))
    return inventory


def _band_noise(n: int, band, sample_rate: int, rng: np.random.Generator) -> np.ndarray:
    """White noise restricted to a frequency band via an FFT brick wall."""
    noise = rng.standard_normal(n)
    spec = np.fft.rfft(noise)
    freqs = np.fft.rfftfreq(n, d=1.0 / sample_rate)
    spec[(freqs < band[0]) | (freqs > band[1])] = 0.0
    out = np.fft.irfft(spec, n=n)
    peak = np.max(np.abs(out))
    return out / peak if peak > 0 else out


def _render_phone(phone: int, n_samples: int, inventory, config: SynthConfig,
                  rng: np.random.Generator) -> np.ndarray:
    freqs, weights, band = inventory[phone]
    t = np.arange(n_samples) / config.sample_rate
    amp = 0.8 + 0.2 * rng.random()
    wave = np.zeros(n_samples)
    for f, w in zip(freqs, weights):
        wave += w * np.sin(2.0 * np.pi * f * t + rng.uniform(0.0, 2.0 * np.pi))
    wave *= amp / np.sum(weights)
    if config.noise_level > 0:
        wave += config.noise_level * _band_noise(n_samples, band, config.sample_rate, rng)
    return wave


def synth_utterance(utt_id: str, config: SynthConfig, inventory,
                    rng: np.random.Generator):
    """One utterance: (samples, AlignmentTier, transcript). No immediate phone repeats."""
    n_phones = int(rng.integers(config.min_phones, config.max_phones + 1))
    phones = []
    prev = -1
    for _ in range(n_phones):
        p = int(rng.integers(0, config.n_phones))
        while config.n_phones > 1 and p == prev:
            p = int(rng.integers(0, config.n_phones))
        phones.append(p)
        prev = p
    durations = rng.integers(config.min_duration_frames,
                             config.max_duration_frames + 1, size=n_phones)

    segments = []
    intervals = []
    pos = 0
    for idx, (p, dur) in enumerate(zip(phones, durations)):
        n = int(dur) * config.hop_samples
        if idx == n_phones - 1:
            n += config.tail_samples  # last phone absorbs the analysis-window overhang
        segments.append(_render_phone(p, n, inventory, config, rng))
        intervals.append((config.alphabet[p], pos, pos + int(dur)))
        pos += int(dur)

    samples = np.concatenate(segments)
    peak = np.max(np.abs(samples))
    if peak > 0:
        samples = 0.9 * samples / peak
    transcript = "".join(config.alphabet[p] for p in phones)
    return samples, AlignmentTier(utt_id, intervals), transcript


def synth_corpus(config: SynthConfig, seed: int, out_dir) -> SynthCorpus:
    """Write WAVs, alignments, transcripts, and a manifest; bit-identical per seed."""
    out_dir = Path(out_dir)
    wav_dir = out_dir / "wav"
    wav_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    inventory = _phone_inventory(config, rng)

    utt_ids = []
    tiers = []
    transcripts = {}
    alignment_path = out_dir / "alignments.tsv"
    transcript_path = out_dir / "transcripts.tsv"
    manifest_path = out_dir / "manifest.tsv"
    width = max(4, len(str(config.n_utterances)))
    for i in range(config.n_utterances):
        utt_id = f"synth{i:0{width}d}"
        samples, tier, transcript = synth_utterance(utt_id, config, inventory, rng)
        write_wav_pcm16(wav_dir / f"{utt_id}.wav", samples, config.sample_rate)
        utt_ids.append(utt_id)
        tiers.append(tier)
        transcripts[utt_id] = transcript

    save_alignments(alignment_path, tiers)
    with open(transcript_path, "w", encoding="utf-8") as f:
        for utt_id in utt_ids:
            f.write(f"{utt_id}\t{transcripts[utt_id]}\n")
    with open(manifest_path, "w", encoding="utf-8") as f:
        for utt_id in utt_ids:
            f.write(f"{utt_id}\t{wav_dir / (utt_id + '.wav')}\t"
                    f"{transcripts[utt_id]}\t{alignment_path}\n")

    return SynthCorpus(out_dir, manifest_path, alignment_path, transcript_path,
                       wav_dir, utt_ids, tiers, transcripts)
