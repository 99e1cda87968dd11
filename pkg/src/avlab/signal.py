"""Waveform I/O, power/SNR math, noise length fitting, babble synthesis, and the
training-time noise sampling policy.

SNR is defined on mean-square power of the full overlapping region; the noise
component always spans the whole utterance. Mixing never clips or renormalizes
the sum.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .util import AvlabError, rng_for

SAMPLE_RATE_HZ = 16000
CATEGORIES = ("natural", "music", "babble", "speech")
PARTITIONS = ("train", "validation", "test")
SNR_GRID_DB = (-10.0, -5.0, 0.0, 5.0, 10.0)


class ZeroPowerSignal(AvlabError):
    """Mixing is undefined for an all-zero signal."""


class ZeroPowerNoise(AvlabError):
    """Mixing is undefined for an all-zero noise clip."""


class WrongClipCount(AvlabError):
    """Babble synthesis requires exactly 30 source clips."""


class EmptyCategory(AvlabError):
    """A sampled noise category has no train clips."""


@dataclass(frozen=True)
class Waveform:
    """Mono audio; samples are dimensionless amplitudes, nominally in [-1, 1]."""

    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE_HZ

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size == 0:
            raise AvlabError("waveform must be a non-empty 1-d array")
        if not np.all(np.isfinite(samples)):
            raise AvlabError("waveform contains non-finite samples")
        if self.sample_rate_hz <= 0:
            raise AvlabError(f"bad sample rate {self.sample_rate_hz}")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz


@dataclass(frozen=True)
class NoiseClip:
    waveform: Waveform
    category: str
    id: str
    partition: str = "train"
    # speaker-family id of the source pool, for partition-overlap checks
    family: Optional[str] = None

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise AvlabError(f"unknown noise category {self.category!r}")
        if self.partition not in PARTITIONS:
            raise AvlabError(f"unknown partition {self.partition!r}")


@dataclass(frozen=True)
class NoisePolicy:
    apply_probability: float = 0.25
    snr_db: float = 0.0
    categories: tuple[str, ...] = CATEGORIES
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.apply_probability <= 1.0:
            raise AvlabError("apply_probability must be in [0, 1]")
        if not self.categories:
            raise AvlabError("noise policy needs at least one category")
        for c in self.categories:
            if c not in CATEGORIES:
                raise AvlabError(f"unknown noise category {c!r}")


def rms_power(w: Waveform) -> float:
    """Mean of squared samples. Zero is allowed; consumers must check."""
    return float(np.mean(np.square(w.samples)))


def mixing_gain(signal: Waveform, noise: Waveform, snr_db: float) -> float:
    """Gain g such that 10*log10(P_signal / P(g*noise)) equals snr_db exactly."""
    if len(signal) != len(noise):
        raise AvlabError("mixing_gain requires equal-length signal and noise")
    p_signal = rms_power(signal)
    p_noise = rms_power(noise)
    if p_signal == 0.0:
        raise ZeroPowerSignal("signal has zero power")
    if p_noise == 0.0:
        raise ZeroPowerNoise("noise has zero power")
    return float(np.sqrt(p_signal / (p_noise * 10.0 ** (snr_db / 10.0))))


def fit_noise_length(noise: Waveform, target_len: int, seed: int) -> Waveform:
    """Fit a noise clip to target_len samples.

    Longer clips yield a seeded random contiguous window; shorter ones are tiled
    cyclically from a seeded random start offset and truncated. Sample values
    are only ever copied from the source clip.
    """
    if target_len < 1:
        raise AvlabError("target_len must be >= 1")
    rng = rng_for("fit_noise_length", seed)
    src = noise.samples
    n = src.size
    if n >= target_len:
        start = int(rng.integers(0, n - target_len + 1))
        out = src[start : start + target_len]
    else:
        offset = int(rng.integers(0, n))
        reps = int(np.ceil((offset + target_len) / n))
        out = np.tile(src, reps)[offset : offset + target_len]
    return Waveform(out.copy(), noise.sample_rate_hz)


def mix_at_snr(signal: Waveform, noise: NoiseClip, snr_db: float, seed: int) -> Waveform:
    """signal + g * fitted-noise, elementwise; no clipping or renormalization."""
    if signal.sample_rate_hz != noise.waveform.sample_rate_hz:
        raise AvlabError("sample rate mismatch between signal and noise")
    fitted = fit_noise_length(noise.waveform, len(signal), seed)
    g = mixing_gain(signal, fitted, snr_db)
    return Waveform(signal.samples + g * fitted.samples, signal.sample_rate_hz)


def synth_babble(
    clips: Sequence[Waveform],
    target_len: int,
    seed: int,
    clip_id: str = "babble",
    partition: str = "train",
    family: Optional[str] = None,
) -> NoiseClip:
    """Sum 30 length-fitted clips and rescale the sum to unit mean-square power."""
    if len(clips) != 30:
        raise WrongClipCount(f"babble needs exactly 30 clips, got {len(clips)}")
    sample_rate = clips[0].sample_rate_hz
    total = np.zeros(target_len, dtype=np.float64)
    for i, clip in enumerate(clips):
        if rms_power(clip) == 0.0:
            raise ZeroPowerNoise(f"babble source clip {i} is silent")
        sub_seed = int(rng_for("babble_fit", seed, i).integers(2**63))
        total += fit_noise_length(clip, target_len, sub_seed).samples
    mixture = Waveform(total, sample_rate)
    power = rms_power(mixture)
    if power == 0.0:
        raise ZeroPowerNoise("babble mixture cancelled to silence")
    scaled = Waveform(total / np.sqrt(power), sample_rate)
    return NoiseClip(scaled, "babble", clip_id, partition, family)


@dataclass(frozen=True)
class NoiseEntry:
    """One row of the noise manifest TSV."""

    id: str
    path: str
    category: str
    partition: str
    duration_s: float


class NoiseManifest:
    """Noise clip index with lazy, cached WAV loading."""

    def __init__(self, entries: Sequence[NoiseEntry], base_dir: Path | str = "."):
        self.entries = list(entries)
        self.base_dir = Path(base_dir)
        self._cache: dict[str, NoiseClip] = {}

    def select(self, category: Optional[str] = None, partition: Optional[str] = None) -> list[NoiseEntry]:
        return [
            e
            for e in self.entries
            if (category is None or e.category == category)
            and (partition is None or e.partition == partition)
        ]

    def load(self, entry: NoiseEntry) -> NoiseClip:
        clip = self._cache.get(entry.id)
        if clip is None:
            w = read_wav(self.base_dir / entry.path)
            # id scheme "<category>-<family>-<n>" carries the source pool
            parts = entry.id.split("-")
            family = parts[1] if len(parts) == 3 else None
            clip = NoiseClip(w, entry.category, entry.id, entry.partition, family)
            self._cache[entry.id] = clip
        return clip

    def save(self, path: Path | str) -> None:
        lines = [
            f"{e.id}\t{e.path}\t{e.category}\t{e.partition}\t{e.duration_s:.6f}"
            for e in self.entries
        ]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def open(cls, path: Path | str) -> "NoiseManifest":
        path = Path(path)
        entries = []
        for line in path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            clip_id, rel, category, partition, duration = line.split("\t")
            entries.append(NoiseEntry(clip_id, rel, category, partition, float(duration)))
        return cls(entries, base_dir=path.parent)


def sample_training_noise(
    manifest: NoiseManifest, policy: NoisePolicy, step: int
) -> Optional[tuple[NoiseClip, float]]:
    """With probability apply_probability, pick a category uniformly, then a train
    clip uniformly, and return it with the policy SNR. Otherwise return None.

    Only train-partition clips are ever returned; the decision stream is keyed by
    (policy.seed, step) so it is independent of any other randomness.
    """
    rng = rng_for("noise_policy", policy.seed, step)
    if rng.uniform() >= policy.apply_probability:
        return None
    category = policy.categories[int(rng.integers(len(policy.categories)))]
    candidates = manifest.select(category=category, partition="train")
    if not candidates:
        raise EmptyCategory(f"no train clips for category {category!r}")
    entry = candidates[int(rng.integers(len(candidates)))]
    return manifest.load(entry), policy.snr_db


def quantize_pcm16(samples: np.ndarray) -> np.ndarray:
    """Snap float samples onto the PCM16 grid (value = int / 32768)."""
    ints = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767)
    return ints.astype(np.float64) / 32768.0


def write_wav(path: Path | str, w: Waveform) -> None:
    """RIFF PCM16 little-endian mono."""
    ints = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate_hz)
        f.writeframes(ints.tobytes())


def read_wav(path: Path | str) -> Waveform:
    with wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1 or f.getsampwidth() != 2:
            raise AvlabError(f"{path}: expected mono PCM16")
        rate = f.getframerate()
        raw = f.readframes(f.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, rate)
