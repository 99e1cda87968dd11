"""Deterministic synthetic paired audio-visual corpus, plus the four-category
noise corpus with Table-1-style duration proportions.

A hidden per-frame symbol process drives both modalities: audio renders each
symbol as a speaker-timbred harmonic tone bank, video as a symbol embedding
plus a per-speaker offset. The visual stream therefore identifies the content
and is never corrupted by acoustic noise.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .signal import (
    SAMPLE_RATE_HZ,
    NoiseEntry,
    NoiseManifest,
    Waveform,
    quantize_pcm16,
    rms_power,
    synth_babble,
    write_wav,
)
from .util import AvlabError, config_hash, rng_for

VIDEO_RATE_HZ = 25
SAMPLES_PER_FRAME = SAMPLE_RATE_HZ // VIDEO_RATE_HZ  # 640
VIDEO_DIM = 8

# fixed symbol -> word table; consonant-vowel syllables, stable across corpora
_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"
WORDS = [c + v for c in _CONSONANTS for v in _VOWELS]
ALPHABET = sorted(set(_CONSONANTS + _VOWELS)) + [" "]


class InsufficientSpeakers(AvlabError):
    """Speaker-disjoint partitions cannot be formed."""


@dataclass(frozen=True)
class SymbolProcess:
    """Markov symbol process plus the per-symbol rendering tables."""

    n_symbols: int
    transition: np.ndarray  # [n, n] row-stochastic
    min_dur: int  # video frames
    max_dur: int
    fundamentals_hz: np.ndarray  # [n]
    video_embeddings: np.ndarray  # [n, VIDEO_DIM]

    def __post_init__(self):
        t = np.asarray(self.transition, dtype=np.float64)
        if t.shape != (self.n_symbols, self.n_symbols):
            raise AvlabError("transition matrix shape mismatch")
        if not np.allclose(t.sum(axis=1), 1.0, atol=1e-9):
            raise AvlabError("transition rows must sum to 1")
        if self.min_dur < 1 or self.max_dur < self.min_dur:
            raise AvlabError("bad symbol duration bounds")
        if self.n_symbols > len(WORDS):
            raise AvlabError(f"at most {len(WORDS)} symbols supported")

    @classmethod
    def default(cls, n_symbols: int = 12, seed: int = 0, min_dur: int = 2, max_dur: int = 6) -> "SymbolProcess":
        rng = rng_for("symbol_process", seed)
        # uniform over the other symbols: no immediate repeats, so word runs
        # in the transcript correspond one-to-one with segments
        t = np.full((n_symbols, n_symbols), 1.0 / (n_symbols - 1))
        np.fill_diagonal(t, 0.0)
        fundamentals = 150.0 * (900.0 / 150.0) ** (np.arange(n_symbols) / max(1, n_symbols - 1))
        embeddings = rng.normal(0.0, 1.0, size=(n_symbols, VIDEO_DIM))
        return cls(n_symbols, t, min_dur, max_dur, fundamentals, embeddings)

    def word(self, symbol: int) -> str:
        return WORDS[symbol]


@dataclass(frozen=True)
class AVUtterance:
    id: str
    speaker: str
    audio: Waveform
    video: np.ndarray  # [T_v, VIDEO_DIM] at 25 Hz
    transcript: str
    symbols: np.ndarray  # hidden ground truth, one symbol id per video frame

    def __post_init__(self):
        if self.video.shape != (self.symbols.size, VIDEO_DIM):
            raise AvlabError("video/symbol length mismatch")
        if len(self.audio) != self.symbols.size * SAMPLES_PER_FRAME:
            raise AvlabError("audio length must be 640 samples per video frame")


N_HARMONICS = 5
TONE_POWER = 0.01  # mean-square power of the rendered tone bank
FLOOR_DB = -30.0  # Gaussian floor relative to the tone power
VIDEO_JITTER = 0.05
SPEAKER_VIDEO_OFFSET = 0.3


def _speaker_voice(speaker: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rng = rng_for("speaker_voice", speaker)
    timbre = rng.uniform(0.3, 1.0, size=N_HARMONICS)
    timbre /= timbre.sum()
    phases = rng.uniform(0.0, 2.0 * np.pi, size=N_HARMONICS)
    video_offset = rng.normal(0.0, SPEAKER_VIDEO_OFFSET, size=VIDEO_DIM)
    return timbre, phases, video_offset


def _sample_segments(proc: SymbolProcess, t_frames: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    """(symbol, n_frames) segments covering exactly t_frames."""
    segments: list[tuple[int, int]] = []
    filled = 0
    symbol = int(rng.integers(proc.n_symbols))
    while filled < t_frames:
        dur = int(rng.integers(proc.min_dur, proc.max_dur + 1))
        dur = min(dur, t_frames - filled)
        segments.append((symbol, dur))
        filled += dur
        symbol = int(rng.choice(proc.n_symbols, p=proc.transition[symbol]))
    return segments


def gen_utterance(
    proc: SymbolProcess, speaker: str, len_s: float, seed: int, utt_id: Optional[str] = None
) -> AVUtterance:
    """Render one synthetic utterance; bit-for-bit deterministic in (args, seed).

    Utterance length is quantized to whole video frames so the 25 Hz streams and
    4x-stacked 100 Hz audio features line up exactly.
    """
    t_frames = max(2, int(round(len_s * VIDEO_RATE_HZ)))
    rng = rng_for("utterance", seed)
    segments = _sample_segments(proc, t_frames, rng)
    symbols = np.concatenate([np.full(d, s, dtype=np.int64) for s, d in segments])

    timbre, phases, video_offset = _speaker_voice(speaker)
    n_samples = t_frames * SAMPLES_PER_FRAME
    audio = np.zeros(n_samples)
    t_axis = np.arange(n_samples) / SAMPLE_RATE_HZ
    start = 0
    for sym, dur in segments:
        n0, n1 = start * SAMPLES_PER_FRAME, (start + dur) * SAMPLES_PER_FRAME
        f0 = proc.fundamentals_hz[sym]
        seg_t = t_axis[n0:n1]
        tone = np.zeros(n1 - n0)
        for h in range(1, N_HARMONICS + 1):
            tone += timbre[h - 1] * np.sin(2.0 * np.pi * f0 * h * seg_t + phases[h - 1])
        audio[n0:n1] = tone
        start += dur

    power = float(np.mean(np.square(audio)))
    if power > 0.0:
        audio *= np.sqrt(TONE_POWER / power)
    floor_std = np.sqrt(TONE_POWER * 10.0 ** (FLOOR_DB / 10.0))
    audio += rng.normal(0.0, floor_std, size=n_samples)
    audio = quantize_pcm16(audio)

    video = (
        proc.video_embeddings[symbols]
        + video_offset
        + rng.normal(0.0, VIDEO_JITTER, size=(t_frames, VIDEO_DIM))
    )
    transcript = " ".join(proc.word(s) for s, _ in segments)
    return AVUtterance(
        id=utt_id or f"{speaker}-{seed:08x}",
        speaker=speaker,
        audio=Waveform(audio),
        video=video,
        transcript=transcript,
        symbols=symbols,
    )


# ---------------------------------------------------------------------------
# Corpus generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CorpusSpec:
    n_speakers: int = 40
    utterances_per_speaker: int = 36
    len_bounds_s: tuple[float, float] = (2.0, 8.0)
    # speaker fractions: pretrain-only (unlabeled), labeled, validation, test
    partition_fractions: tuple[float, float, float, float] = (0.725, 0.125, 0.075, 0.075)
    seed: int = 0
    label_fraction_low: float = 0.069  # ~ 30h / 433h
    label_fraction_mid: float = 1.0
    n_symbols: int = 12

    def __post_init__(self):
        if not (0.0 < self.label_fraction_low <= 1.0 and 0.0 < self.label_fraction_mid <= 1.0):
            raise AvlabError("label fractions must be in (0, 1]")
        if self.len_bounds_s[0] > self.len_bounds_s[1] or self.len_bounds_s[0] <= 0:
            raise AvlabError("bad utterance length bounds")

    def to_dict(self) -> dict:
        return {
            "n_speakers": self.n_speakers,
            "utterances_per_speaker": self.utterances_per_speaker,
            "len_bounds_s": list(self.len_bounds_s),
            "partition_fractions": list(self.partition_fractions),
            "seed": self.seed,
            "label_fraction_low": self.label_fraction_low,
            "label_fraction_mid": self.label_fraction_mid,
            "n_symbols": self.n_symbols,
        }


@dataclass(frozen=True)
class UtteranceEntry:
    id: str
    speaker: str
    wav_path: str
    video_path: str
    transcript: str


MANIFEST_NAMES = ("pretrain", "finetune_mid", "finetune_low", "validation", "test")


def _write_manifest(path: Path, rows: Sequence[UtteranceEntry]) -> None:
    lines = [f"{r.id}\t{r.speaker}\t{r.wav_path}\t{r.video_path}\t{r.transcript}" for r in rows]
    path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def read_manifest(path: Path | str) -> list[UtteranceEntry]:
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        utt_id, speaker, wav, video, transcript = line.split("\t")
        rows.append(UtteranceEntry(utt_id, speaker, wav, video, transcript))
    return rows


def write_video_features(path: Path | str, video: np.ndarray) -> None:
    """Plain AVF1 container: magic, u32 rows, u32 cols, f32 LE row-major."""
    t, d = video.shape
    Path(path).write_bytes(b"AVF1" + struct.pack("<II", t, d) + video.astype("<f4").tobytes())


def read_video_features(path: Path | str) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:4] != b"AVF1":
        raise AvlabError(f"{path}: bad magic")
    t, d = struct.unpack("<II", blob[4:12])
    return np.frombuffer(blob[12:], dtype="<f4").reshape(t, d).astype(np.float64)


class AVCorpus:
    """Read access to a generated corpus directory."""

    def __init__(self, root: Path | str):
        self.root = Path(root)
        self.manifests = {name: read_manifest(self.root / f"{name}.tsv") for name in MANIFEST_NAMES}
        self._symbols: Optional[dict[str, np.ndarray]] = None
        self.meta = json.loads((self.root / "corpus_meta.json").read_text(encoding="utf-8"))

    def symbols(self, utt_id: str) -> np.ndarray:
        if self._symbols is None:
            table = {}
            for line in (self.root / "symbols.tsv").read_text(encoding="utf-8").splitlines():
                key, values = line.split("\t")
                table[key] = np.array([int(v) for v in values.split()], dtype=np.int64)
            self._symbols = table
        return self._symbols[utt_id]

    def load_audio(self, entry: UtteranceEntry) -> Waveform:
        from .signal import read_wav

        return read_wav(self.root / entry.wav_path)

    def load_video(self, entry: UtteranceEntry) -> np.ndarray:
        return read_video_features(self.root / entry.video_path)


def _partition_counts(spec: CorpusSpec) -> tuple[int, int, int, int]:
    n = spec.n_speakers
    labeled = max(1, round(spec.partition_fractions[1] * n))
    validation = max(1, round(spec.partition_fractions[2] * n))
    test = max(1, round(spec.partition_fractions[3] * n))
    unlabeled = n - labeled - validation - test
    if unlabeled < 1:
        raise InsufficientSpeakers(
            f"{n} speakers cannot form disjoint unlabeled/labeled/validation/test groups"
        )
    return unlabeled, labeled, validation, test


def gen_corpus(spec: CorpusSpec, out_dir: Path | str) -> dict[str, Path]:
    """Generate the corpus on disk and return manifest paths.

    Speaker groups are disjoint; the pretrain manifest is a superset of
    finetune-mid (labeled speakers pretrain too) plus the unlabeled speakers,
    who never appear in finetune/validation/test.
    """
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    (out / "video").mkdir(parents=True, exist_ok=True)

    proc = SymbolProcess.default(spec.n_symbols, seed=spec.seed)
    speakers = [f"spk{i:03d}" for i in range(spec.n_speakers)]
    order = rng_for("speaker_partition", spec.seed).permutation(spec.n_speakers)
    shuffled = [speakers[i] for i in order]
    n_unlab, n_lab, n_val, n_test = _partition_counts(spec)
    groups = {
        "unlabeled": shuffled[:n_unlab],
        "labeled": shuffled[n_unlab : n_unlab + n_lab],
        "validation": shuffled[n_unlab + n_lab : n_unlab + n_lab + n_val],
        "test": shuffled[n_unlab + n_lab + n_val :],
    }

    entries: dict[str, list[UtteranceEntry]] = {g: [] for g in groups}
    frames: dict[str, int] = {}
    symbol_lines = []
    lo, hi = spec.len_bounds_s
    for group, members in groups.items():
        for speaker in sorted(members):
            for j in range(spec.utterances_per_speaker):
                len_s = float(rng_for("utt_len", spec.seed, speaker, j).uniform(lo, hi))
                utt_seed = int(rng_for("utt_seed", spec.seed, speaker, j).integers(2**63))
                utt = gen_utterance(proc, speaker, len_s, utt_seed, utt_id=f"{speaker}-u{j:03d}")
                wav_rel = f"wav/{utt.id}.wav"
                video_rel = f"video/{utt.id}.avf"
                write_wav(out / wav_rel, utt.audio)
                write_video_features(out / video_rel, utt.video)
                entries[group].append(
                    UtteranceEntry(utt.id, speaker, wav_rel, video_rel, utt.transcript)
                )
                frames[utt.id] = utt.symbols.size
                symbol_lines.append(f"{utt.id}\t{' '.join(str(s) for s in utt.symbols)}")

    finetune_mid = entries["labeled"]
    total_mid = sum(frames[e.id] for e in finetune_mid)
    target = spec.label_fraction_low * total_mid
    picked: list[UtteranceEntry] = []
    acc = 0
    order = rng_for("low_subset", spec.seed).permutation(len(finetune_mid))
    for idx in order:
        entry = finetune_mid[idx]
        dur = frames[entry.id]
        if acc >= target:
            break
        # stop early if overshooting hurts more than stopping short
        if acc > 0 and abs(acc + dur - target) > abs(acc - target):
            break
        picked.append(entry)
        acc += dur
    if not picked:
        picked = [finetune_mid[order[0]]]
    picked.sort(key=lambda e: e.id)

    manifests = {
        "pretrain": sorted(entries["unlabeled"] + entries["labeled"], key=lambda e: e.id),
        "finetune_mid": finetune_mid,
        "finetune_low": picked,
        "validation": entries["validation"],
        "test": entries["test"],
    }
    paths = {}
    for name, rows in manifests.items():
        path = out / f"{name}.tsv"
        _write_manifest(path, rows)
        paths[name] = path
    (out / "symbols.tsv").write_text("\n".join(sorted(symbol_lines)) + "\n", encoding="utf-8")
    meta = {"spec": spec.to_dict(), "corpus_hash": config_hash(spec.to_dict())}
    (out / "corpus_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return paths


# ---------------------------------------------------------------------------
# Noise corpus
# ---------------------------------------------------------------------------

# Table-style duration weights per category: train 6:35:20:50, val/test 1:4:2:6
TRAIN_WEIGHTS = {"natural": 6.0, "music": 35.0, "babble": 20.0, "speech": 50.0}
EVAL_WEIGHTS = {"natural": 1.0, "music": 4.0, "babble": 2.0, "speech": 6.0}


@dataclass(frozen=True)
class NoiseCorpusSpec:
    total_train_s: float = 333.0
    total_eval_s: float = 39.0  # per eval partition, proportional to the train total
    clip_len_bounds_s: tuple[float, float] = (3.0, 8.0)
    seed: int = 0
    n_symbols: int = 12

    def to_dict(self) -> dict:
        return {
            "total_train_s": self.total_train_s,
            "total_eval_s": self.total_eval_s,
            "clip_len_bounds_s": list(self.clip_len_bounds_s),
            "seed": self.seed,
            "n_symbols": self.n_symbols,
        }


NOISE_POWER = 0.02

# disjoint synthetic-speech source pools per partition; emulates the paper's
# train-vs-test babble domain mismatch with two unrelated pools
_POOLS = {"train": "poolA", "validation": "poolB", "test": "poolC"}
_POOL_SPEAKERS = {"poolA": 16, "poolB": 8, "poolC": 8}


def _pool_speaker(pool: str, i: int) -> str:
    return f"nspk-{pool}-{i:02d}"


def _gen_natural(length: int, rng: np.random.Generator) -> np.ndarray:
    from scipy.signal import lfilter

    white = rng.normal(0.0, 1.0, size=length)
    a = rng.uniform(0.8, 0.99)
    return lfilter([1.0 - a], [1.0, -a], white)  # one-pole lowpass


def _gen_music(length: int, rng: np.random.Generator) -> np.ndarray:
    out = np.zeros(length)
    pos = 0
    t_axis = np.arange(length) / SAMPLE_RATE_HZ
    while pos < length:
        dur = int(rng.uniform(0.5, 1.0) * SAMPLE_RATE_HZ)
        end = min(length, pos + dur)
        root = rng.uniform(130.0, 520.0)
        for ratio in (1.0, 1.25, 1.5):  # major triad
            for h in (1, 2, 3):
                out[pos:end] += (1.0 / h) * np.sin(2.0 * np.pi * root * ratio * h * t_axis[pos:end])
        pos = end
    return out


def _finish_clip(samples: np.ndarray) -> Waveform:
    w = Waveform(samples)
    power = rms_power(w)
    if power > 0.0:
        samples = samples * np.sqrt(NOISE_POWER / power)
    return Waveform(quantize_pcm16(samples))


def _speech_clip(proc: SymbolProcess, pool: str, seed: int, len_s: float, idx_in_pool: int) -> Waveform:
    speaker = _pool_speaker(pool, idx_in_pool % _POOL_SPEAKERS[pool])
    utt = gen_utterance(proc, speaker, len_s, seed)
    return _finish_clip(utt.audio.samples.copy())


def gen_noise_corpus(nspec: NoiseCorpusSpec, out_dir: Path | str) -> Path:
    """Generate the noise corpus and manifest; returns the manifest path.

    Train durations follow the 6:35:20:50 natural/music/babble/speech ratio;
    validation and test follow 1:4:2:6. Babble and speech sources come from
    per-partition speaker pools that never overlap each other or the AV corpus.
    """
    out = Path(out_dir)
    (out / "noise").mkdir(parents=True, exist_ok=True)
    proc = SymbolProcess.default(nspec.n_symbols, seed=nspec.seed)
    entries: list[NoiseEntry] = []

    plans = [("train", nspec.total_train_s, TRAIN_WEIGHTS), ("validation", nspec.total_eval_s, EVAL_WEIGHTS), ("test", nspec.total_eval_s, EVAL_WEIGHTS)]
    lo, hi = nspec.clip_len_bounds_s
    for partition, total_s, weights in plans:
        pool = _POOLS[partition]
        weight_sum = sum(weights.values())
        for category in ("natural", "music", "babble", "speech"):
            budget = total_s * weights[category] / weight_sum
            rng = rng_for("noise_plan", nspec.seed, partition, category)
            idx = 0
            remaining = budget
            while remaining > 1e-9:
                len_s = float(min(rng.uniform(lo, hi), remaining))
                if remaining - len_s < 1.0:  # avoid sub-second tail clips
                    len_s = remaining
                length = int(round(len_s * SAMPLE_RATE_HZ))
                clip_seed = int(rng.integers(2**63))
                if category == "natural":
                    clip = _finish_clip(_gen_natural(length, rng_for("natural", clip_seed)))
                    family = "synth"
                elif category == "music":
                    clip = _finish_clip(_gen_music(length, rng_for("music", clip_seed)))
                    family = "synth"
                elif category == "speech":
                    clip = _speech_clip(proc, pool, clip_seed, len_s, idx)
                    family = pool
                else:  # babble: 30 fresh pool utterances summed
                    sources = []
                    for k in range(30):
                        speaker = _pool_speaker(pool, (idx * 30 + k) % _POOL_SPEAKERS[pool])
                        src_seed = int(rng_for("babble_src", clip_seed, k).integers(2**63))
                        sources.append(gen_utterance(proc, speaker, min(4.0, len_s), src_seed).audio)
                    mixed = synth_babble(sources, length, clip_seed)
                    clip = _finish_clip(mixed.waveform.samples.copy())
                    family = pool
                clip_id = f"{category}-{family}-{partition[0]}{idx:03d}"
                rel = f"noise/{clip_id}.wav"
                write_wav(out / rel, clip)
                entries.append(NoiseEntry(clip_id, rel, category, partition, clip.duration_s))
                remaining -= len_s
                idx += 1

    manifest = NoiseManifest(entries, base_dir=out)
    manifest_path = out / "noise_manifest.tsv"
    manifest.save(manifest_path)
    meta = {"spec": nspec.to_dict(), "noise_hash": config_hash(nspec.to_dict())}
    (out / "noise_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest_path
