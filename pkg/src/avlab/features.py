"""Audio feature extraction: log-mel filterbank energies, MFCCs, frame stacking
down to the 25 Hz video rate, and per-utterance normalization.

Framing is 25 ms Hann / 10 ms hop at 16 kHz (100 Hz frame rate); 26 mel filters
span 0-8 kHz; 13 cepstra are kept. None of these constants are load-bearing for
consumers beyond the stacked dimensionality 13*4 = 52.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.fft import dct

from .signal import Waveform
from .util import AvlabError

FRAME_LEN = 400  # 25 ms at 16 kHz
FRAME_HOP = 160  # 10 ms
N_FFT = 512
N_MELS = 26
N_MFCC = 13
LOG_FLOOR = 1e-10
STACK_FACTOR = 4

KINDS = ("logmel", "mfcc", "stacked_mfcc", "hidden")


class TooShort(AvlabError):
    """Input shorter than one analysis window."""


class KindMismatch(AvlabError):
    """Operation applied to the wrong feature kind."""


@dataclass(frozen=True)
class FeatureSequence:
    data: np.ndarray  # [T, D]
    rate_hz: float
    kind: str

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2 or data.shape[0] < 1:
            raise AvlabError("feature data must be a [T, D] matrix with T >= 1")
        if not np.all(np.isfinite(data)):
            raise AvlabError("feature data contains non-finite values")
        if self.kind not in KINDS:
            raise AvlabError(f"unknown feature kind {self.kind!r}")
        if self.rate_hz not in (100.0, 25.0):
            raise AvlabError(f"unsupported feature rate {self.rate_hz}")
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


def mel_scale(f_hz: np.ndarray) -> np.ndarray:
    return 2595.0 * np.log10(1.0 + np.asarray(f_hz, dtype=np.float64) / 700.0)


def mel_inverse(m: np.ndarray) -> np.ndarray:
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT, sr: int = 16000) -> np.ndarray:
    """Triangular filters [n_mels, n_fft//2 + 1] spanning 0 to sr/2."""
    edges_hz = mel_inverse(np.linspace(mel_scale(0.0), mel_scale(sr / 2.0), n_mels + 2))
    bin_hz = np.arange(n_fft // 2 + 1) * sr / n_fft
    fb = np.zeros((n_mels, bin_hz.size))
    for m in range(n_mels):
        lo, mid, hi = edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]
        up = (bin_hz - lo) / (mid - lo)
        down = (hi - bin_hz) / (hi - mid)
        fb[m] = np.clip(np.minimum(up, down), 0.0, None)
    return fb


_FILTERBANK = mel_filterbank()
_WINDOW = np.hanning(FRAME_LEN)


def logmel(w: Waveform) -> FeatureSequence:
    """Log mel-filterbank energies at 100 Hz from the power spectrum.

    Energies are floored at 1e-10 before the natural log, so doubling the
    amplitude of a non-degenerate signal raises every value by 2*ln(2).
    """
    if w.sample_rate_hz != 16000:
        raise AvlabError("feature extraction expects 16 kHz audio")
    x = w.samples
    if x.size < FRAME_LEN:
        raise TooShort(f"need >= {FRAME_LEN} samples, got {x.size}")
    n_frames = (x.size - FRAME_LEN) // FRAME_HOP + 1
    idx = np.arange(FRAME_LEN)[None, :] + FRAME_HOP * np.arange(n_frames)[:, None]
    frames = x[idx] * _WINDOW
    spectrum = np.abs(np.fft.rfft(frames, n=N_FFT, axis=1)) ** 2
    energies = spectrum @ _FILTERBANK.T
    return FeatureSequence(np.log(np.maximum(energies, LOG_FLOOR)), 100.0, "logmel")


def mfcc(lm: FeatureSequence) -> FeatureSequence:
    """Orthonormal DCT-II along the mel axis, keeping coefficients 0..12."""
    if lm.kind != "logmel":
        raise KindMismatch(f"mfcc expects logmel input, got {lm.kind!r}")
    coeffs = dct(lm.data, type=2, norm="ortho", axis=1)[:, :N_MFCC]
    return FeatureSequence(coeffs, lm.rate_hz, "mfcc")


def stack(f: FeatureSequence, factor: int = STACK_FACTOR) -> FeatureSequence:
    """Concatenate groups of `factor` consecutive 100 Hz frames (zero-pad tail),
    yielding 25 Hz frames of dimension D*factor."""
    if factor == 1:
        return f
    if f.rate_hz != 100.0:
        raise AvlabError("stack expects 100 Hz input")
    if f.kind != "mfcc":
        raise KindMismatch(f"stack expects mfcc input, got {f.kind!r}")
    t, d = f.data.shape
    t_out = -(-t // factor)
    padded = np.zeros((t_out * factor, d))
    padded[:t] = f.data
    data = padded.reshape(t_out, d * factor)
    return FeatureSequence(data, f.rate_hz / factor, "stacked_mfcc")


def normalize(f: FeatureSequence) -> FeatureSequence:
    """Per-dimension zero mean / unit variance over the utterance.

    Columns whose variance falls below 1e-8 come out as all zeros.
    """
    if f.data.shape[0] < 2:
        raise AvlabError("normalize needs at least 2 frames")
    mean = f.data.mean(axis=0)
    var = f.data.var(axis=0)
    scale = np.sqrt(np.maximum(var, 1e-8))
    return FeatureSequence((f.data - mean) / scale, f.rate_hz, f.kind)


_MAGIC = b"AVF1"
_KIND_CODES = {k: i for i, k in enumerate(KINDS)}
_KIND_NAMES = {i: k for k, i in _KIND_CODES.items()}


def write_features(path: Path | str, f: FeatureSequence) -> None:
    """AVF1 container with kind byte and rate field appended to the header."""
    t, d = f.data.shape
    header = _MAGIC + struct.pack("<IIBf", t, d, _KIND_CODES[f.kind], f.rate_hz)
    Path(path).write_bytes(header + f.data.astype("<f4").tobytes())


def read_features(path: Path | str) -> FeatureSequence:
    blob = Path(path).read_bytes()
    if blob[:4] != _MAGIC:
        raise AvlabError(f"{path}: bad magic")
    t, d, kind_code, rate = struct.unpack("<IIBf", blob[4:17])
    data = np.frombuffer(blob[17:], dtype="<f4").reshape(t, d).astype(np.float64)
    return FeatureSequence(data, float(rate), _KIND_NAMES[kind_code])
