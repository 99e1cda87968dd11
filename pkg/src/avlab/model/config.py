"""Architecture configuration, presets, and the character vocabulary."""

from __future__ import annotations

from dataclasses import dataclass, replace

from ..corpus import ALPHABET
from ..util import AvlabError


@dataclass(frozen=True)
class ArchConfig:
    d_model: int
    n_heads: int
    n_enc_layers: int
    n_dec_layers: int
    d_ff: int
    audio_in_dim: int = 52
    video_in_dim: int = 8
    n_clusters: int = 20
    vocab_size: int = 22
    preset: str = "custom"

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise AvlabError("d_model must be divisible by n_heads")
        if self.d_model % 2 != 0:
            raise AvlabError("d_model must be even (two half-width frontends)")

    def to_dict(self) -> dict:
        return {
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "n_enc_layers": self.n_enc_layers,
            "n_dec_layers": self.n_dec_layers,
            "d_ff": self.d_ff,
            "audio_in_dim": self.audio_in_dim,
            "video_in_dim": self.video_in_dim,
            "n_clusters": self.n_clusters,
            "vocab_size": self.vocab_size,
            "preset": self.preset,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        return cls(**{k: (v if k == "preset" else int(v)) for k, v in d.items()})


# Trainable desk-scale presets, plus the published reference shapes, which are
# kept for documentation and are not exercised by any test.
_PRESETS: dict[str, dict] = {
    "toy": dict(d_model=64, n_heads=4, n_enc_layers=3, n_dec_layers=2, d_ff=256),
    "toy-small": dict(d_model=32, n_heads=4, n_enc_layers=2, n_dec_layers=1, d_ff=128),
    "base-reference": dict(d_model=768, n_heads=12, n_enc_layers=12, n_dec_layers=9, d_ff=3072),
    "large-reference": dict(d_model=1024, n_heads=16, n_enc_layers=24, n_dec_layers=9, d_ff=4096),
}


def preset(name: str, n_clusters: int = 20, vocab_size: int | None = None) -> ArchConfig:
    if name not in _PRESETS:
        raise AvlabError(f"unknown preset {name!r}; have {sorted(_PRESETS)}")
    return ArchConfig(
        **_PRESETS[name],
        n_clusters=n_clusters,
        vocab_size=vocab_size if vocab_size is not None else Vocab.default().size,
        preset=name,
    )


class Vocab:
    """Character vocabulary: BOS, EOS, then the fixed transcript alphabet."""

    BOS = 0
    EOS = 1

    def __init__(self, chars: list[str]):
        self.chars = list(chars)
        self._to_id = {c: i + 2 for i, c in enumerate(self.chars)}

    @classmethod
    def default(cls) -> "Vocab":
        return cls(ALPHABET)

    @property
    def size(self) -> int:
        return len(self.chars) + 2

    def encode(self, text: str) -> list[int]:
        try:
            return [self._to_id[c] for c in text]
        except KeyError as exc:
            raise OOVCharacter(f"character {exc.args[0]!r} not in vocabulary") from exc

    def decode(self, ids: list[int]) -> str:
        return "".join(self.chars[i - 2] for i in ids if i >= 2)


class OOVCharacter(AvlabError):
    """Transcript contains a character outside the vocabulary."""
