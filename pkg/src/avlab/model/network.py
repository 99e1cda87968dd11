"""The audio-visual encoder, character seq2seq decoder, masking and modality
dropout mechanics, and exact reverse-mode gradients for all of it.

The two frontends are bias-free linear projections to d_model/2 each, fused by
concatenation, so dropping a modality is exactly equivalent to zeroing its
input features. Masked frames are replaced by a learned embedding after fusion
and before the sinusoidal positions are added.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Optional

import numpy as np

from ..util import AvlabError, rng_for
from .config import ArchConfig, Vocab
from .layers import (
    DecoderBlock,
    EncoderBlock,
    LayerNorm,
    Linear,
    Parameter,
    causal_mask,
    log_softmax,
    padding_mask,
    sinusoid_positions,
    softmax,
)

ModalityMode = Literal["both", "audio_only", "video_only"]
MODALITY_MODES = ("both", "audio_only", "video_only")


class ShapeMismatch(AvlabError):
    """Input shapes disagree with each other or the architecture."""


@dataclass(frozen=True)
class MaskSpec:
    """Masked time steps at 25 Hz, as a boolean vector plus its span list."""

    masked: np.ndarray
    spans: tuple[tuple[int, int], ...]

    def __post_init__(self):
        masked = np.asarray(self.masked, dtype=bool)
        object.__setattr__(self, "masked", masked)
        cover = np.zeros(masked.size, dtype=bool)
        for start, end in self.spans:
            if not (0 <= start < end <= masked.size):
                raise AvlabError(f"span [{start}, {end}) outside [0, {masked.size})")
            cover[start:end] = True
        if not np.array_equal(cover, masked):
            raise AvlabError("span union disagrees with the masked vector")

    @classmethod
    def empty(cls, t: int) -> "MaskSpec":
        return cls(np.zeros(t, dtype=bool), ())

    @classmethod
    def from_spans(cls, t: int, spans: list[tuple[int, int]]) -> "MaskSpec":
        masked = np.zeros(t, dtype=bool)
        for start, end in spans:
            masked[start:end] = True
        merged: list[tuple[int, int]] = []
        i = 0
        while i < t:
            if masked[i]:
                j = i
                while j < t and masked[j]:
                    j += 1
                merged.append((i, j))
                i = j
            else:
                i += 1
        return cls(masked, tuple(merged))


def sample_mask(t: int, start_prob: float = 0.08, span_len: int = 10, seed: int = 0) -> MaskSpec:
    """Each frame independently starts a fixed-length span; overlaps merge."""
    if t < 1:
        raise AvlabError("need t >= 1")
    starts = rng_for("mask", seed).uniform(size=t) < start_prob
    spans = [(int(i), int(min(t, i + span_len))) for i in np.flatnonzero(starts)]
    return MaskSpec.from_spans(t, spans)


@dataclass(frozen=True)
class ModalityDropout:
    p_both: float = 0.5
    p_audio_only: float = 0.25
    p_video_only: float = 0.25

    def __post_init__(self):
        total = self.p_both + self.p_audio_only + self.p_video_only
        if abs(total - 1.0) > 1e-9:
            raise AvlabError("modality probabilities must sum to 1")
        if min(self.p_both, self.p_audio_only, self.p_video_only) < 0:
            raise AvlabError("modality probabilities must be non-negative")

    @classmethod
    def with_p_both(cls, p_both: float) -> "ModalityDropout":
        rest = (1.0 - p_both) / 2.0
        return cls(p_both, rest, rest)


def sample_modality(cfg: ModalityDropout, seed: int = 0) -> ModalityMode:
    u = float(rng_for("modality", seed).uniform())
    if u < cfg.p_both:
        return "both"
    if u < cfg.p_both + cfg.p_audio_only:
        return "audio_only"
    return "video_only"


@dataclass
class EncodeResult:
    hidden: list[np.ndarray]  # per-block outputs, each [T, d_model]
    final: np.ndarray  # final layer norm output [T, d_model]
    logits: np.ndarray  # cluster logits [T, n_clusters]


class AVModel:
    """Encoder + decoder with manually implemented backpropagation.

    A parameter store must not be mutated while a forward/backward pair is in
    flight; batch-parallel use with read-only parameters is fine.
    """

    def __init__(self, cfg: ArchConfig, store: Optional[dict[str, np.ndarray]] = None, seed: int = 0):
        self.cfg = cfg
        rng = rng_for("model_init", seed)
        d, h, dff = cfg.d_model, cfg.n_heads, cfg.d_ff
        half = d // 2

        self.audio_frontend = Linear("enc.frontend.audio", cfg.audio_in_dim, half, rng, bias=False)
        self.video_frontend = Linear("enc.frontend.video", cfg.video_in_dim, half, rng, bias=False)
        self.mask_embedding = Parameter("enc.mask_embedding", rng.normal(0.0, 0.02, size=d))
        self.enc_blocks = [EncoderBlock(f"enc.block{i}", d, h, dff, rng) for i in range(cfg.n_enc_layers)]
        self.enc_norm = LayerNorm("enc.final_norm", d)
        self.cluster_head = Linear("enc.cluster_head", d, cfg.n_clusters, rng, zero_init=True)

        self.token_embedding = Parameter(
            "dec.token_embedding", rng.normal(0.0, 0.02, size=(cfg.vocab_size, d))
        )
        self.dec_blocks = [DecoderBlock(f"dec.block{i}", d, h, dff, rng) for i in range(cfg.n_dec_layers)]
        self.dec_norm = LayerNorm("dec.final_norm", d)
        self.output_head = Linear("dec.output_head", d, cfg.vocab_size, rng, zero_init=True)

        plist = self._collect_params()
        self._params = {p.name: p for p in plist}
        if len(self._params) != len(plist):
            raise AvlabError("duplicate parameter names")
        if store is not None:
            self.load_store(store)
        self._enc_cache = None
        self._dec_cache = None

    def _collect_params(self) -> list[Parameter]:
        params = self.audio_frontend.params + self.video_frontend.params + [self.mask_embedding]
        for block in self.enc_blocks:
            params += block.params
        params += self.enc_norm.params + self.cluster_head.params
        params += [self.token_embedding]
        for block in self.dec_blocks:
            params += block.params
        params += self.dec_norm.params + self.output_head.params
        return params

    # -- parameter store ----------------------------------------------------

    @property
    def param_names(self) -> list[str]:
        return list(self._params)

    def store(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self._params.items()}

    def grads(self) -> dict[str, np.ndarray]:
        return {name: p.grad for name, p in self._params.items()}

    def load_store(self, store: dict[str, np.ndarray]) -> None:
        if set(store) != set(self._params):
            missing = set(self._params) ^ set(store)
            raise AvlabError(f"parameter store mismatch: {sorted(missing)[:4]}...")
        for name, value in store.items():
            p = self._params[name]
            if p.value.shape != value.shape:
                raise ShapeMismatch(f"{name}: {value.shape} != {p.value.shape}")
            p.value = np.asarray(value, dtype=np.float64).copy()
            p.grad = np.zeros_like(p.value)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    def parameter(self, name: str) -> Parameter:
        return self._params[name]

    # -- encoder ------------------------------------------------------------

    def encode(
        self,
        audio: np.ndarray,
        video: np.ndarray,
        mask: MaskSpec,
        mode: ModalityMode = "both",
        pad_valid: Optional[np.ndarray] = None,
    ) -> EncodeResult:
        cfg = self.cfg
        audio = np.asarray(audio, dtype=np.float64)
        video = np.asarray(video, dtype=np.float64)
        if audio.shape[0] != video.shape[0]:
            raise ShapeMismatch(f"audio T={audio.shape[0]} != video T={video.shape[0]}")
        if audio.shape[1] != cfg.audio_in_dim or video.shape[1] != cfg.video_in_dim:
            raise ShapeMismatch("frontend input dimension mismatch")
        if mask.masked.size != audio.shape[0]:
            raise ShapeMismatch("mask length mismatch")
        if mode not in MODALITY_MODES:
            raise AvlabError(f"unknown modality mode {mode!r}")

        # a dropped modality is a zero feature vector at every frame
        if mode == "audio_only":
            video = np.zeros_like(video)
        elif mode == "video_only":
            audio = np.zeros_like(audio)

        fused = np.concatenate(
            [self.audio_frontend.forward(audio), self.video_frontend.forward(video)], axis=1
        )
        fused = fused.copy()
        fused[mask.masked] = self.mask_embedding.value
        x = fused + sinusoid_positions(fused.shape[0], cfg.d_model)

        attn_mask = padding_mask(np.asarray(pad_valid, dtype=bool)) if pad_valid is not None else None
        hidden = []
        for block in self.enc_blocks:
            x = block.forward(x, attn_mask=attn_mask)
            hidden.append(x)
        final = self.enc_norm.forward(x)
        logits = self.cluster_head.forward(final)
        self._enc_cache = mask
        return EncodeResult(hidden, final, logits)

    def encoder_backward(self, dlogits: Optional[np.ndarray] = None,
                         dfinal: Optional[np.ndarray] = None) -> None:
        """Backpropagate through the encoder from cluster logits and/or a
        gradient arriving at the final normed states (decoder cross-attention)."""
        if self._enc_cache is None:
            raise AvlabError("encoder_backward requires a prior encode")
        mask = self._enc_cache
        if dlogits is not None:
            d = self.cluster_head.backward(dlogits)
            if dfinal is not None:
                d = d + dfinal
        elif dfinal is not None:
            d = dfinal
        else:
            raise AvlabError("need dlogits or dfinal")
        d = self.enc_norm.backward(d)
        for block in reversed(self.enc_blocks):
            d = block.backward(d)
        # positions are constants; gradient passes straight to the fused frames
        dmask = d[mask.masked]
        if dmask.size:
            self.mask_embedding.grad += dmask.sum(axis=0)
        dfused = d.copy()
        dfused[mask.masked] = 0.0
        half = self.cfg.d_model // 2
        self.audio_frontend.backward(dfused[:, :half])
        self.video_frontend.backward(dfused[:, half:])
        self._enc_cache = None

    @property
    def encoder_param_names(self) -> list[str]:
        return [n for n in self._params if n.startswith("enc.")]

    @property
    def encoder_attention(self) -> list[np.ndarray]:
        return [block.attn.last_attention for block in self.enc_blocks]

    # -- decoder ------------------------------------------------------------

    def _decoder_forward(self, memory: np.ndarray, tokens: list[int]) -> np.ndarray:
        x = self.token_embedding.value[tokens] + sinusoid_positions(len(tokens), self.cfg.d_model)
        cmask = causal_mask(len(tokens))
        for block in self.dec_blocks:
            x = block.forward(x, memory, cmask)
        return self.output_head.forward(self.dec_norm.forward(x))

    def decode_loss(self, memory: np.ndarray, transcript: str, vocab: Optional[Vocab] = None) -> float:
        """Teacher-forced autoregressive cross-entropy with BOS/EOS.

        Keeps caches so decoder_backward can run afterwards.
        """
        vocab = vocab or Vocab.default()
        if not transcript:
            raise AvlabError("transcript must be non-empty")
        char_ids = vocab.encode(transcript)
        inputs = [Vocab.BOS] + char_ids
        targets = np.array(char_ids + [Vocab.EOS])
        logits = self._decoder_forward(memory, inputs)
        logp = log_softmax(logits, axis=-1)
        loss = float(-logp[np.arange(targets.size), targets].mean())
        self.last_decode_accuracy = float((np.argmax(logits, axis=1) == targets).mean())
        self._dec_cache = (logits, targets, inputs)
        return loss

    def decoder_backward(self, scale: float = 1.0) -> np.ndarray:
        """Backpropagate the cached decode loss; returns dmemory."""
        if self._dec_cache is None:
            raise AvlabError("decoder_backward requires a prior decode_loss")
        logits, targets, inputs = self._dec_cache
        n = targets.size
        dlogits = softmax(logits, axis=-1)
        dlogits[np.arange(n), targets] -= 1.0
        dlogits *= scale / n
        d = self.dec_norm.backward(self.output_head.backward(dlogits))
        dmemory = None
        for block in reversed(self.dec_blocks):
            d, dmem = block.backward(d)
            dmemory = dmem if dmemory is None else dmemory + dmem
        np.add.at(self.token_embedding.grad, inputs, d)
        self._dec_cache = None
        return dmemory

    def greedy_decode(
        self,
        audio: np.ndarray,
        video: np.ndarray,
        mode: ModalityMode = "both",
        max_len: int = 200,
        vocab: Optional[Vocab] = None,
    ) -> str:
        """Argmax decoding from BOS until EOS or max_len; deterministic."""
        if max_len < 1:
            raise AvlabError("max_len must be >= 1")
        vocab = vocab or Vocab.default()
        memory = self.encode(audio, video, MaskSpec.empty(audio.shape[0]), mode).final
        tokens = [Vocab.BOS]
        out: list[int] = []
        for _ in range(max_len):
            logits = self._decoder_forward(memory, tokens)
            nxt = int(np.argmax(logits[-1]))
            if nxt == Vocab.EOS:
                break
            tokens.append(nxt)
            out.append(nxt)
        return vocab.decode(out)


def init_params(cfg: ArchConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Fresh seeded parameter store: Gaussian(0, 0.02) weights, identity layer
    norms, zero-initialized cluster and output heads."""
    return AVModel(cfg, seed=seed).store()


def masked_ce_loss(
    logits: np.ndarray, targets: np.ndarray, mask: MaskSpec
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over masked frames only; (0, flags) for empty masks."""
    loss, _ = masked_ce_with_grad(logits, targets, mask)
    return loss, mask.masked.copy()


def masked_ce_with_grad(
    logits: np.ndarray, targets: np.ndarray, mask: MaskSpec
) -> tuple[float, np.ndarray]:
    """Loss plus d(loss)/d(logits); rows at unmasked frames are exactly zero."""
    targets = np.asarray(targets)
    if logits.shape[0] != targets.size or targets.size != mask.masked.size:
        raise ShapeMismatch("logits/targets/mask length mismatch")
    dlogits = np.zeros_like(logits)
    idx = np.flatnonzero(mask.masked)
    if idx.size == 0:
        return 0.0, dlogits
    rows = logits[idx]
    logp = log_softmax(rows, axis=-1)
    tgt = targets[idx]
    loss = float(-logp[np.arange(idx.size), tgt].mean())
    drows = softmax(rows, axis=-1)
    drows[np.arange(idx.size), tgt] -= 1.0
    dlogits[idx] = drows / idx.size
    return loss, dlogits
