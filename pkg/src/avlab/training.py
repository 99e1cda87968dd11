"""Training orchestration: iterative pretraining (cluster then masked
prediction, with optional noise augmentation) and noise-augmented seq2seq
finetuning with encoder freezing. Owns the Adam optimizer and schedules.

Cluster targets are always computed from clean audio and video before the step
loop starts, so the target tensors are bit-identical whether noise augmentation
is on or off; only the model inputs differ.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .clustering import Codebook, LabelSequence, assign, kmeans_fit, read_codebook, subsample_frames, write_codebook, write_labels
from .corpus import AVCorpus, UtteranceEntry
from .features import FeatureSequence, logmel, mfcc, normalize, stack
from .model import (
    AVModel,
    ArchConfig,
    MaskSpec,
    ModalityDropout,
    Vocab,
    load_checkpoint,
    masked_ce_with_grad,
    preset,
    sample_mask,
    sample_modality,
    save_checkpoint,
)
from .signal import NoiseManifest, NoisePolicy, Waveform, mix_at_snr, sample_training_noise
from .util import AvlabError, NumericalError, config_hash, derive_int, rng_for


class NaNLoss(NumericalError):
    """Training hit a non-finite loss; a diagnostic dump was written."""


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OptimizerParams:
    base_lr: float = 2e-3
    warmup_steps: int = 40
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    clip_norm: float = 1.0

    def to_dict(self) -> dict:
        return {
            "base_lr": self.base_lr,
            "warmup_steps": self.warmup_steps,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "clip_norm": self.clip_norm,
        }


class OptimizerState:
    """Per-parameter first/second moments plus the step counter and schedule."""

    def __init__(self, store: dict[str, np.ndarray], params: OptimizerParams = OptimizerParams()):
        self.m = {name: np.zeros_like(v) for name, v in store.items()}
        self.v = {name: np.zeros_like(v) for name, v in store.items()}
        self.step = 0
        self.params = params

    def learning_rate(self, step: int) -> float:
        warmup = max(1, self.params.warmup_steps)
        return self.params.base_lr * min(step / warmup, np.sqrt(warmup / step))


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most max_norm;
    returns the applied scale."""
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total <= max_norm or total == 0.0:
        return 1.0
    scale = max_norm / total
    for g in grads.values():
        g *= scale
    return scale


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    update: Optional[Callable[[str], bool]] = None,
) -> None:
    """Bias-corrected Adam update in place, after a global-norm clip at 1.0.

    `update` filters which parameters move (encoder freezing); the step counter
    and clipping always cover the whole gradient dict passed in.
    """
    hp = state.params
    clip_global_norm(grads, hp.clip_norm)
    state.step += 1
    t = state.step
    lr = state.learning_rate(t)
    bc1 = 1.0 - hp.beta1**t
    bc2 = 1.0 - hp.beta2**t
    for name, g in grads.items():
        if update is not None and not update(name):
            continue
        m = state.m[name]
        v = state.v[name]
        m *= hp.beta1
        m += (1.0 - hp.beta1) * g
        v *= hp.beta2
        v += (1.0 - hp.beta2) * g * g
        params[name] -= lr * (m / bc1) / (np.sqrt(v / bc2) + hp.eps)


# ---------------------------------------------------------------------------
# Feature pipeline
# ---------------------------------------------------------------------------

def audio_features(w: Waveform) -> FeatureSequence:
    """Normalized 52-dim stacked MFCCs at 25 Hz."""
    return normalize(stack(mfcc(logmel(w))))


def _normalize_rows(data: np.ndarray) -> np.ndarray:
    mean = data.mean(axis=0)
    scale = np.sqrt(np.maximum(data.var(axis=0), 1e-8))
    return (data - mean) / scale


class FeaturePipeline:
    """Caches clean per-utterance features; noisy features are never cached."""

    def __init__(self, corpus: AVCorpus):
        self.corpus = corpus
        self._audio: dict[str, np.ndarray] = {}
        self._video: dict[str, np.ndarray] = {}
        self._wav: dict[str, Waveform] = {}

    def clean_waveform(self, entry: UtteranceEntry) -> Waveform:
        w = self._wav.get(entry.id)
        if w is None:
            w = self.corpus.load_audio(entry)
            self._wav[entry.id] = w
        return w

    def clean_audio(self, entry: UtteranceEntry) -> np.ndarray:
        feats = self._audio.get(entry.id)
        if feats is None:
            feats = audio_features(self.clean_waveform(entry)).data
            self._audio[entry.id] = feats
        return feats

    def video(self, entry: UtteranceEntry) -> np.ndarray:
        feats = self._video.get(entry.id)
        if feats is None:
            feats = _normalize_rows(self.corpus.load_video(entry))
            self._video[entry.id] = feats
        return feats

    def frames(self, entry: UtteranceEntry) -> int:
        return self.video(entry).shape[0]

    def model_inputs(
        self, entry: UtteranceEntry, audio_wav: Optional[Waveform] = None
    ) -> tuple[np.ndarray, np.ndarray]:
        """(audio [T, 52], video [T, 8]) aligned at 25 Hz; pass a corrupted
        waveform to get noisy audio features against the clean video."""
        audio = audio_features(audio_wav).data if audio_wav is not None else self.clean_audio(entry)
        video = self.video(entry)
        t = min(audio.shape[0], video.shape[0])
        return audio[:t], video[:t]


def utterance_features(corpus: AVCorpus, entry: UtteranceEntry) -> tuple[FeatureSequence, FeatureSequence]:
    """Clean aligned (audio, video) features as FeatureSequences."""
    audio = audio_features(corpus.load_audio(entry))
    video = _normalize_rows(corpus.load_video(entry))
    t = min(audio.data.shape[0], video.shape[0])
    return (
        FeatureSequence(audio.data[:t], 25.0, audio.kind),
        FeatureSequence(video[:t], 25.0, "hidden"),
    )


def sample_batch(
    entries: list[UtteranceEntry], frames: dict[str, int], cap: int, rng: np.random.Generator
) -> list[UtteranceEntry]:
    """Seeded utterance subset whose total 25 Hz frames stay within cap
    (always at least one utterance)."""
    order = rng.permutation(len(entries))
    batch: list[UtteranceEntry] = []
    total = 0
    for idx in order:
        entry = entries[idx]
        t = frames[entry.id]
        if batch and total + t > cap:
            break
        batch.append(entry)
        total += t
        if total >= cap:
            break
    return batch


# ---------------------------------------------------------------------------
# Pretraining
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PretrainConfig:
    iterations: int = 2
    steps: int = 400  # per iteration
    batch_frames_cap: int = 1000
    noise: NoisePolicy = NoisePolicy()
    pretrain_noise: bool = True
    mask_start_prob: float = 0.08
    mask_span: int = 10
    dropout: ModalityDropout = ModalityDropout()
    optimizer: OptimizerParams = OptimizerParams()
    seed: int = 0
    n_clusters: int = 20
    refit_layer: Optional[int] = None  # default: middle encoder layer
    iteration_presets: tuple[str, ...] = ("toy-small", "toy")
    max_cluster_frames: int = 200_000

    def __post_init__(self):
        if self.steps < 1 or self.iterations < 1:
            raise AvlabError("need steps >= 1 and iterations >= 1")

    def preset_for(self, iteration: int) -> str:
        # all-but-last iterations use the smaller architecture
        if iteration >= self.iterations:
            return self.iteration_presets[-1]
        return self.iteration_presets[min(iteration - 1, len(self.iteration_presets) - 2)]

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "steps": self.steps,
            "batch_frames_cap": self.batch_frames_cap,
            "noise": vars(self.noise) | {"categories": list(self.noise.categories)},
            "pretrain_noise": self.pretrain_noise,
            "mask_start_prob": self.mask_start_prob,
            "mask_span": self.mask_span,
            "dropout": vars(self.dropout),
            "optimizer": self.optimizer.to_dict(),
            "seed": self.seed,
            "n_clusters": self.n_clusters,
            "refit_layer": self.refit_layer,
            "iteration_presets": list(self.iteration_presets),
            "max_cluster_frames": self.max_cluster_frames,
        }


def _nan_dump(out_dir: Path, context: dict) -> None:
    (out_dir / "nan_diagnostic.json").write_text(json.dumps(context, indent=2, default=str) + "\n")


def _encoder_cluster_frames(
    model: AVModel, pipeline: FeaturePipeline, entries: list[UtteranceEntry], layer: int
) -> list[tuple[str, np.ndarray]]:
    """Clean, unmasked fused-encoder activations per utterance at `layer`."""
    per_utt = []
    for entry in entries:
        audio, video = pipeline.model_inputs(entry)
        out = model.encode(audio, video, MaskSpec.empty(audio.shape[0]), "both")
        model._enc_cache = None
        per_utt.append((entry.id, out.hidden[layer]))
    return per_utt


def _fit_iteration_codebook(
    cfg: PretrainConfig,
    iteration: int,
    pipeline: FeaturePipeline,
    entries: list[UtteranceEntry],
    prev_ckpt: Optional[Path],
    out_dir: Path,
) -> tuple[Codebook, dict[str, np.ndarray]]:
    """Codebook plus per-utterance clean-target labels for this iteration."""
    if iteration == 1:
        per_utt = [(e.id, pipeline.clean_audio(e)) for e in entries]
        source = "mfcc"
    else:
        arch, store, _ = load_checkpoint(prev_ckpt)
        model = AVModel(arch, store)
        layer = cfg.refit_layer if cfg.refit_layer is not None else arch.n_enc_layers // 2
        per_utt = _encoder_cluster_frames(model, pipeline, entries, layer)
        source = f"hidden(layer={layer},iteration={iteration})"
    frames = subsample_frames(per_utt, cfg.max_cluster_frames, seed=derive_int(cfg.seed, "subsample", iteration))
    codebook = kmeans_fit(
        frames, cfg.n_clusters, seed=derive_int(cfg.seed, "kmeans", iteration), source=source
    )
    cb_path = out_dir / f"codebook_iter{iteration}.kmc"
    write_codebook(cb_path, codebook)
    codebook = read_codebook(cb_path)  # stage boundary: f32 round-trip

    kind = "stacked_mfcc" if iteration == 1 else "hidden"
    labels = {}
    for utt_id, feats in per_utt:
        seq = assign(codebook, FeatureSequence(feats, 25.0, kind), utt_id)
        labels[utt_id] = seq.labels
    write_labels(out_dir / f"labels_iter{iteration}.tsv", [LabelSequence(v, k) for k, v in sorted(labels.items())])
    return codebook, labels


def pretrain(
    cfg: PretrainConfig,
    corpus: AVCorpus,
    noise_manifest: Optional[NoiseManifest],
    out_dir: Path | str,
) -> list[Path]:
    """Iterative masked-prediction pretraining; returns one checkpoint per iteration."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.pretrain_noise and noise_manifest is None:
        raise AvlabError("pretrain_noise requires a noise manifest")
    pipeline = FeaturePipeline(corpus)
    entries = corpus.manifests["pretrain"]
    if not entries:
        raise AvlabError("empty pretrain manifest")
    frames = {e.id: pipeline.frames(e) for e in entries}

    ckpts: list[Path] = []
    prev_ckpt: Optional[Path] = None
    noise_step = 0
    for iteration in range(1, cfg.iterations + 1):
        codebook, labels = _fit_iteration_codebook(cfg, iteration, pipeline, entries, prev_ckpt, out)
        arch = preset(cfg.preset_for(iteration), n_clusters=cfg.n_clusters)
        model = AVModel(arch, seed=derive_int(cfg.seed, "init", iteration))
        opt = OptimizerState(model.store(), cfg.optimizer)
        log_lines = ["step\tloss\tlr\tmasked_acc"]

        for step in range(1, cfg.steps + 1):
            batch = sample_batch(entries, frames, cfg.batch_frames_cap, rng_for("batch", cfg.seed, iteration, step))
            model.zero_grad()
            loss_sum = 0.0
            masked_total = 0
            masked_correct = 0
            for entry in batch:
                wav = None
                if cfg.pretrain_noise:
                    drawn = sample_training_noise(noise_manifest, cfg.noise, noise_step)
                    noise_step += 1
                    if drawn is not None:
                        clip, snr_db = drawn
                        wav = mix_at_snr(
                            pipeline.clean_waveform(entry), clip, snr_db,
                            seed=derive_int(cfg.seed, "mix", iteration, step, entry.id),
                        )
                audio, video = pipeline.model_inputs(entry, audio_wav=wav)
                t = audio.shape[0]
                mask = sample_mask(
                    t, cfg.mask_start_prob, cfg.mask_span,
                    seed=derive_int(cfg.seed, "mask", iteration, step, entry.id),
                )
                mode = sample_modality(cfg.dropout, seed=derive_int(cfg.seed, "modality", iteration, step, entry.id))
                target = labels[entry.id][:t]
                n_masked = int(mask.masked.sum())
                result = model.encode(audio, video, mask, mode)
                if n_masked == 0:
                    model._enc_cache = None
                    continue
                loss_u, dlogits = masked_ce_with_grad(result.logits, target, mask)
                # pool the batch loss over masked frames, not utterances
                model.encoder_backward(dlogits * n_masked)
                loss_sum += loss_u * n_masked
                masked_total += n_masked
                pred = np.argmax(result.logits[mask.masked], axis=1)
                masked_correct += int((pred == target[mask.masked]).sum())

            if masked_total > 0:
                loss = loss_sum / masked_total
                if not np.isfinite(loss):
                    _nan_dump(out, {"stage": "pretrain", "iteration": iteration, "step": step,
                                    "batch": [e.id for e in batch], "loss": loss})
                    raise NaNLoss(f"non-finite pretraining loss at iteration {iteration} step {step}")
                grads = model.grads()
                for g in grads.values():
                    g /= masked_total
                adam_step({n: model.parameter(n).value for n in model.param_names}, grads, opt)
            else:
                loss = 0.0
            acc = masked_correct / masked_total if masked_total else 0.0
            log_lines.append(f"{step}\t{loss:.6f}\t{opt.learning_rate(max(1, opt.step)):.6g}\t{acc:.4f}")

        (out / f"pretrain_iter{iteration}.log.tsv").write_text("\n".join(log_lines) + "\n")
        ckpt_path = out / f"pretrain_iter{iteration}.avck"
        meta = {
            "stage": "pretrain",
            "iteration": str(iteration),
            "pt_type": "noisy" if cfg.pretrain_noise else "clean",
            "cluster_source": codebook.source,
            "seed": str(cfg.seed),
            "corpus_hash": corpus.meta["corpus_hash"],
            "train_config_hash": config_hash(cfg.to_dict()),
        }
        save_checkpoint(ckpt_path, arch, model.store(), meta)
        ckpts.append(ckpt_path)
        prev_ckpt = ckpt_path
    return ckpts


# ---------------------------------------------------------------------------
# Finetuning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FinetuneConfig:
    labels: str = "low"  # manifest: finetune_low or finetune_mid
    steps: int = 3000  # desk-scale analog; low 3k / mid 10k
    freeze_steps: Optional[int] = None  # default 25% of steps
    batch_frames_cap: int = 1000
    noise: NoisePolicy = NoisePolicy()
    finetune_noise: bool = True
    input_mode: str = "AV"  # "AV" or "A"
    optimizer: OptimizerParams = OptimizerParams()
    seed: int = 0
    preset: str = "toy"  # architecture when training from scratch (PT: None)

    def __post_init__(self):
        if self.input_mode not in ("AV", "A"):
            raise AvlabError("input_mode must be 'AV' or 'A'")
        if self.labels not in ("low", "mid"):
            raise AvlabError("labels must be 'low' or 'mid'")
        if self.freeze_steps is not None and self.freeze_steps > self.steps:
            raise AvlabError("freeze_steps must be <= steps")

    @property
    def freeze(self) -> int:
        return self.freeze_steps if self.freeze_steps is not None else self.steps // 4

    def to_dict(self) -> dict:
        return {
            "labels": self.labels,
            "steps": self.steps,
            "freeze_steps": self.freeze,
            "batch_frames_cap": self.batch_frames_cap,
            "noise": vars(self.noise) | {"categories": list(self.noise.categories)},
            "finetune_noise": self.finetune_noise,
            "input_mode": self.input_mode,
            "optimizer": self.optimizer.to_dict(),
            "seed": self.seed,
            "preset": self.preset,
        }


def finetune(
    cfg: FinetuneConfig,
    pretrained_ckpt: Optional[Path | str],
    corpus: AVCorpus,
    noise_manifest: Optional[NoiseManifest],
    out_dir: Path | str,
) -> Path:
    """Seq2seq finetuning: fresh decoder, no masking, no modality dropout;
    encoder weights are frozen for the first freeze_steps updates."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.finetune_noise and noise_manifest is None:
        raise AvlabError("finetune noise policy requires a noise manifest")
    vocab = Vocab.default()

    if pretrained_ckpt is not None:
        arch, pre_store, pre_meta = load_checkpoint(pretrained_ckpt)
        pt_type = pre_meta.get("pt_type", "unknown")
        fresh = AVModel(arch, seed=derive_int(cfg.seed, "decoder")).store()
        store = {name: (pre_store[name] if name.startswith("enc.") else fresh[name]) for name in fresh}
        model = AVModel(arch, store)
    else:
        arch = preset(cfg.preset)
        pt_type = "none"
        model = AVModel(arch, seed=derive_int(cfg.seed, "scratch"))

    pipeline = FeaturePipeline(corpus)
    manifest_name = "finetune_low" if cfg.labels == "low" else "finetune_mid"
    entries = corpus.manifests[manifest_name]
    if not entries:
        raise AvlabError(f"empty manifest {manifest_name}")
    frames = {e.id: pipeline.frames(e) for e in entries}
    mode = "both" if cfg.input_mode == "AV" else "audio_only"

    opt = OptimizerState(model.store(), cfg.optimizer)
    log_lines = ["step\tloss\tlr\tmasked_acc"]
    noise_step = 0
    for step in range(1, cfg.steps + 1):
        batch = sample_batch(entries, frames, cfg.batch_frames_cap, rng_for("ft_batch", cfg.seed, step))
        model.zero_grad()
        loss_sum = 0.0
        token_total = 0
        token_correct = 0
        for entry in batch:
            wav = None
            if cfg.finetune_noise:
                drawn = sample_training_noise(noise_manifest, cfg.noise, noise_step)
                noise_step += 1
                if drawn is not None:
                    clip, snr_db = drawn
                    wav = mix_at_snr(
                        pipeline.clean_waveform(entry), clip, snr_db,
                        seed=derive_int(cfg.seed, "ft_mix", step, entry.id),
                    )
            audio, video = pipeline.model_inputs(entry, audio_wav=wav)
            result = model.encode(audio, video, MaskSpec.empty(audio.shape[0]), mode)
            n_tokens = len(entry.transcript) + 1  # + EOS
            loss_u = model.decode_loss(result.final, entry.transcript, vocab)
            acc_u = model.last_decode_accuracy
            dmem = model.decoder_backward(scale=n_tokens)
            model.encoder_backward(dlogits=None, dfinal=dmem)
            loss_sum += loss_u * n_tokens
            token_total += n_tokens
            token_correct += int(round(acc_u * n_tokens))

        loss = loss_sum / token_total
        if not np.isfinite(loss):
            _nan_dump(out, {"stage": "finetune", "step": step, "batch": [e.id for e in batch], "loss": loss})
            raise NaNLoss(f"non-finite finetuning loss at step {step}")
        grads = model.grads()
        for g in grads.values():
            g /= token_total
        frozen = step <= cfg.freeze
        adam_step(
            {n: model.parameter(n).value for n in model.param_names},
            grads,
            opt,
            update=(lambda name: name.startswith("dec.")) if frozen else None,
        )
        acc = token_correct / token_total
        log_lines.append(f"{step}\t{loss:.6f}\t{opt.learning_rate(max(1, opt.step)):.6g}\t{acc:.4f}")

    (out / "finetune.log.tsv").write_text("\n".join(log_lines) + "\n")
    ckpt_path = out / "finetune.avck"
    meta = {
        "stage": "finetune",
        "pt_type": pt_type,
        "ft_labels": cfg.labels,
        "input_mode": cfg.input_mode,
        "ft_noise": "noisy" if cfg.finetune_noise and cfg.noise.apply_probability > 0 else "clean",
        "seed": str(cfg.seed),
        "corpus_hash": corpus.meta["corpus_hash"],
        "train_config_hash": config_hash(cfg.to_dict()),
    }
    save_checkpoint(ckpt_path, arch, model.store(), meta)
    return ckpt_path


def masked_accuracy(
    ckpt_path: Path | str,
    corpus: AVCorpus,
    manifest_name: str,
    codebook: Codebook,
    seed: int = 0,
    mask_start_prob: float = 0.08,
    mask_span: int = 10,
) -> float:
    """Held-out masked-frame prediction accuracy on clean inputs.

    Labels come from the given codebook applied to the same clean feature
    stream the codebook was fitted on (MFCC for iteration-1 codebooks).
    """
    arch, store, _ = load_checkpoint(ckpt_path)
    model = AVModel(arch, store)
    pipeline = FeaturePipeline(corpus)
    layer = None
    if codebook.source.startswith("hidden"):
        layer = int(codebook.source.split("layer=")[1].split(",")[0])
    correct = 0
    total = 0
    for entry in corpus.manifests[manifest_name]:
        audio, video = pipeline.model_inputs(entry)
        t = audio.shape[0]
        if layer is None:
            feats = audio
        else:
            clean = model.encode(audio, video, MaskSpec.empty(t), "both")
            model._enc_cache = None
            feats = clean.hidden[layer]
        target = assign(codebook, FeatureSequence(feats, 25.0, "hidden"), entry.id).labels
        mask = sample_mask(t, mask_start_prob, mask_span, seed=derive_int(seed, "eval_mask", entry.id))
        if not mask.masked.any():
            continue
        result = model.encode(audio, video, mask, "both")
        model._enc_cache = None
        pred = np.argmax(result.logits[mask.masked], axis=1)
        correct += int((pred == target[mask.masked]).sum())
        total += int(mask.masked.sum())
    return correct / total if total else 0.0
