"""k-means codebook fitting and frame-label assignment for masked-prediction
targets, including refits from learned encoder features at iteration >= 2."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .features import FeatureSequence
from .util import AvlabError, rng_for

CONVERGENCE_EPS = 1e-6
MAX_REFIT_FRAMES = 200_000


class TooFewPoints(AvlabError):
    """Fewer distinct points than clusters."""


class DimMismatch(AvlabError):
    """Feature dimension does not match the codebook."""


@dataclass(frozen=True)
class Codebook:
    centroids: np.ndarray  # [k, D]
    source: str  # "mfcc" or "hidden(layer=i,iteration=j)"
    seed: int = 0

    def __post_init__(self):
        c = np.asarray(self.centroids, dtype=np.float64)
        if c.ndim != 2 or c.shape[0] < 1 or not np.all(np.isfinite(c)):
            raise AvlabError("centroids must be a finite [k, D] matrix")
        object.__setattr__(self, "centroids", c)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


@dataclass(frozen=True)
class LabelSequence:
    labels: np.ndarray
    utt_id: str

    def __post_init__(self):
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # explicit differences keep exact ties exact (no cancellation surprises)
    return np.sum((points[:, None, :] - centroids[None, :, :]) ** 2, axis=2)


def _kmeanspp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[int(rng.integers(n))]
    d2 = np.sum((points - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            centroids[j] = points[int(rng.integers(n))]
            continue
        centroids[j] = points[int(rng.choice(n, p=d2 / total))]
        d2 = np.minimum(d2, np.sum((points - centroids[j]) ** 2, axis=1))
    return centroids


def _lloyd(points: np.ndarray, init: np.ndarray, max_iters: int) -> tuple[np.ndarray, float]:
    centroids = init.copy()
    k = centroids.shape[0]
    prev_obj = np.inf
    for _ in range(max_iters):
        d2 = _sq_dists(points, centroids)
        labels = np.argmin(d2, axis=1)
        obj = float(np.mean(d2[np.arange(points.shape[0]), labels]))
        if obj > prev_obj + 1e-12 * max(1.0, prev_obj):
            raise AvlabError("k-means objective increased; internal error")
        prev_obj = obj
        new_centroids = centroids.copy()
        empties = []
        for j in range(k):
            members = points[labels == j]
            if members.shape[0] > 0:
                new_centroids[j] = members.mean(axis=0)
            else:
                empties.append(j)
        if empties:
            # reseed empty clusters to the farthest points, one point each
            own = d2[np.arange(points.shape[0]), labels]
            far_order = np.argsort(-own, kind="stable")
            for rank, j in enumerate(empties):
                new_centroids[j] = points[far_order[rank]]
        movement = float(np.max(np.linalg.norm(new_centroids - centroids, axis=1)))
        centroids = new_centroids
        if movement < CONVERGENCE_EPS:
            break
    d2 = _sq_dists(points, centroids)
    obj = float(np.mean(np.min(d2, axis=1)))
    return centroids, obj


def kmeans_fit(
    features: np.ndarray,
    k: int,
    max_iters: int = 100,
    seed: int = 0,
    n_init: int = 8,
    source: str = "mfcc",
) -> Codebook:
    """Seeded k-means++ plus Lloyd iterations; best of n_init restarts.

    The Lloyd objective (mean squared distance) is checked to be non-increasing
    on every iteration. Empty clusters are reseeded to the farthest point.
    """
    points = np.asarray(features, dtype=np.float64)
    if points.ndim != 2:
        raise AvlabError("features must be [N, D]")
    if np.unique(points, axis=0).shape[0] < k:
        raise TooFewPoints(f"need >= {k} distinct frames")
    best: Optional[tuple[np.ndarray, float]] = None
    for restart in range(n_init):
        rng = rng_for("kmeans", seed, restart)
        init = _kmeanspp_init(points, k, rng)
        centroids, obj = _lloyd(points, init, max_iters)
        if best is None or obj < best[1]:
            best = (centroids, obj)
    centroids = best[0]
    # fit postcondition: centroids pairwise distinct
    if k > 1:
        gaps = _sq_dists(centroids, centroids)
        gaps[np.eye(k, dtype=bool)] = np.inf
        if float(np.min(gaps)) <= 1e-18:
            raise AvlabError("duplicate centroids after fit")
    return Codebook(centroids, source=source, seed=seed)


def assign(cb: Codebook, f: FeatureSequence, utt_id: str = "") -> LabelSequence:
    """Nearest centroid per frame (squared Euclidean); ties go to the lowest id."""
    if f.data.shape[1] != cb.dim:
        raise DimMismatch(f"feature dim {f.data.shape[1]} != codebook dim {cb.dim}")
    d2 = _sq_dists(f.data, cb.centroids)
    return LabelSequence(np.argmin(d2, axis=1), utt_id)


def subsample_frames(per_utt: Sequence[tuple[str, np.ndarray]], max_frames: int, seed: int) -> np.ndarray:
    """Concatenate per-utterance frames in sorted-id order, then take a seeded
    uniform subset of at most max_frames rows."""
    ordered = sorted(per_utt, key=lambda item: item[0])
    stacked = np.concatenate([frames for _, frames in ordered], axis=0)
    if stacked.shape[0] <= max_frames:
        return stacked
    idx = rng_for("frame_subsample", seed).choice(stacked.shape[0], size=max_frames, replace=False)
    return stacked[np.sort(idx)]


def refit_from_encoder(
    ckpt_path: Path | str,
    layer: int,
    corpus,
    manifest_name: str,
    k: int,
    seed: int,
    iteration: int,
    max_frames: int = MAX_REFIT_FRAMES,
) -> Codebook:
    """Fit a codebook on clean, unmasked encoder activations at the given layer.

    Runs the checkpointed encoder on clean audio+video for every manifest
    utterance, collects the 25 Hz hidden states, subsamples at most max_frames
    rows (seeded, sorted-id order), and fits k-means.
    """
    from .model import AVModel, MaskSpec, load_checkpoint
    from .training import utterance_features

    cfg, store, _meta = load_checkpoint(ckpt_path)
    if not 0 <= layer < cfg.n_enc_layers:
        raise AvlabError(f"layer {layer} outside encoder depth {cfg.n_enc_layers}")
    model = AVModel(cfg, store)
    per_utt = []
    for entry in corpus.manifests[manifest_name]:
        audio_f, video_f = utterance_features(corpus, entry)
        mask = MaskSpec.empty(audio_f.shape[0])
        out = model.encode(audio_f.data, video_f.data, mask, "both")
        per_utt.append((entry.id, out.hidden[layer]))
    frames = subsample_frames(per_utt, max_frames, seed)
    return kmeans_fit(frames, k, seed=seed, source=f"hidden(layer={layer},iteration={iteration})")


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

_MAGIC = b"KMC1"


def write_codebook(path: Path | str, cb: Codebook) -> None:
    """KMC1: magic, u32 k, u32 D, f32 centroids row-major, source descriptor."""
    src = cb.source.encode("utf-8")
    blob = (
        _MAGIC
        + struct.pack("<II", cb.k, cb.dim)
        + cb.centroids.astype("<f4").tobytes()
        + struct.pack("<I", len(src))
        + src
    )
    Path(path).write_bytes(blob)


def read_codebook(path: Path | str) -> Codebook:
    blob = Path(path).read_bytes()
    if blob[:4] != _MAGIC:
        raise AvlabError(f"{path}: bad magic")
    k, d = struct.unpack("<II", blob[4:12])
    end = 12 + 4 * k * d
    centroids = np.frombuffer(blob[12:end], dtype="<f4").reshape(k, d).astype(np.float64)
    (src_len,) = struct.unpack("<I", blob[end : end + 4])
    source = blob[end + 4 : end + 4 + src_len].decode("utf-8")
    return Codebook(centroids, source=source)


def write_labels(path: Path | str, labels: Iterable[LabelSequence]) -> None:
    lines = [f"{seq.utt_id}\t{' '.join(str(x) for x in seq.labels)}" for seq in labels]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_labels(path: Path | str) -> dict[str, np.ndarray]:
    table = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        utt_id, values = line.split("\t")
        table[utt_id] = np.array([int(v) for v in values.split()], dtype=np.int64)
    return table


def purity(labels: np.ndarray, reference: np.ndarray) -> float:
    """Cluster purity against reference symbols: sum of per-cluster majority
    counts over total frames."""
    if labels.size != reference.size or labels.size == 0:
        raise AvlabError("purity needs equal-length non-empty label arrays")
    total = 0
    for cluster in np.unique(labels):
        counts = np.bincount(reference[labels == cluster])
        total += int(counts.max())
    return total / labels.size
