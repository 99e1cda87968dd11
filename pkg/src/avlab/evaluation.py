"""WER scoring, the noise-type x SNR evaluation grid, aggregation arithmetic,
and text/CSV/SVG report rendering.

Corpus-level WER pools edit counts across utterances ((sum S + I + D) / sum
ref words); per-type and N-WER summaries are unweighted means over grid cells,
rounded half-up to one decimal only when rendered.
"""

from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .corpus import AVCorpus, UtteranceEntry
from .model import AVModel, MaskSpec, load_checkpoint
from .signal import CATEGORIES, SNR_GRID_DB, NoiseManifest, mix_at_snr
from .training import FeaturePipeline
from .util import AvlabError, derive_int, rng_for, round_half_up, worker_count


class EmptyReference(AvlabError):
    """WER is undefined for an empty reference."""


class MissingNoiseType(AvlabError):
    """The noise manifest lacks test clips of a requested category."""


class IncompleteGrid(AvlabError):
    """Aggregation requires all 21 grid cells."""


class NonpositiveBaseline(AvlabError):
    """Relative reduction is undefined for baseline <= 0."""


@dataclass(frozen=True)
class WerCount:
    substitutions: int
    insertions: int
    deletions: int
    ref_words: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def wer(self) -> float:
        return self.errors / self.ref_words

    def __add__(self, other: "WerCount") -> "WerCount":
        return WerCount(
            self.substitutions + other.substitutions,
            self.insertions + other.insertions,
            self.deletions + other.deletions,
            self.ref_words + other.ref_words,
        )


def wer(ref: Sequence[str], hyp: Sequence[str]) -> WerCount:
    """Minimal-edit alignment by dynamic programming, unit costs.

    Backtracing prefers substitution over insertion over deletion on ties, so
    the S/I/D decomposition is deterministic.
    """
    if len(ref) == 0:
        raise EmptyReference("reference word sequence is empty")
    n, m = len(ref), len(hyp)
    dist = np.zeros((n + 1, m + 1), dtype=np.int64)
    dist[:, 0] = np.arange(n + 1)
    dist[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            ins = dist[i, j - 1] + 1
            dele = dist[i - 1, j] + 1
            dist[i, j] = min(sub, ins, dele)
    subs = ins = dels = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i, j] == dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            subs += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif j > 0 and dist[i, j] == dist[i, j - 1] + 1:
            ins += 1
            j -= 1
        else:
            dels += 1
            i -= 1
    return WerCount(int(subs), int(ins), int(dels), n)


# ---------------------------------------------------------------------------
# Evaluation grid
# ---------------------------------------------------------------------------

@dataclass
class EvalGrid:
    """WER percent per (noise type, SNR) cell plus the clean condition."""

    values: dict[tuple[str, float], float]
    clean: float
    metadata: dict[str, str] = field(default_factory=dict)

    def require_complete(self) -> None:
        missing = [
            (t, s) for t in CATEGORIES for s in SNR_GRID_DB if (t, s) not in self.values
        ]
        if missing:
            raise IncompleteGrid(f"missing cells: {missing[:4]}...")


def eval_grid(
    ckpt_path: Path | str,
    corpus: AVCorpus,
    noise_manifest: NoiseManifest,
    seed: int = 0,
    snrs: Sequence[float] = SNR_GRID_DB,
    categories: Sequence[str] = CATEGORIES,
    max_len_factor: float = 3.0,
    decode_fn: Optional[Callable[[UtteranceEntry, Optional[tuple]], str]] = None,
) -> EvalGrid:
    """Decode every test utterance clean and under each (type, SNR) cell.

    One test-partition clip per utterance per cell, seeded by (utterance id,
    type, snr). `decode_fn(entry, cell)` may replace the checkpointed decoder
    (oracle tests); cell is None for the clean pass.
    """
    arch, store, meta = load_checkpoint(ckpt_path)
    mode = "audio_only" if meta.get("input_mode", "AV") == "A" else "both"
    pipeline = FeaturePipeline(corpus)
    entries = corpus.manifests["test"]
    if not entries:
        raise AvlabError("empty test manifest")

    test_clips = {c: noise_manifest.select(category=c, partition="test") for c in categories}
    for c, clips in test_clips.items():
        if not clips:
            raise MissingNoiseType(f"no test-partition clips for {c!r}")

    def decode_cell(model: AVModel, entry: UtteranceEntry, cell: Optional[tuple[str, float]]) -> str:
        if decode_fn is not None:
            return decode_fn(entry, cell)
        wav = None
        if cell is not None:
            category, snr_db = cell
            clips = test_clips[category]
            pick = int(rng_for("eval_clip", seed, entry.id, category, snr_db).integers(len(clips)))
            clip = noise_manifest.load(clips[pick])
            wav = mix_at_snr(
                pipeline.clean_waveform(entry), clip, snr_db,
                seed=derive_int(seed, "eval_mix", entry.id, category, snr_db),
            )
        audio, video = pipeline.model_inputs(entry, audio_wav=wav)
        max_len = int(max_len_factor * audio.shape[0]) + 2
        return model.greedy_decode(audio, video, mode, max_len=max_len)

    cells: list[Optional[tuple[str, float]]] = [None] + [
        (c, float(s)) for c in categories for s in snrs
    ]

    def run_cell(cell):
        # layer caches are mutable, so each cell gets its own model instance
        model = AVModel(arch, store) if decode_fn is None else None
        pooled = WerCount(0, 0, 0, 0)
        for entry in entries:
            hyp = decode_cell(model, entry, cell)
            pooled = pooled + wer(entry.transcript.split(), hyp.split())
        return cell, 100.0 * pooled.wer

    if decode_fn is None and worker_count() > 1:
        with ThreadPoolExecutor(max_workers=worker_count()) as pool:
            results = list(pool.map(run_cell, cells))
    else:
        results = [run_cell(cell) for cell in cells]

    values = {cell: wer_pct for cell, wer_pct in results if cell is not None}
    clean = next(wer_pct for cell, wer_pct in results if cell is None)
    metadata = {
        "model": meta.get("stage", "?"),
        "pt": meta.get("pt_type", "?"),
        "ft": meta.get("ft_labels", "?"),
        "mode": meta.get("input_mode", "?"),
        "corpus_hash": meta.get("corpus_hash", "?"),
        "seed": str(seed),
    }
    return EvalGrid(values, clean, metadata)


def aggregate(grid: EvalGrid) -> dict:
    """Per-type SNR averages, N-WER over the 4x5 noisy cells, and C-WER."""
    grid.require_complete()
    per_type = {
        t: float(np.mean([grid.values[(t, s)] for s in SNR_GRID_DB])) for t in CATEGORIES
    }
    n_wer = float(np.mean([grid.values[(t, s)] for t in CATEGORIES for s in SNR_GRID_DB]))
    return {"per_type": per_type, "n_wer": n_wer, "c_wer": grid.clean}


def relative_reduction(baseline: float, ours: float) -> float:
    """100 * (baseline - ours) / baseline."""
    if baseline <= 0:
        raise NonpositiveBaseline(f"baseline must be positive, got {baseline}")
    return 100.0 * (baseline - ours) / baseline


# ---------------------------------------------------------------------------
# Report rendering
# ---------------------------------------------------------------------------

_TYPE_LETTER = {"babble": "B", "speech": "S", "music": "M", "natural": "N"}
REPORT_ORDER = ("babble", "speech", "music", "natural")


def _fmt(x: float) -> str:
    return f"{round_half_up(x, 1):.1f}"


def render_report(grids: list[EvalGrid], fmt: str = "text") -> str:
    """Text mirrors the appendix layout (SNR rows, B/S/M/N columns, clean row,
    per-grid blocks); CSV is one row per (model, type, snr)."""
    if fmt == "csv":
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["model", "pt", "ft", "mode", "noise_type", "snr_db", "wer_percent"])
        for grid in grids:
            md = grid.metadata
            base = [md.get("model", "?"), md.get("pt", "?"), md.get("ft", "?"), md.get("mode", "?")]
            for t in REPORT_ORDER:
                for s in SNR_GRID_DB:
                    writer.writerow(base + [t, f"{s:g}", f"{grid.values[(t, s)]:.6f}"])
            writer.writerow(base + ["clean", "", f"{grid.clean:.6f}"])
        return out.getvalue()
    if fmt != "text":
        raise AvlabError(f"unknown report format {fmt!r}")

    lines = []
    header = f"{'SNR (dB)':>10} " + " ".join(f"{_TYPE_LETTER[t]:>6}" for t in REPORT_ORDER)
    for grid in grids:
        md = grid.metadata
        lines.append(
            f"== model={md.get('model', '?')} pt={md.get('pt', '?')} ft={md.get('ft', '?')} mode={md.get('mode', '?')}"
        )
        lines.append(header)
        for s in SNR_GRID_DB:
            row = [f"{s:>10g}"] + [f"{_fmt(grid.values[(t, s)]):>6}" for t in REPORT_ORDER]
            lines.append(" ".join(row))
        lines.append(f"{'clean':>10} {_fmt(grid.clean):>6}")
        summary = aggregate(grid)
        per_type = " ".join(
            f"{_TYPE_LETTER[t]}-avg={_fmt(summary['per_type'][t])}" for t in REPORT_ORDER
        )
        lines.append(f"{'':>10} {per_type} N-WER={_fmt(summary['n_wer'])} C-WER={_fmt(summary['c_wer'])}")
        lines.append("")
    if not grids:
        lines.append(header)
        lines.append("")
    return "\n".join(lines) + "\n"


def render_svg(grids: list[EvalGrid]) -> str:
    """Bar chart of N-WER style per-type averages grouped by (mode, PT)."""
    groups = []
    for grid in grids:
        md = grid.metadata
        summary = aggregate(grid)
        groups.append((f"{md.get('mode', '?')}/{md.get('pt', '?')}", summary["per_type"]))
    bar_w, gap, group_gap, height = 18, 4, 30, 220
    colors = {"babble": "#4477aa", "speech": "#ee6677", "music": "#228833", "natural": "#ccbb44"}
    max_wer = max((v for _, per in groups for v in per.values()), default=1.0)
    max_wer = max(max_wer, 1.0)
    width = 60 + len(groups) * (4 * (bar_w + gap) + group_gap)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height + 60}">',
        f'<text x="10" y="20" font-size="13">WER (%) by noise type, grouped by mode/PT</text>',
    ]
    x = 50
    for label, per in groups:
        for t in REPORT_ORDER:
            h = per[t] / max_wer * height
            y = 30 + height - h
            parts.append(
                f'<rect x="{x:.1f}" y="{y:.1f}" width="{bar_w}" height="{h:.1f}" fill="{colors[t]}"/>'
            )
            x += bar_w + gap
        parts.append(
            f'<text x="{x - 4 * (bar_w + gap)}" y="{height + 48}" font-size="10">{label}</text>'
        )
        x += group_gap
    legend_x = 50
    for t in REPORT_ORDER:
        parts.append(f'<rect x="{legend_x}" y="{height + 52}" width="8" height="8" fill="{colors[t]}"/>')
        parts.append(f'<text x="{legend_x + 10}" y="{height + 60}" font-size="9">{t}</text>')
        legend_x += 70
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# ---------------------------------------------------------------------------
# Paper-table fixtures
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FixtureRow:
    model: str
    pt: str
    ft: str
    mode: str
    noise_type: str
    snr_db: Optional[float]  # None for the clean row
    wer_percent: float
    raw: str  # verbatim cell text; anomalies keep their printed form


def load_fixture_rows(path: Path | str) -> list[FixtureRow]:
    rows = []
    with open(path, newline="", encoding="utf-8") as f:
        for rec in csv.DictReader(f):
            snr = rec["snr_db"]
            rows.append(
                FixtureRow(
                    rec["model"],
                    rec["pt"],
                    rec["ft"],
                    rec["mode"],
                    rec["noise_type"],
                    float(snr) if snr else None,
                    float(rec["wer_percent"]),
                    rec["wer_percent"],
                )
            )
    return rows


def fixture_grids(rows: Sequence[FixtureRow]) -> list[EvalGrid]:
    """Group complete-grid fixture rows into EvalGrids keyed by (model, pt, ft, mode)."""
    keys: list[tuple[str, str, str, str]] = []
    by_key: dict[tuple[str, str, str, str], dict] = {}
    for row in rows:
        key = (row.model, row.pt, row.ft, row.mode)
        if key not in by_key:
            by_key[key] = {"values": {}, "clean": None}
            keys.append(key)
        if row.noise_type == "clean":
            by_key[key]["clean"] = row.wer_percent
        else:
            by_key[key]["values"][(row.noise_type, row.snr_db)] = row.wer_percent
    grids = []
    for key in keys:
        model, pt, ft, mode = key
        data = by_key[key]
        if data["clean"] is None:
            raise IncompleteGrid(f"fixture block {key} lacks a clean row")
        grids.append(
            EvalGrid(
                data["values"],
                data["clean"],
                {"model": model, "pt": pt, "ft": ft, "mode": mode},
            )
        )
    return grids
