"""Experiment matrix runner: pretrain/finetune/eval cells over PT x input-mode
x label-set conditions, with config-hash-keyed caching of every stage.

Config files are line-oriented `key = value` INI with sections [corpus],
[noise], [pretrain], [finetune.<labels>], [eval], and [experiment].
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from configparser import ConfigParser
from pathlib import Path
from typing import Callable, Optional

from .corpus import AVCorpus, CorpusSpec, NoiseCorpusSpec, gen_corpus, gen_noise_corpus
from .evaluation import EvalGrid, aggregate, eval_grid, render_report, render_svg
from .signal import NoiseManifest, NoisePolicy
from .training import FinetuneConfig, OptimizerParams, PretrainConfig, finetune, pretrain
from .model import ModalityDropout
from .util import AvlabError, config_hash, round_half_up

PT_TYPES = ("none", "clean", "noisy")
MODES = ("A", "AV")
LABEL_SETS = ("low", "mid")


class CacheCorruption(AvlabError):
    """A cache directory exists but its recorded config hash disagrees."""


@dataclass(frozen=True)
class ExperimentConfig:
    corpus: CorpusSpec
    noise: NoiseCorpusSpec
    pretrain: PretrainConfig
    finetune: dict[str, FinetuneConfig]  # keyed by label set
    pts: tuple[str, ...] = PT_TYPES
    modes: tuple[str, ...] = MODES
    labels: tuple[str, ...] = ("low",)
    eval_seed: int = 0
    eval_max_len_factor: float = 3.0

    def __post_init__(self):
        for pt in self.pts:
            if pt not in PT_TYPES:
                raise AvlabError(f"unknown PT type {pt!r}")
        for mode in self.modes:
            if mode not in MODES:
                raise AvlabError(f"unknown mode {mode!r}")
        for lab in self.labels:
            if lab not in self.finetune:
                raise AvlabError(f"no [finetune.{lab}] section for label set {lab!r}")

    def cells(self) -> list[tuple[str, str, str]]:
        return [(pt, mode, lab) for lab in self.labels for pt in self.pts for mode in self.modes]


def _coerce(value: str, like):
    if isinstance(like, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value


def _section(parser: ConfigParser, name: str) -> dict[str, str]:
    return dict(parser[name]) if parser.has_section(name) else {}


def _build_policy(section: dict[str, str], defaults: NoisePolicy) -> NoisePolicy:
    return NoisePolicy(
        apply_probability=float(section.get("noise_p", defaults.apply_probability)),
        snr_db=float(section.get("noise_snr_db", defaults.snr_db)),
        categories=tuple(
            s.strip() for s in section.get("noise_categories", ",".join(defaults.categories)).split(",")
        ),
        seed=int(section.get("noise_seed", defaults.seed)),
    )


def _build_optimizer(section: dict[str, str], defaults: OptimizerParams) -> OptimizerParams:
    return OptimizerParams(
        base_lr=float(section.get("base_lr", defaults.base_lr)),
        warmup_steps=int(section.get("warmup_steps", defaults.warmup_steps)),
    )


def parse_experiment_config(path: Path | str) -> ExperimentConfig:
    parser = ConfigParser(inline_comment_prefixes=("#",))
    parser.optionxform = str
    with open(path, encoding="utf-8") as f:
        parser.read_file(f)

    c = _section(parser, "corpus")
    corpus_spec = CorpusSpec(
        n_speakers=int(c.get("n_speakers", 40)),
        utterances_per_speaker=int(c.get("utterances_per_speaker", 36)),
        len_bounds_s=(float(c.get("len_lo_s", 2.0)), float(c.get("len_hi_s", 8.0))),
        partition_fractions=tuple(
            float(x) for x in c.get("partition_fractions", "0.725,0.125,0.075,0.075").split(",")
        ),
        seed=int(c.get("seed", 0)),
        label_fraction_low=float(c.get("label_fraction_low", 0.069)),
        n_symbols=int(c.get("n_symbols", 12)),
    )
    n = _section(parser, "noise")
    noise_spec = NoiseCorpusSpec(
        total_train_s=float(n.get("total_train_s", 333.0)),
        total_eval_s=float(n.get("total_eval_s", 39.0)),
        clip_len_bounds_s=(float(n.get("clip_lo_s", 3.0)), float(n.get("clip_hi_s", 8.0))),
        seed=int(n.get("seed", 0)),
        n_symbols=corpus_spec.n_symbols,
    )
    p = _section(parser, "pretrain")
    pretrain_cfg = PretrainConfig(
        iterations=int(p.get("iterations", 2)),
        steps=int(p.get("steps", 400)),
        batch_frames_cap=int(p.get("batch_frames_cap", 1000)),
        noise=_build_policy(p, NoisePolicy()),
        # the matrix runner overrides this per PT condition
        pretrain_noise=p.get("pretrain_noise", "true").strip().lower() in ("1", "true", "yes", "on"),
        mask_start_prob=float(p.get("mask_start_prob", 0.08)),
        mask_span=int(p.get("mask_span", 10)),
        dropout=ModalityDropout.with_p_both(float(p.get("p_both", 0.5))),
        optimizer=_build_optimizer(p, OptimizerParams()),
        seed=int(p.get("seed", 0)),
        n_clusters=int(p.get("n_clusters", 20)),
        refit_layer=int(p["refit_layer"]) if "refit_layer" in p else None,
        iteration_presets=tuple(s.strip() for s in p.get("presets", "toy-small,toy").split(",")),
    )
    finetune_cfgs = {}
    for labels in LABEL_SETS:
        sec_name = f"finetune.{labels}"
        if not parser.has_section(sec_name):
            continue
        s = _section(parser, sec_name)
        finetune_cfgs[labels] = FinetuneConfig(
            labels=labels,
            steps=int(s.get("steps", 3000 if labels == "low" else 10000)),
            freeze_steps=int(s["freeze_steps"]) if "freeze_steps" in s else None,
            batch_frames_cap=int(s.get("batch_frames_cap", 1000)),
            noise=_build_policy(s, NoisePolicy()),
            finetune_noise=s.get("finetune_noise", "true").strip().lower() in ("1", "true", "yes", "on"),
            input_mode="AV",  # set per cell by the runner
            optimizer=_build_optimizer(s, OptimizerParams()),
            seed=int(s.get("seed", 0)),
            preset=s.get("preset", "toy"),
        )
    if not finetune_cfgs:
        finetune_cfgs["low"] = FinetuneConfig(labels="low")

    e = _section(parser, "experiment")
    ev = _section(parser, "eval")
    return ExperimentConfig(
        corpus=corpus_spec,
        noise=noise_spec,
        pretrain=pretrain_cfg,
        finetune=finetune_cfgs,
        pts=tuple(s.strip() for s in e.get("pt", "none,clean,noisy").split(",")),
        modes=tuple(s.strip() for s in e.get("modes", "A,AV").split(",")),
        labels=tuple(s.strip() for s in e.get("labels", "low").split(",")),
        eval_seed=int(ev.get("seed", 0)),
        eval_max_len_factor=float(ev.get("max_len_factor", 3.0)),
    )


# ---------------------------------------------------------------------------
# Cached stages
# ---------------------------------------------------------------------------

_STAMP = "STAGE_OK.json"


class ExperimentRunner:
    def __init__(self, config: ExperimentConfig, out_dir: Path | str):
        self.config = config
        self.out = Path(out_dir)
        self.cache = self.out / "cache"
        self.cache.mkdir(parents=True, exist_ok=True)
        self.built: list[str] = []  # stage names actually built this run

    def _stage(self, name: str, key: dict, artifacts: list[str], builder: Callable[[Path], None]) -> Path:
        """Run or reuse a cached stage keyed by its config hash."""
        h = config_hash(key)
        stage_dir = self.cache / f"{name}-{h}"
        stamp = stage_dir / _STAMP
        if stage_dir.exists():
            if stamp.exists():
                recorded = json.loads(stamp.read_text(encoding="utf-8"))
                if recorded.get("hash") != h:
                    raise CacheCorruption(f"stage {name}: recorded hash {recorded.get('hash')} != {h}")
                if all((stage_dir / a).exists() for a in recorded.get("artifacts", [])):
                    return stage_dir
            # stale or partially deleted: rebuild in place
            for child in sorted(stage_dir.rglob("*"), reverse=True):
                child.unlink() if child.is_file() else child.rmdir()
        stage_dir.mkdir(parents=True, exist_ok=True)
        builder(stage_dir)
        stamp.write_text(
            json.dumps({"hash": h, "key": key, "artifacts": artifacts}, indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
        self.built.append(name)
        return stage_dir

    def run(self) -> dict[tuple[str, str, str], EvalGrid]:
        cfg = self.config
        corpus_key = {"stage": "corpus", "spec": cfg.corpus.to_dict()}
        corpus_dir = self._stage(
            "corpus", corpus_key, ["corpus_meta.json", "pretrain.tsv"],
            lambda d: gen_corpus(cfg.corpus, d),
        )
        corpus = AVCorpus(corpus_dir)

        noise_key = {"stage": "noise", "spec": cfg.noise.to_dict()}
        noise_dir = self._stage(
            "noise", noise_key, ["noise_manifest.tsv"],
            lambda d: gen_noise_corpus(cfg.noise, d),
        )
        noise_manifest = NoiseManifest.open(noise_dir / "noise_manifest.tsv")

        pretrain_dirs: dict[str, Optional[Path]] = {"none": None}
        for pt in cfg.pts:
            if pt == "none" or pt in pretrain_dirs:
                continue
            pt_cfg = _replace_dataclass(cfg.pretrain, pretrain_noise=(pt == "noisy"))
            key = {"stage": "pretrain", "config": pt_cfg.to_dict(),
                   "corpus": corpus_key, "noise": noise_key if pt == "noisy" else None}
            last = f"pretrain_iter{pt_cfg.iterations}.avck"
            pretrain_dirs[pt] = self._stage(
                f"pretrain-{pt}", key, [last],
                lambda d, c=pt_cfg: pretrain(c, corpus, noise_manifest, d),
            )

        grids: dict[tuple[str, str, str], EvalGrid] = {}
        for pt, mode, labels in cfg.cells():
            ft_cfg = _replace_dataclass(cfg.finetune[labels], input_mode=mode)
            pt_dir = pretrain_dirs[pt]
            pt_ckpt = None if pt_dir is None else pt_dir / f"pretrain_iter{cfg.pretrain.iterations}.avck"
            ft_key = {"stage": "finetune", "config": ft_cfg.to_dict(), "pt": pt,
                      "corpus": corpus_key, "noise": noise_key,
                      "pretrain": None if pt == "none" else json.loads((pt_dir / _STAMP).read_text())["hash"]}
            ft_dir = self._stage(
                f"finetune-{pt}-{mode}-{labels}", ft_key, ["finetune.avck"],
                lambda d, c=ft_cfg, ck=pt_ckpt: finetune(c, ck, corpus, noise_manifest, d),
            )

            eval_key = {"stage": "eval", "seed": cfg.eval_seed, "max_len_factor": cfg.eval_max_len_factor,
                        "finetune": json.loads((ft_dir / _STAMP).read_text())["hash"]}

            def build_eval(d: Path, ft_dir=ft_dir) -> None:
                grid = eval_grid(
                    ft_dir / "finetune.avck", corpus, noise_manifest,
                    seed=cfg.eval_seed, max_len_factor=cfg.eval_max_len_factor,
                )
                payload = {
                    "values": {f"{t}|{s:g}": v for (t, s), v in grid.values.items()},
                    "clean": grid.clean,
                    "metadata": grid.metadata,
                }
                (d / "grid.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")

            eval_dir = self._stage(f"eval-{pt}-{mode}-{labels}", eval_key, ["grid.json"], build_eval)
            grids[(pt, mode, labels)] = _load_grid(eval_dir / "grid.json")

        self._write_reports(grids)
        return grids

    def _write_reports(self, grids: dict[tuple[str, str, str], EvalGrid]) -> None:
        ordered = [grids[cell] for cell in self.config.cells()]
        (self.out / "report.txt").write_text(render_report(ordered, "text"), encoding="utf-8")
        (self.out / "grids.csv").write_text(render_report(ordered, "csv"), encoding="utf-8")
        (self.out / "report.svg").write_text(render_svg(ordered), encoding="utf-8")
        lines = ["labels\tpt\tA_c_wer\tA_n_wer\tAV_c_wer\tAV_n_wer"]
        for labels in self.config.labels:
            for pt in self.config.pts:
                row = [labels, pt]
                for mode in ("A", "AV"):
                    if (pt, mode, labels) in grids:
                        summary = aggregate(grids[(pt, mode, labels)])
                        row += [f"{round_half_up(summary['c_wer'], 1):.1f}",
                                f"{round_half_up(summary['n_wer'], 1):.1f}"]
                    else:
                        row += ["-", "-"]
                lines.append("\t".join(row))
        (self.out / "summary.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _replace_dataclass(obj, **changes):
    from dataclasses import replace

    return replace(obj, **changes)


def _load_grid(path: Path) -> EvalGrid:
    payload = json.loads(path.read_text(encoding="utf-8"))
    values = {}
    for key, v in payload["values"].items():
        t, s = key.split("|")
        values[(t, float(s))] = v
    return EvalGrid(values, payload["clean"], payload["metadata"])
