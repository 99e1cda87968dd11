"""Command-line entry point: data generation, training, clustering, evaluation,
reporting, verification, and the experiment matrix runner.

Exit codes: 0 success, 1 usage error, 2 data/config error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .util import AvlabError, NumericalError, config_hash


def _write_run_header(out_dir: Path, command: str, cfg_obj, seed) -> None:
    """Reproducibility header: config hash, seed, versions. No timestamps, so
    reruns stay byte-identical."""
    out_dir.mkdir(parents=True, exist_ok=True)
    header = {
        "command": command,
        "config_hash": config_hash(cfg_obj) if cfg_obj is not None else None,
        "seed": seed,
        "versions": {
            "avlab": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
    }
    (out_dir / "run_header.json").write_text(
        json.dumps(header, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="avlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic audio-visual corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--dry-run", action="store_true")

    p = sub.add_parser("gen-noise", help="generate the four-category noise corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--dry-run", action="store_true")

    p = sub.add_parser("pretrain", help="iterative masked-prediction pretraining")
    p.add_argument("--config", required=True)
    p.add_argument("--data", help="corpus directory (from gen-data)")
    p.add_argument("--noise-dir", help="noise directory (from gen-noise)")
    p.add_argument("--out", required=True)
    p.add_argument("--dry-run", action="store_true")

    p = sub.add_parser("cluster", help="refit a codebook from encoder features")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--iteration", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("finetune", help="noise-augmented seq2seq finetuning")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--noise-dir", required=True)
    p.add_argument("--ckpt", default=None, help="pretrained checkpoint; omit to train from scratch")
    p.add_argument("--mode", choices=["A", "AV"], default="AV")
    p.add_argument("--labels", choices=["low", "mid"], default="low")
    p.add_argument("--out", required=True)
    p.add_argument("--dry-run", action="store_true")

    p = sub.add_parser("eval", help="noise-type x SNR WER grid for a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--noise-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", help="render grids or published-table fixtures")
    p.add_argument("--fixtures", help="fixture CSV (or directory) of transcribed tables")
    p.add_argument("--grids", nargs="+", help="grid.json or grids.csv files from runs")
    p.add_argument("--plot", action="store_true", help="also write an SVG bar chart")
    p.add_argument("--out", default=None)

    p = sub.add_parser("verify", help="run the invariant self-check suite")
    p.add_argument("--fixtures", default=None)

    p = sub.add_parser("experiment", help="run a PT x mode x labels experiment matrix")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dry-run", action="store_true")

    return parser


def _corpus_spec_from(config: str | None, seed: int | None):
    from .corpus import CorpusSpec
    from .experiment import parse_experiment_config

    if config:
        spec = parse_experiment_config(config).corpus
    else:
        spec = CorpusSpec()
    if seed is not None:
        from dataclasses import replace

        spec = replace(spec, seed=seed)
    return spec


def _noise_spec_from(config: str | None, seed: int | None):
    from .corpus import NoiseCorpusSpec
    from .experiment import parse_experiment_config

    if config:
        spec = parse_experiment_config(config).noise
    else:
        spec = NoiseCorpusSpec()
    if seed is not None:
        from dataclasses import replace

        spec = replace(spec, seed=seed)
    return spec


def _cmd_gen_data(args) -> int:
    from .corpus import gen_corpus

    spec = _corpus_spec_from(args.config, args.seed)
    if args.dry_run:
        print(f"gen-data plan: {spec.to_dict()} -> {args.out}")
        return 0
    out = Path(args.out)
    _write_run_header(out, "gen-data", spec.to_dict(), spec.seed)
    gen_corpus(spec, out)
    print(f"corpus written to {out}")
    return 0


def _cmd_gen_noise(args) -> int:
    from .corpus import gen_noise_corpus

    spec = _noise_spec_from(args.config, args.seed)
    if args.dry_run:
        print(f"gen-noise plan: {spec.to_dict()} -> {args.out}")
        return 0
    out = Path(args.out)
    _write_run_header(out, "gen-noise", spec.to_dict(), spec.seed)
    manifest = gen_noise_corpus(spec, out)
    print(f"noise manifest written to {manifest}")
    return 0


def _cmd_pretrain(args) -> int:
    from .corpus import AVCorpus
    from .experiment import parse_experiment_config
    from .signal import NoiseManifest
    from .training import pretrain

    cfg = parse_experiment_config(args.config).pretrain
    if args.dry_run:
        print(f"pretrain plan: {cfg.to_dict()} -> {args.out}")
        return 0
    if not args.data:
        raise AvlabError("--data is required unless --dry-run")
    corpus = AVCorpus(args.data)
    manifest = None
    if cfg.pretrain_noise:
        if not args.noise_dir:
            raise AvlabError("--noise-dir is required when pretraining with noise")
        manifest = NoiseManifest.open(Path(args.noise_dir) / "noise_manifest.tsv")
    out = Path(args.out)
    _write_run_header(out, "pretrain", cfg.to_dict(), cfg.seed)
    ckpts = pretrain(cfg, corpus, manifest, out)
    print("\n".join(str(c) for c in ckpts))
    return 0


def _cmd_cluster(args) -> int:
    from .clustering import refit_from_encoder, write_codebook
    from .corpus import AVCorpus

    corpus = AVCorpus(args.data)
    cb = refit_from_encoder(args.ckpt, args.layer, corpus, "pretrain", args.k, args.seed, args.iteration)
    out = Path(args.out)
    _write_run_header(out, "cluster", {"layer": args.layer, "k": args.k}, args.seed)
    path = out / f"codebook_iter{args.iteration}.kmc"
    write_codebook(path, cb)
    print(f"codebook ({cb.source}) written to {path}")
    return 0


def _cmd_finetune(args) -> int:
    from dataclasses import replace

    from .corpus import AVCorpus
    from .experiment import parse_experiment_config
    from .signal import NoiseManifest
    from .training import finetune

    exp = parse_experiment_config(args.config)
    if args.labels not in exp.finetune:
        raise AvlabError(f"config has no [finetune.{args.labels}] section")
    cfg = replace(exp.finetune[args.labels], input_mode=args.mode)
    if args.dry_run:
        print(f"finetune plan: {cfg.to_dict()} ckpt={args.ckpt} -> {args.out}")
        return 0
    corpus = AVCorpus(args.data)
    manifest = NoiseManifest.open(Path(args.noise_dir) / "noise_manifest.tsv")
    out = Path(args.out)
    _write_run_header(out, "finetune", cfg.to_dict(), cfg.seed)
    ckpt = finetune(cfg, args.ckpt, corpus, manifest, out)
    print(str(ckpt))
    return 0


def _cmd_eval(args) -> int:
    from .corpus import AVCorpus
    from .evaluation import aggregate, eval_grid, render_report
    from .signal import NoiseManifest
    from .util import round_half_up

    corpus = AVCorpus(args.data)
    manifest = NoiseManifest.open(Path(args.noise_dir) / "noise_manifest.tsv")
    grid = eval_grid(args.ckpt, corpus, manifest, seed=args.seed)
    out = Path(args.out)
    _write_run_header(out, "eval", {"ckpt": str(args.ckpt)}, args.seed)
    (out / "grid.csv").write_text(render_report([grid], "csv"), encoding="utf-8")
    report = render_report([grid], "text")
    (out / "grid.txt").write_text(report, encoding="utf-8")
    summary = aggregate(grid)
    print(report)
    print(f"N-WER {round_half_up(summary['n_wer'], 1):.1f}  C-WER {round_half_up(summary['c_wer'], 1):.1f}")
    return 0


def _cmd_report(args) -> int:
    from .evaluation import aggregate, fixture_grids, load_fixture_rows, render_report, render_svg
    from .util import round_half_up
    from .verify import find_fixtures_dir

    if not args.fixtures and not args.grids:
        raise AvlabError("report needs --fixtures or --grids")
    grids = []
    if args.fixtures:
        path = Path(args.fixtures)
        if path.is_dir():
            path = find_fixtures_dir(path) / "table4_large.csv"
        grids += fixture_grids(load_fixture_rows(path))
    for grid_path in args.grids or []:
        grid_path = Path(grid_path)
        if grid_path.suffix == ".json":
            from .experiment import _load_grid

            grids.append(_load_grid(grid_path))
        else:
            grids += fixture_grids(load_fixture_rows(grid_path))
    corpus_hashes = {g.metadata["corpus_hash"] for g in grids if "corpus_hash" in g.metadata}
    if len(corpus_hashes) > 1:
        raise AvlabError(f"refusing to merge grids from different corpora: {sorted(corpus_hashes)}")
    complete = []
    for g in grids:
        try:
            g.require_complete()
            complete.append(g)
        except AvlabError:
            continue  # summary-only fixtures (e.g. merged noise columns) are skipped
    print(render_report(complete, "text"))
    print("N-WER summary:")
    for g in complete:
        md = g.metadata
        summary = aggregate(g)
        print(
            f"  pt={md['pt']:<6} ft={md['ft']:<5} mode={md['mode']:<3} "
            f"C-WER {round_half_up(summary['c_wer'], 1):>5.1f}  N-WER {round_half_up(summary['n_wer'], 1):>5.1f}"
        )
    if args.plot:
        out = Path(args.out) if args.out else Path.cwd()
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.svg").write_text(render_svg(complete), encoding="utf-8")
        print(f"plot written to {out / 'report.svg'}")
    return 0


def _cmd_verify(args) -> int:
    from .verify import run_verify

    return 0 if run_verify(args.fixtures) else 3


def _cmd_experiment(args) -> int:
    from .experiment import ExperimentRunner, parse_experiment_config

    cfg = parse_experiment_config(args.config)
    if args.dry_run:
        print(f"experiment plan: cells={cfg.cells()}")
        print(f"corpus={cfg.corpus.to_dict()}")
        print(f"pretrain={cfg.pretrain.to_dict()}")
        return 0
    out = Path(args.out)
    _write_run_header(
        out, "experiment",
        {"corpus": cfg.corpus.to_dict(), "pretrain": cfg.pretrain.to_dict(),
         "cells": [list(c) for c in cfg.cells()]},
        cfg.pretrain.seed,
    )
    runner = ExperimentRunner(cfg, out)
    grids = runner.run()
    print((out / "summary.tsv").read_text(encoding="utf-8"))
    print(f"{len(grids)} grids; stages built this run: {len(runner.built)}")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "gen-noise": _cmd_gen_noise,
    "pretrain": _cmd_pretrain,
    "cluster": _cmd_cluster,
    "finetune": _cmd_finetune,
    "eval": _cmd_eval,
    "report": _cmd_report,
    "verify": _cmd_verify,
    "experiment": _cmd_experiment,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1  # argparse uses 2 for usage errors
    try:
        return _COMMANDS[args.command](args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except AvlabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
