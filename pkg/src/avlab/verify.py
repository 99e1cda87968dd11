"""Self-check suite behind `avlab verify`: gradient checks, the SNR oracle,
the WER oracle, k-means optimality on small instances, and the published-table
aggregation figures. Prints one PASS/FAIL line per check."""

from __future__ import annotations

import itertools
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import evaluation, oracles, signal
from .clustering import kmeans_fit
from .features import logmel, mfcc
from .model import AVModel, masked_ce_with_grad, preset, sample_mask
from .training import OptimizerParams, OptimizerState, adam_step
from .util import AvlabError, rng_for, round_half_up


def find_fixtures_dir(explicit: Optional[Path | str] = None) -> Path:
    """Locate fixtures/paper_tables: explicit path, working directory, or the
    repository that contains the installed package."""
    if explicit is not None:
        p = Path(explicit)
        if p.is_file():
            return p.parent
        if p.is_dir():
            return p
        raise AvlabError(f"fixtures path {p} does not exist")
    candidates = [Path.cwd() / "fixtures" / "paper_tables"]
    candidates += [parent / "fixtures" / "paper_tables" for parent in Path(__file__).resolve().parents]
    for cand in candidates:
        if cand.is_dir():
            return cand
    raise AvlabError("cannot locate fixtures/paper_tables; pass --fixtures")


def _check_snr() -> None:
    rng = rng_for("verify_snr")
    for trial in range(200):
        sig = signal.Waveform(rng.normal(0, 0.1, int(rng.integers(2000, 8000))))
        clip = signal.NoiseClip(
            signal.Waveform(rng.normal(0, 0.3, int(rng.integers(1000, 9000)))),
            "music", "music-synth-t000",
        )
        snr = float(rng.choice(signal.SNR_GRID_DB))
        mixed = signal.mix_at_snr(sig, clip, snr, seed=trial)
        measured = oracles.measured_snr_db(sig.samples, mixed.samples - sig.samples)
        if abs(measured - snr) > 1e-6:
            raise AvlabError(f"SNR off by {measured - snr} dB")


def _check_wer() -> None:
    words = ["a", "b", "c"]
    seqs = [list(s) for n in range(4) for s in itertools.product(words, repeat=n)]
    for ref in seqs:
        if not ref:
            continue
        for hyp in seqs:
            got = evaluation.wer(ref, hyp).errors
            want = oracles.alignment_edit_distance(ref, hyp)
            if got != want:
                raise AvlabError(f"wer({ref}, {hyp}) = {got}, oracle {want}")
    count = evaluation.wer("the cat sat".split(), "the bat sat on".split())
    if (count.substitutions, count.insertions, count.deletions) != (1, 1, 0):
        raise AvlabError(f"decomposition {count} != (S=1, I=1, D=0)")


def _check_kmeans() -> None:
    points = np.array([[0.0], [1.0], [10.0], [11.0]])
    cb = kmeans_fit(points, 2, seed=0)
    want_obj, _ = oracles.brute_force_kmeans(points, 2)
    got = sorted(cb.centroids[:, 0])
    if not (abs(got[0] - 0.5) < 1e-9 and abs(got[1] - 10.5) < 1e-9 and abs(want_obj - 0.25) < 1e-12):
        raise AvlabError(f"kmeans centroids {got}, oracle objective {want_obj}")
    rng = rng_for("verify_kmeans")
    for trial in range(12):
        n = int(rng.integers(4, 9))
        k = int(rng.integers(2, 4))
        pts = rng.normal(size=(n, 2))
        cb = kmeans_fit(pts, k, seed=trial)
        d2 = ((pts[:, None, :] - cb.centroids[None]) ** 2).sum(axis=2)
        got_obj = float(np.min(d2, axis=1).mean())
        want_obj, _ = oracles.brute_force_kmeans(pts, k)
        if got_obj > want_obj + 1e-9:
            raise AvlabError(f"instance {trial}: objective {got_obj} > optimal {want_obj}")


def _check_gradients() -> None:
    model = AVModel(preset("toy-small"), seed=3)
    rng = rng_for("verify_grad")
    for name in model.param_names:
        p = model.parameter(name)
        p.value = p.value + rng.normal(0, 0.02, p.value.shape)
    t = 7
    audio = rng.normal(size=(t, 52))
    video = rng.normal(size=(t, 8))
    labels = rng.integers(0, 20, t)
    mask = sample_mask(t, 0.4, 3, seed=2)
    transcript = "ba du"

    def loss_of(m: AVModel) -> float:
        out = m.encode(audio, video, mask, "both")
        l1, _ = masked_ce_with_grad(out.logits, labels, mask)
        l2 = m.decode_loss(out.final, transcript)
        m._enc_cache = None
        m._dec_cache = None
        return l1 + l2

    model.zero_grad()
    out = model.encode(audio, video, mask, "both")
    l1, dlogits = masked_ce_with_grad(out.logits, labels, mask)
    model.decode_loss(out.final, transcript)
    dmem = model.decoder_backward()
    model.encoder_backward(dlogits, dfinal=dmem)
    grads = {k: v.copy() for k, v in model.grads().items()}

    h = 1e-4
    names = model.param_names
    for _ in range(60):
        name = names[int(rng.integers(len(names)))]
        p = model.parameter(name)
        idx = np.unravel_index(int(rng.integers(p.value.size)), p.value.shape)
        orig = p.value[idx]
        p.value[idx] = orig + h
        lp = loss_of(model)
        p.value[idx] = orig - h
        lm = loss_of(model)
        p.value[idx] = orig
        fd = (lp - lm) / (2 * h)
        an = grads[name][idx]
        rel = abs(fd - an) / max(abs(fd) + abs(an), 1e-6)
        if rel > 1e-4:
            raise AvlabError(f"{name}{idx}: fd {fd} vs analytic {an} (rel {rel})")


def _check_adam() -> None:
    params = {"x": np.array([1.0])}
    state = OptimizerState(params, OptimizerParams(base_lr=0.1, warmup_steps=1))
    grads = {"x": np.array([2.0])}  # d/dx x^2 at x=1
    adam_step(params, grads, state)
    if abs(params["x"][0] - 0.9) > 1e-6:
        raise AvlabError(f"adam first step gave {params['x'][0]}, want 0.9")


def _check_dct() -> None:
    rng = rng_for("verify_dct")
    x = rng.normal(size=(3, 26))
    ours = mfcc(logmel(signal.Waveform(rng.normal(0, 0.1, 16000))))
    direct = oracles.dct2_direct(x)
    if abs(float((direct**2).sum() - (x**2).sum())) > 1e-9:
        raise AvlabError("direct DCT violates Parseval")
    from scipy.fft import dct as scipy_dct

    if not np.allclose(scipy_dct(x, type=2, norm="ortho", axis=-1), direct, atol=1e-9):
        raise AvlabError("production DCT disagrees with the cosine-sum oracle")
    if ours.data.shape[1] != 13:
        raise AvlabError("mfcc must keep 13 coefficients")


def _check_logmel_framecount() -> None:
    frames = logmel(signal.Waveform(np.full(16000, 0.05))).data.shape[0]
    if frames != (16000 - 400) // 160 + 1:
        raise AvlabError(f"1 s of audio gave {frames} frames")


def _check_aggregation(fixtures: Path) -> None:
    rows = evaluation.load_fixture_rows(fixtures / "table4_large.csv")
    grids = {(g.metadata["pt"], g.metadata["ft"], g.metadata["mode"]): g
             for g in evaluation.fixture_grids(rows)}
    for key, want in ((("noisy", "433h", "AV"), 5.8), (("noisy", "30h", "AV"), 7.8)):
        got = round_half_up(evaluation.aggregate(grids[key])["n_wer"], 1)
        if abs(got - want) > 0.1 + 1e-9:
            raise AvlabError(f"N-WER for {key}: {got} vs published {want}")
    t2 = evaluation.load_fixture_rows(fixtures / "table2_main.csv")
    for ft, want in (("30h", 14.1), ("433h", 12.4)):
        cells = [r.wer_percent for r in t2
                 if r.model == "avhubert" and r.mode == "AV" and r.ft == ft and r.noise_type == "babble"]
        got = round_half_up(float(np.mean(cells)), 1)
        if abs(got - want) > 0.1 + 1e-9:
            raise AvlabError(f"babble avg for {ft}: {got} vs published {want}")
    for baseline, ours, want in ((28.0, 14.1, 49.6), (28.0, 12.4, 55.7), (42.5, 8.3, 80.4), (25.5, 8.3, 67.4)):
        got = round_half_up(evaluation.relative_reduction(baseline, ours), 1)
        if abs(got - want) > 0.1 + 1e-9:
            raise AvlabError(f"relative reduction {baseline}->{ours}: {got} vs published {want}")


def run_verify(fixtures: Optional[Path | str] = None) -> bool:
    checks: list[tuple[str, Callable[[], None]]] = [
        ("snr-exactness", _check_snr),
        ("wer-alignment-oracle", _check_wer),
        ("kmeans-optimality", _check_kmeans),
        ("gradient-finite-difference", _check_gradients),
        ("adam-scalar-oracle", _check_adam),
        ("dct-orthonormality", _check_dct),
        ("logmel-frame-count", _check_logmel_framecount),
        ("published-aggregation", lambda: _check_aggregation(find_fixtures_dir(fixtures))),
    ]
    all_ok = True
    for name, check in checks:
        try:
            check()
            print(f"PASS {name}")
        except Exception as exc:  # report and continue
            all_ok = False
            print(f"FAIL {name}: {exc}")
    return all_ok
