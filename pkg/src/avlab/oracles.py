"""Independent reference implementations used by `avlab verify` and the test
suite. These deliberately avoid the production code paths they check."""

from __future__ import annotations

from functools import lru_cache
from itertools import product
from typing import Sequence

import numpy as np


def alignment_edit_distance(ref: Sequence[str], hyp: Sequence[str]) -> int:
    """Minimum edits over all monotone alignments, by direct recursion on the
    three alignment moves (match/substitute, insert, delete)."""

    ref = tuple(ref)
    hyp = tuple(hyp)

    @lru_cache(maxsize=None)
    def best(i: int, j: int) -> int:
        if i == len(ref):
            return len(hyp) - j  # remaining hypothesis words are insertions
        if j == len(hyp):
            return len(ref) - i  # remaining reference words are deletions
        step = 0 if ref[i] == hyp[j] else 1
        return min(step + best(i + 1, j + 1), 1 + best(i, j + 1), 1 + best(i + 1, j))

    return best(0, 0)


def brute_force_kmeans(points: np.ndarray, k: int) -> tuple[float, np.ndarray]:
    """Globally optimal k-means objective by enumerating every assignment of
    points to k clusters (centroids are cluster means). Returns (objective,
    assignment); objective is the mean squared distance."""
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    best_obj = np.inf
    best_assign = None
    for assign in product(range(k), repeat=n):
        assign = np.array(assign)
        total = 0.0
        ok = True
        for c in range(k):
            members = points[assign == c]
            if members.shape[0] == 0:
                ok = False  # empty clusters never beat the optimum for k <= n distinct
                break
            centroid = members.mean(axis=0)
            total += float(np.sum((members - centroid) ** 2))
        if ok and total < best_obj:
            best_obj = total
            best_assign = assign
    return best_obj / n, best_assign


def dct2_direct(x: np.ndarray) -> np.ndarray:
    """Orthonormal DCT-II along the last axis by the explicit cosine sum."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    k = np.arange(n)[:, None]
    m = np.arange(n)[None, :]
    basis = np.cos(np.pi * (2 * m + 1) * k / (2 * n))
    scale = np.full(n, np.sqrt(2.0 / n))
    scale[0] = np.sqrt(1.0 / n)
    return (x @ basis.T) * scale


def measured_snr_db(signal: np.ndarray, added: np.ndarray) -> float:
    """SNR of an additive component: 10*log10(P_signal / P_added)."""
    return 10.0 * np.log10(np.mean(signal**2) / np.mean(added**2))
