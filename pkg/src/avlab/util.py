"""Shared plumbing: deterministic seeding, config hashing, rounding, thread caps."""

from __future__ import annotations

import hashlib
import json
import os
from decimal import ROUND_HALF_UP, Decimal

import numpy as np


class AvlabError(Exception):
    """Base class for data/config errors (CLI exit code 2)."""


class NumericalError(AvlabError):
    """Numerical failure such as a non-finite loss (CLI exit code 3)."""


def seed_material(*parts) -> list[int]:
    """Hash an arbitrary key tuple (ints, strings, floats) into four u32 words."""
    h = hashlib.sha256()
    for part in parts:
        h.update(repr(part).encode("utf-8"))
        h.update(b"\x1f")
    digest = h.digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


def rng_for(*parts) -> np.random.Generator:
    """Deterministic generator derived from a key tuple; stable across runs and platforms."""
    return np.random.default_rng(np.random.SeedSequence(seed_material(*parts)))


def derive_int(*parts) -> int:
    """Deterministic 63-bit integer seed derived from a key tuple."""
    return int(rng_for(*parts).integers(2**63))


def config_hash(obj) -> str:
    """Short stable hash of a JSON-serializable config mapping."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def round_half_up(x: float, ndigits: int = 1) -> float:
    """Decimal rounding with ties away from zero (table rendering rule)."""
    q = Decimal(1).scaleb(-ndigits)
    return float(Decimal(repr(float(x))).quantize(q, rounding=ROUND_HALF_UP))


def worker_count() -> int:
    """Parallelism cap: AVLAB_THREADS if set, else machine cores."""
    env = os.environ.get("AVLAB_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1
