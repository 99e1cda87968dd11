"""Checkpoint container: magic AVCK, format version, the architecture as a
key=value block, named f32 tensors, and a trailing CRC32 over everything."""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from ..util import AvlabError
from .config import ArchConfig

_MAGIC = b"AVCK"
_VERSION = 1
_ARCH_KEYS = set(ArchConfig(2, 1, 1, 1, 2).to_dict())


class CheckpointError(AvlabError):
    """Unreadable or corrupted checkpoint file."""


def save_checkpoint(
    path: Path | str,
    cfg: ArchConfig,
    store: dict[str, np.ndarray],
    meta: dict[str, str] | None = None,
) -> None:
    lines = [f"{k}={v}" for k, v in cfg.to_dict().items()]
    for k, v in sorted((meta or {}).items()):
        if k in _ARCH_KEYS:
            raise CheckpointError(f"meta key {k!r} collides with an architecture field")
        lines.append(f"{k}={v}")
    header = "\n".join(lines).encode("utf-8")

    parts = [_MAGIC, struct.pack("<I", _VERSION), struct.pack("<I", len(header)), header]
    parts.append(struct.pack("<I", len(store)))
    for name in store:  # insertion order; stores built from one model are stable
        blob = name.encode("utf-8")
        tensor = np.ascontiguousarray(store[name], dtype="<f4")
        parts.append(struct.pack("<I", len(blob)))
        parts.append(blob)
        parts.append(struct.pack("<I", tensor.ndim))
        parts.append(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        parts.append(tensor.tobytes())
    body = b"".join(parts)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path: Path | str) -> tuple[ArchConfig, dict[str, np.ndarray], dict[str, str]]:
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:4] != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: CRC mismatch")
    (version,) = struct.unpack("<I", body[4:8])
    if version != _VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (header_len,) = struct.unpack("<I", body[8:12])
    pos = 12
    header = body[pos : pos + header_len].decode("utf-8")
    pos += header_len

    arch: dict[str, str] = {}
    meta: dict[str, str] = {}
    for line in header.splitlines():
        key, value = line.split("=", 1)
        (arch if key in _ARCH_KEYS else meta)[key] = value
    cfg = ArchConfig.from_dict(arch)

    (n_tensors,) = struct.unpack("<I", body[pos : pos + 4])
    pos += 4
    store: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack("<I", body[pos : pos + 4])
        pos += 4
        name = body[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack("<I", body[pos : pos + 4])
        pos += 4
        dims = struct.unpack(f"<{rank}I", body[pos : pos + 4 * rank])
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(body[pos : pos + 4 * count], dtype="<f4")
        pos += 4 * count
        store[name] = data.reshape(dims).astype(np.float64)
    return cfg, store, meta
