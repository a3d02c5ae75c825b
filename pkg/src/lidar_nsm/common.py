"""Seed streams and content hashing shared across modules."""

from __future__ import annotations

import hashlib
import zlib
from pathlib import Path

import numpy as np


def _key(name) -> int:
    if isinstance(name, (int, np.integer)):
        return int(name)
    return zlib.crc32(str(name).encode("utf-8"))


def seed_sequence(seed: int, *names) -> np.random.SeedSequence:
    """Named sub-stream of a top-level seed: ``seed_sequence(7, "real", 12)``."""
    return np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(n) for n in names))


def rng(seed: int, *names) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, *names)))


def sub_seed(seed: int, *names) -> int:
    """63-bit integer seed derived from a named stream (for torch generators)."""
    word = int(seed_sequence(seed, *names).generate_state(1, np.uint64)[0])
    return word & 0x7FFF_FFFF_FFFF_FFFF


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
