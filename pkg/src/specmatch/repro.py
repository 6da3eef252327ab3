"""Seed derivation and reproducibility stamps.

All randomness in an experiment derives from one root seed. A stage asks
for ``derive_seed(root, stage, index)``: the stage name is mapped to its
CRC-32, and ``numpy.random.SeedSequence(root, spawn_key=(crc, index))``
produces the child seed. Distinct (stage, index) keys give independent
streams; the same keys always give the same stream.
"""

from __future__ import annotations

import hashlib
import json
import zlib

import numpy as np

__all__ = ["derive_seed", "config_hash", "make_stamp"]


def _key(k):
    if isinstance(k, str):
        return zlib.crc32(k.encode("utf-8"))
    return int(k)


def derive_seed(root, *keys) -> int:
    """63-bit child seed of ``root`` for the given stage keys."""
    ss = np.random.SeedSequence(int(root), spawn_key=tuple(_key(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0]) >> 1


def config_hash(config) -> str:
    """Short SHA-256 of a JSON-able configuration mapping."""
    blob = json.dumps(config, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def make_stamp(config=None, seed=None) -> dict:
    from . import __version__

    return {
        "tool": "specmatch",
        "version": __version__,
        "config_hash": config_hash(config or {}),
        "seed": seed,
    }
