"""Shared helpers: seeded RNG derivation and small JSON I/O."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np


def derive_rng(seed: int, *keys) -> np.random.Generator:
    """Build an independent generator from a root seed and a tag path.

    String tags are hashed so the derivation is stable across processes,
    unlike Python's builtin hash().
    """
    ints = [int(seed)]
    for key in keys:
        if isinstance(key, str):
            digest = hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest()
            ints.append(int.from_bytes(digest, "little"))
        else:
            ints.append(int(key))
    return np.random.default_rng(np.random.SeedSequence(ints))


def derive_seed(seed: int, *keys) -> int:
    """A 63-bit integer seed derived like derive_rng, for torch generators."""
    rng = derive_rng(seed, *keys)
    return int(rng.integers(0, 2**63 - 1))


def read_json(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
