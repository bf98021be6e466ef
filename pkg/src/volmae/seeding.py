"""Deterministic seed derivation and counter-based RNG construction.

Every random choice in the package flows through an explicit integer seed.
Child streams are derived from (root seed, path) pairs so that results are
independent of execution order and worker count. Philox is counter-based,
which keeps streams platform-stable.
"""

from __future__ import annotations

import zlib

import numpy as np


def _path_ints(path: tuple) -> tuple[int, ...]:
    out = []
    for p in path:
        if isinstance(p, str):
            out.append(zlib.crc32(p.encode("utf-8")))
        elif isinstance(p, (int, np.integer)):
            out.append(int(p) & 0xFFFFFFFF)
        else:
            raise TypeError(f"seed path elements must be str or int, got {type(p)!r}")
    return tuple(out)


def derive_seed(root: int, *path) -> int:
    """Derive a stable 64-bit child seed from a root seed and a path."""
    ss = np.random.SeedSequence(entropy=int(root), spawn_key=_path_ints(path))
    lo, hi = ss.generate_state(2, dtype=np.uint32)
    return int(hi) << 32 | int(lo)


def rng_from(root: int, *path) -> np.random.Generator:
    """Counter-based generator for the stream identified by (root, path)."""
    ss = np.random.SeedSequence(entropy=int(root), spawn_key=_path_ints(path))
    return np.random.Generator(np.random.Philox(seed=ss))


def as_rng(seed) -> np.random.Generator:
    """Accept an int seed or a ready Generator and return a Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return rng_from(int(seed))
