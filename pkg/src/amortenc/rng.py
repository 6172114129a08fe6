"""Deterministic random streams.

All randomness in the package flows through counter-based Philox
generators keyed by explicit 64-bit seeds, so runs are reproducible
bit-for-bit on a given platform and numpy version.  ``subseed`` derives
independent child seeds from a parent seed plus string/integer tags,
which keeps unrelated components (model init, per-task batch iterators,
per-fold protocol seeds) on provably disjoint streams.
"""

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1


def generator(seed: int) -> np.random.Generator:
    """Philox generator for a 64-bit seed."""
    return np.random.Generator(np.random.Philox(key=seed & MASK64))


def subseed(seed: int, *tags) -> int:
    """Derive a child seed from ``seed`` and a tag path.

    Tags may be strings or integers; the derivation hashes the full
    path so distinct paths give independent seeds.
    """
    h = hashlib.sha256()
    h.update(int(seed & MASK64).to_bytes(8, "little"))
    for tag in tags:
        h.update(b"/")
        h.update(str(tag).encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "little")
