"""Derived random streams.

Every stochastic consumer asks for its own generator keyed by
``(master seed, purpose tag, *indices)``, so results never depend on the order
in which consumers run (or on whether they run in parallel).
"""
import zlib

import numpy as np


def _tag_to_int(tag):
    if isinstance(tag, (int, np.integer)):
        if tag < 0:
            raise ValueError("negative stream index")
        return int(tag)
    return zlib.crc32(str(tag).encode("utf-8"))


def derive_seed(seed, *keys):
    """Return a ``SeedSequence`` for the stream named by ``keys``."""
    entropy = [_tag_to_int(seed)] + [_tag_to_int(k) for k in keys]
    return np.random.SeedSequence(entropy)


def derive_rng(seed, *keys):
    """Return a fresh ``numpy.random.Generator`` for ``(seed, *keys)``."""
    return np.random.default_rng(derive_seed(seed, *keys))


def as_seed(rng_or_seed):
    """Reduce a seed-like argument to an integer master seed.

    Generators are consumed for one 63-bit draw; ints pass through.
    """
    if rng_or_seed is None:
        return 0
    if isinstance(rng_or_seed, (int, np.integer)):
        return int(rng_or_seed)
    if isinstance(rng_or_seed, np.random.Generator):
        return int(rng_or_seed.integers(0, 2**63 - 1))
    raise TypeError(f"expected int seed or numpy Generator, got {type(rng_or_seed)!r}")
