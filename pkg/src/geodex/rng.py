"""Keyed deterministic RNG streams.

Every random draw in the package comes from a Generator created here from
(seed, *key) where key parts are strings or non-negative ints.  Streams are
therefore independent of call order and of each other, which is what makes
checkpoint resume bit-exact: no generator state is ever saved, streams are
re-derived from their keys.
"""

import zlib

import numpy as np


def _key_int(part):
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError(f"rng key ints must be non-negative, got {part}")
        return int(part)
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    raise TypeError(f"rng key parts must be str or int, got {type(part)!r}")


def seed_sequence(seed, *key):
    return np.random.SeedSequence([int(seed)] + [_key_int(p) for p in key])


def child(seed, *key):
    """Generator for the stream identified by (seed, *key)."""
    return np.random.default_rng(seed_sequence(seed, *key))
