"""Seeded random streams.

All randomness goes through numpy's PCG64 bit generator, keyed by a
``SeedSequence`` built from the run seed plus a stream tag, so that e.g. the
parameter initialisation and the epoch-``k`` batch order of a run are
independent, reproducible streams.
"""

from __future__ import annotations

import zlib

import numpy as np


def _tag(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode())
    return int(part)


def make_rng(seed: int, *stream) -> np.random.Generator:
    """PCG64 generator for ``seed`` and an optional stream path (ints or strings)."""
    entropy = [int(seed)] + [_tag(p) for p in stream]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
