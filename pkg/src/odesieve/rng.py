"""Deterministic random-stream management.

Every stochastic component in the package draws from a ``numpy`` PCG64
generator.  A run owns a single 64-bit master seed; independent substreams
(noise generation, optimizer, bootstrap replicate b, study replicate r, ...)
are derived by seeding a ``SeedSequence`` with the tuple ``(master, *stream)``.
Identical (master, stream) pairs always yield identical draws, and distinct
stream tuples yield statistically independent streams.  One caveat inherited
from ``SeedSequence``: trailing zeros pad, so ``(m,)`` and ``(m, 0)`` collide.
All streams used internally therefore differ in a non-trailing component or
have fixed length.
"""

from __future__ import annotations

import numpy as np

__all__ = ["substream"]


def substream(master: int, *stream: int) -> np.random.Generator:
    """Return the PCG64 generator for substream ``stream`` of ``master``.

    Parameters are non-negative integers; the empty stream gives the root
    generator of the run.
    """
    for part in (master, *stream):
        if not isinstance(part, (int, np.integer)):
            raise TypeError(f"seed components must be integers, got {part!r}")
        if part < 0:
            raise ValueError(f"seed components must be >= 0, got {part}")
    seq = np.random.SeedSequence((int(master),) + tuple(int(s) for s in stream))
    return np.random.Generator(np.random.PCG64(seq))
