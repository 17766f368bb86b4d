"""Seeded random streams built on the Philox counter-based generator.

Philox is a published, keyed, counter-based PRNG, so every stream in the
package is a pure function of (seed, namespace, index) and independent of
call order.  Scan generation uses namespace 0, which makes its key exactly
the (seed, scan index) pair.  Streams are reproducible bit for bit for a
fixed numpy version.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1

# Stream namespaces.  The second Philox key word is (namespace << 48) | index,
# so streams from different namespaces never collide even under a shared seed.
SCAN_STREAM = 0
TRAIN_STREAM = 1
INIT_STREAM = 2


def make_rng(seed: int, stream: int = 0, index: int = 0) -> np.random.Generator:
    """Return a Generator keyed by (seed, stream, index)."""
    if not 0 <= index < (1 << 48):
        raise ValueError(f"stream index out of range: {index}")
    key = np.array([seed & _MASK64, ((stream << 48) | index) & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
