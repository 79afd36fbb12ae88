"""Deterministic random streams keyed by purpose.

Every stochastic quantity in the package is drawn from a counter-based
Philox generator whose key encodes ``(seed, purpose tag, entity id, retry)``.
Streams are therefore independent of each other and of evaluation order:
adding, removing, or reordering draws for one entity never perturbs another.
"""

from __future__ import annotations

import numpy as np

# purpose tags; kept small so they pack into the high bits of the key
TAG_SEGMENT = 1  # per-segment scalar draws (length)
TAG_SPLIT = 2  # per-bifurcation draws (twist, daughter ratios, angles)
TAG_ROUTE = 3  # route selection for fly-throughs
TAG_POSE = 4  # per-pose jitter draws

_MASK64 = (1 << 64) - 1


def stream(seed: int, tag: int, entity: int = 0, retry: int = 0) -> np.random.Generator:
    """Return the named Philox stream.

    Parameters
    ----------
    seed : master seed of the run.
    tag : purpose tag (``TAG_*``).
    entity : id of the tree segment / pose the draws belong to.
    retry : resampling round; bumping it yields a fresh, still
        deterministic stream for the same entity.
    """
    if entity < 0 or entity > 0xFFFFFFFF:
        raise ValueError("entity id out of range")
    sub = ((tag & 0xFF) << 56) | ((retry & 0xFFFF) << 40) | (entity & 0xFFFFFFFF)
    key = np.array([seed & _MASK64, sub], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
