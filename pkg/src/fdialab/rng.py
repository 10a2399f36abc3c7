"""Deterministic seed derivation for independent random streams.

All randomness in the lab flows from one master seed.  Sub-streams (per cell,
per sample, per worker) are derived by hashing the master seed together with a
stable textual key, so results do not depend on execution order or worker
count.
"""

import hashlib

import numpy as np

_SEP = "\x1f"


def derive_seed(*parts) -> int:
    """Hash the given parts into a 64-bit seed. Floats are keyed by repr."""
    blob = _SEP.join(repr(p) if isinstance(p, float) else str(p) for p in parts)
    digest = hashlib.sha256(blob.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_rng(*parts) -> np.random.Generator:
    """A fresh Generator seeded from the stable hash of the given parts."""
    return np.random.default_rng(derive_seed(*parts))
