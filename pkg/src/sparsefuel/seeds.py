"""Deterministic derivation of child seeds from a master seed."""

from __future__ import annotations

import numpy as np


def derive_seed(master: int, *salts: int) -> int:
    """Mix a master seed with integer salts into an independent 64-bit seed.

    Same inputs always give the same output, and distinct salt tuples give
    uncorrelated streams (SeedSequence does the mixing).
    """
    seq = np.random.SeedSequence((int(master), *[int(s) for s in salts]))
    return int(seq.generate_state(1, np.uint64)[0])
