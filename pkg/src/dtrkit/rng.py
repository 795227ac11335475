"""Deterministic random streams.

All randomness in the package flows through labeled Philox (counter-based)
streams so that results depend only on the top-level seed and the stream
label, never on scheduling or on how many draws other components consumed.
Normal deviates use the inverse CDF applied to open-interval uniforms, which
is reproducible across platforms.
"""

from __future__ import annotations

import numpy as np
from numpy.random import Philox, SeedSequence
from scipy.special import ndtri

__all__ = ["substream", "derive_seed", "uniform_open", "normal"]


def substream(seed: int, *labels: int) -> Philox:
    """Philox bit generator for the stream identified by ``(seed, *labels)``."""
    return Philox(seed=SeedSequence((int(seed),) + tuple(int(x) for x in labels)))


def derive_seed(seed: int, *labels: int) -> int:
    """A child integer seed derived deterministically from labels."""
    ss = SeedSequence((int(seed),) + tuple(int(x) for x in labels))
    return int(ss.generate_state(1, np.uint64)[0])


def uniform_open(bg: Philox, n: int) -> np.ndarray:
    """n uniforms strictly inside (0, 1); draw i depends only on counter position i."""
    raw = bg.random_raw(n)
    return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


def normal(bg: Philox, n: int) -> np.ndarray:
    """Standard normal deviates via the inverse CDF."""
    return ndtri(uniform_open(bg, n))
