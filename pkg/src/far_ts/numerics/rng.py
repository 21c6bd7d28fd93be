"""Seeded counter-based random streams."""
import numpy as np


def make_rng(seed, *keys) -> np.random.Generator:
    """Philox generator keyed by ``seed`` and optional sub-stream ``keys``.

    ``make_rng(s, i)`` gives an independent stream per repeat/worker ``i``.
    """
    entropy = [int(seed)] + [int(k) for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def split(rng: np.random.Generator, n: int) -> list:
    return rng.spawn(n)
