"""Reproducible random streams.

All stochastic code in the toolkit draws from `numpy.random.Generator`
objects backed by the counter-based Philox bit generator, with substreams
derived from an integer seed plus an index path. The same (seed, path)
always yields the same stream, independent of how many other streams were
created, which is what makes parallel generation bit-reproducible.
"""

from __future__ import annotations

import numpy as np


def stream(seed: int) -> np.random.Generator:
    """Root stream for a seed."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))


def substream(seed: int, *path: int) -> np.random.Generator:
    """Independent stream identified by (seed, path...).

    Distinct paths give statistically independent streams; the empty path
    is the root stream.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))


def polar_normal(rng: np.random.Generator, n: int) -> np.ndarray:
    """Standard normal variates via the Marsaglia polar method.

    Used instead of the generator's built-in normal sampler so the exact
    draw sequence is pinned by this module, not by the numpy version.
    """
    out = np.empty(n)
    filled = 0
    while filled < n:
        need = n - filled
        # acceptance rate is pi/4; oversample slightly so one round usually suffices
        m = int(np.ceil((need + 1) / 2 / 0.78)) + 4
        u = rng.uniform(-1.0, 1.0, size=(m, 2))
        s = u[:, 0] ** 2 + u[:, 1] ** 2
        ok = (s > 0.0) & (s < 1.0)
        u, s = u[ok], s[ok]
        f = np.sqrt(-2.0 * np.log(s) / s)
        z = np.column_stack((u[:, 0] * f, u[:, 1] * f)).ravel()
        take = min(z.size, need)
        out[filled : filled + take] = z[:take]
        filled += take
    return out
