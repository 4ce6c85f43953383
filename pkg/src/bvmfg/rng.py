"""Counter-based normal variates keyed by (seed, stream, step, index).

Every draw is a pure function of its key and position, so any split of the
index range across workers reproduces the same numbers bit for bit.  Built
on numpy's Philox4x64, whose counter can be positioned directly.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np
from scipy.special import ndtri

MASK64 = (1 << 64) - 1

# stream identifiers
IDIOSYNCRATIC = 0
COMMON = 1
INITIAL = 2


def _key(seed: int, stream: int, step: int) -> int:
    word1 = ((stream & 0xFFFFFFFF) << 32) | (step & 0xFFFFFFFF)
    return (word1 << 64) | (seed & MASK64)


def raw(seed: int, stream: int, step: int, start: int, count: int) -> np.ndarray:
    gen = np.random.Philox(key=_key(seed, stream, step), counter=start // 4)
    skip = start % 4
    return gen.random_raw(skip + count)[skip:]


def uniforms(seed: int, stream: int, step: int, start: int, count: int) -> np.ndarray:
    """Open-interval (0, 1) uniforms, 53 bits each."""
    u = raw(seed, stream, step, start, count)
    return ((u >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


def normals(seed: int, stream: int, step: int, count: int, start: int = 0,
            threads: int = 1, chunk: int = 1 << 15) -> np.ndarray:
    """Standard normals for indices ``start .. start+count-1``."""
    if threads <= 1 or count <= chunk:
        return ndtri(uniforms(seed, stream, step, start, count))
    out = np.empty(count)
    bounds = [(lo, min(lo + chunk, count)) for lo in range(0, count, chunk)]

    def work(b):
        lo, hi = b
        out[lo:hi] = ndtri(uniforms(seed, stream, step, start + lo, hi - lo))

    with ThreadPoolExecutor(max_workers=threads) as pool:
        list(pool.map(work, bounds))
    return out


def stream_id(kind: int, replication: int = 0) -> int:
    return (replication << 4) | kind
