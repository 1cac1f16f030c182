"""Named random substreams derived from one root seed.

Every stochastic stage of the pipeline draws from its own substream so a
single root seed reproduces the entire run, and stages can be re-run in
isolation without disturbing each other.
"""
from __future__ import annotations

import numpy as np

_STREAMS = {
    "generate": 1,
    "gaussian": 2,
    "perturb": 3,
    "pca-sample": 4,
    "shuffle": 5,
    "extractor": 6,
    "net-init": 7,
    "esmda": 8,
    "truth": 9,
    "test": 10,
}


def rng_for(seed: int, stream: str, index: int = 0) -> np.random.Generator:
    """Generator for (seed, stream, index); streams never collide."""
    try:
        sid = _STREAMS[stream]
    except KeyError:
        raise KeyError(f"unknown stream {stream!r}; known: {sorted(_STREAMS)}") from None
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(sid, int(index)))
    return np.random.default_rng(ss)
