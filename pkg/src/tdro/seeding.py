"""Named random substreams derived from a single run seed.

Every stage (init, negative sampling, shuffling, data generation, clustering)
draws from its own substream, so changing how one stage consumes randomness
never perturbs the others.
"""

import numpy as np

# Registry of substream ids. Append only; renumbering breaks reproducibility.
_STREAMS = {
    "init": 0,
    "negatives": 1,
    "shuffle": 2,
    "synth": 3,
    "kmeans": 4,
    "split": 5,
}


def named_rng(seed: int, stream: str) -> np.random.Generator:
    """Generator for the given substream of ``seed``."""
    try:
        stream_id = _STREAMS[stream]
    except KeyError:
        raise ValueError(f"unknown rng stream {stream!r}") from None
    return np.random.default_rng(np.random.SeedSequence([int(seed), stream_id]))
