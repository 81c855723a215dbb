"""Deterministic random-stream derivation.

Every source of randomness in a run is a child stream derived from the run
seed plus a small integer tag path. Streams never share state, so consuming
one (e.g. buffer updates) cannot perturb another (e.g. dropout masks); this
is what makes replay-on with zero capacity bit-identical to replay-off, and
checkpoint resumption bit-exact at task boundaries.
"""
from __future__ import annotations

import numpy as np

# Top-level stream tags.
TAG_INIT = 0      # model weight initialization
TAG_PHASE = 1     # per-training-phase streams (shuffle / dropout / replay)
TAG_MEMORY = 2    # episodic-memory policy decisions

# Channels under TAG_PHASE.
CH_SHUFFLE = 0
CH_DROPOUT = 1
CH_REPLAY = 2


def derive_rng(seed: int, *tags: int) -> np.random.Generator:
    """Return a generator for the stream identified by (seed, *tags)."""
    return np.random.default_rng(np.random.SeedSequence((int(seed),) + tuple(int(t) for t in tags)))


def child_seed(master_seed: int, index: int) -> int:
    """Stable 64-bit child seed for independent run `index` of a sweep."""
    ss = np.random.SeedSequence((int(master_seed), int(index)))
    return int(ss.generate_state(1, dtype=np.uint64)[0])
