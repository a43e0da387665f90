"""Counter-based random streams keyed by (seed, replicate, particle).

Each stream is a Philox generator seeded from a ``SeedSequence`` whose spawn
key encodes the replicate and particle. Drawing the step-``k`` increment is
then a pure function of (seed, replicate, particle, k): changing the particle
count or the worker layout never perturbs an existing stream.
"""
from __future__ import annotations

import numpy as np

_PARTICLE_DOMAIN = 0
_AUX_DOMAIN = 1


def particle_stream(seed: int, replicate: int, particle: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=(_PARTICLE_DOMAIN, int(replicate), int(particle)))
    return np.random.Generator(np.random.Philox(ss))


def aux_stream(seed: int, replicate: int, tag: int = 0) -> np.random.Generator:
    """Stream for non-Brownian randomness (initial laws, optimiser restarts)."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(_AUX_DOMAIN, int(replicate), int(tag)))
    return np.random.Generator(np.random.Philox(ss))
