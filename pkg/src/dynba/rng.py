"""Splittable seeding.

Every random draw in the package comes from ``stream(seed, purpose, *ids)``:
a ``numpy.random.Generator`` seeded with ``SeedSequence(seed, spawn_key=...)``
where the spawn key is the purpose's fixed integer followed by the integer
ids (frame indices, edge endpoints, ...). Streams for different keys are
statistically independent, and the result never depends on call order, so
frames or edges can be generated in any order with identical output.
"""

import numpy as np

PURPOSES = {
    "scene": 1,
    "features": 2,
    "feature_noise": 3,
    "feature_dynamic": 4,
    "observation": 5,
    "depth_prior": 6,
    "perturb": 7,
    "gradcheck": 8,
    "experiment": 9,
}


def stream(seed: int, purpose: str, *ids: int) -> np.random.Generator:
    key = (PURPOSES[purpose],) + tuple(int(i) for i in ids)
    return np.random.default_rng(np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=key))
