"""Hierarchical seeding: one root seed, independent streams per component."""
import zlib

import numpy as np


def component_rng(seed: int, component: str, *keys: int) -> np.random.Generator:
    """Generator for ``component`` (e.g. "mask", "init") under root ``seed``.

    Distinct (component, keys) give independent streams, so re-running one
    stage never perturbs another.
    """
    return np.random.default_rng([int(seed), zlib.crc32(component.encode()), *map(int, keys)])
