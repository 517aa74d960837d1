"""Deterministic per-component random streams derived from one root seed."""
import zlib

import numpy as np

_COMPONENTS = ("env", "rollout", "order", "align", "probe", "init", "eval", "subsample", "swap")


def _component_id(name: str) -> int:
    if name in _COMPONENTS:
        return _COMPONENTS.index(name)
    # stable across processes, unlike hash()
    return 1000 + zlib.crc32(name.encode())


def stream(root_seed: int, component: str, *keys: int) -> np.random.Generator:
    """Generator for (component, keys...) that never collides with another component."""
    entropy = [int(root_seed) & 0xFFFFFFFF, _component_id(component), *[int(k) for k in keys]]
    return np.random.default_rng(np.random.SeedSequence(entropy))
