"""Named, seed-derived random streams."""

import hashlib
from typing import Dict, Tuple

import numpy as np


def _name_key(names: Tuple[str, ...]) -> Tuple[int, ...]:
    # Stable across processes and platforms (unlike hash()).
    digest = hashlib.sha256("\x1f".join(names).encode("utf-8")).digest()
    return tuple(int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4))


class StreamFactory:
    """
    Hands out independent generators derived from one master seed.

    A stream is identified by its name parts, e.g. ``("link", "R1.w0-R2.w0",
    "shadow")``. The same name always yields the same sequence for a given
    seed, no matter how many other streams were created before it, so
    results do not depend on evaluation order.
    """

    def __init__(self, seed: int):
        if seed < 0:
            raise ValueError(f"seed must be non-negative, got {seed}")
        self.seed = int(seed)
        self._streams: Dict[Tuple[str, ...], np.random.Generator] = {}

    def stream(self, *names: object) -> np.random.Generator:
        """Return the (cached) generator for a stream name."""
        key = tuple(str(n) for n in names)
        generator = self._streams.get(key)
        if generator is None:
            sequence = np.random.SeedSequence(self.seed, spawn_key=_name_key(key))
            generator = np.random.default_rng(sequence)
            self._streams[key] = generator
        return generator

    def fresh(self, *names: object) -> np.random.Generator:
        """Return a new generator for a name, ignoring the cache."""
        key = tuple(str(n) for n in names)
        return np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=_name_key(key)))
