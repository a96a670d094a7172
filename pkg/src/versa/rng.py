"""Named, counter-based random streams.

Every source of randomness in the library is a ``RandomStream``: a Philox
counter-based generator keyed by hashing a root seed together with a tuple of
name tags.  Streams derived from the same (seed, tags) are identical across
platforms and across processes, and child streams obtained through
:meth:`RandomStream.split` are statistically independent, so parallel episode
generation only needs distinct tags.

Standard-normal draws use Box-Muller on top of the stream's uniforms rather
than numpy's ziggurat sampler, which pins the exact values produced to this
module instead of to a numpy version.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["RandomStream"]


def _derive_key(seed, tags: tuple) -> int:
    material = repr((int(seed), tags)).encode("utf-8")
    digest = hashlib.blake2b(material, digest_size=16).digest()
    return int.from_bytes(digest, "little")


class RandomStream:
    """A seeded, splittable stream of uniforms and Box-Muller normals.

    The underlying Philox generator is constructed lazily on first draw, so
    streams created only to key child streams cost almost nothing.
    """

    __slots__ = ("seed", "tags", "_gen")

    def __init__(self, seed: int, *tags):
        self.seed = int(seed)
        self.tags = tuple(tags)
        self._gen = None

    @property
    def generator(self) -> np.random.Generator:
        if self._gen is None:
            self._gen = np.random.Generator(
                np.random.Philox(key=_derive_key(self.seed, self.tags))
            )
        return self._gen

    def split(self, *tags) -> "RandomStream":
        """Child stream keyed by this stream's tags extended with ``tags``."""
        return RandomStream(self.seed, *(self.tags + tuple(tags)))

    def uniform(self, shape=()) -> np.ndarray:
        """Uniform float64 draws in [0, 1)."""
        return self.generator.random(shape, dtype=np.float64)

    def normal(self, shape=()) -> np.ndarray:
        """Standard-normal draws via Box-Muller."""
        n = int(np.prod(shape)) if shape != () else 1
        pairs = (n + 1) // 2
        gen = self.generator
        u1 = 1.0 - gen.random(pairs, dtype=np.float64)  # (0, 1]: keeps log finite
        u2 = gen.random(pairs, dtype=np.float64)
        radius = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([radius * np.cos(2.0 * np.pi * u2), radius * np.sin(2.0 * np.pi * u2)])[:n]
        if shape == ():
            return z[0]
        return z.reshape(shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Uniform integers in [low, high)."""
        u = self.generator.random(shape, dtype=np.float64)
        return (low + np.floor(u * (high - low))).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        """A uniformly random permutation of range(n), via sorted uniform keys."""
        return np.argsort(self.generator.random(n, dtype=np.float64), kind="stable")

    def choice(self, n: int, k: int) -> np.ndarray:
        """k distinct indices drawn from range(n), in random order."""
        if k > n:
            raise ValueError(f"cannot choose {k} distinct items from {n}")
        return self.permutation(n)[:k]

    def __repr__(self):
        return f"RandomStream(seed={self.seed}, tags={self.tags!r})"
