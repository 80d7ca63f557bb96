"""Named, counter-based random streams.

Every stream is a Philox generator keyed by ``(seed, path)``. A path is a
tuple of integers such as ``(block, role)``, so two runs with the same seed
draw exactly the same numbers whatever the worker layout, and a coupling can
hand both processes the very same stream.
"""

import zlib

import numpy as np

ROLES = ("clock", "kernel", "noise", "accept", "thin", "subsample", "init")


def _tag(name):
    return zlib.crc32(name.encode()) & 0x7FFFFFFF


class Streams:
    """Lazily created generators addressed by role name.

    ``streams["clock"]`` returns the generator for that role. ``sub(name)``
    derives an independent family, used for example when the exact process
    of a coupling continues on its own.
    """

    def __init__(self, seed=0, path=()):
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        self._gens = {}
        self._subs = {}

    def __getitem__(self, role):
        gen = self._gens.get(role)
        if gen is None:
            ss = np.random.SeedSequence(self.seed, spawn_key=self.path + (_tag(role),))
            gen = np.random.Generator(np.random.Philox(ss))
            self._gens[role] = gen
        return gen

    def sub(self, name):
        # cached so repeated calls keep drawing from one continuing family
        child = self._subs.get(name)
        if child is None:
            child = Streams(self.seed, self.path + (_tag(name),))
            self._subs[name] = child
        return child

    def block(self, index):
        return Streams(self.seed, self.path + (int(index),))

    def __repr__(self):
        return f"Streams(seed={self.seed}, path={self.path})"


class _SingleGenerator:
    """Adapter that serves one generator for every role."""

    def __init__(self, gen):
        self.gen = gen

    def __getitem__(self, role):
        return self.gen

    def sub(self, name):
        return self

    def block(self, index):
        return self


def as_streams(rng):
    """Accept a seed, a ``Streams`` or a numpy ``Generator``."""
    if isinstance(rng, (Streams, _SingleGenerator)):
        return rng
    if rng is None:
        return Streams(0)
    if isinstance(rng, (int, np.integer)):
        return Streams(int(rng))
    if hasattr(rng, "random"):
        return _SingleGenerator(rng)
    raise TypeError(f"cannot build random streams from {type(rng).__name__}")


def exponentials(gen, shape):
    """Unit exponentials by inversion, E = -log(1 - U)."""
    return -np.log1p(-gen.random(shape))
