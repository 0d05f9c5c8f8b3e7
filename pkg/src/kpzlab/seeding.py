"""Reproducible random streams keyed by (master seed, replica index, tag)."""
from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np


def _tag_key(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


@dataclass(frozen=True)
class SeedStream:
    """Philox-4x64 counter-based stream.

    The key is derived from ``(master, index, crc32(tag))`` through numpy's
    SeedSequence, so distinct ids give independent streams and the same id
    always gives the same variates on every platform.
    """

    master: int
    index: int = 0
    tag: str = ""

    def seed_sequence(self) -> np.random.SeedSequence:
        return np.random.SeedSequence(int(self.master) & (2 ** 64 - 1),
                                      spawn_key=(int(self.index), _tag_key(self.tag)))

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(self.seed_sequence()))

    def child(self, tag: str) -> "SeedStream":
        return SeedStream(self.master, self.index, f"{self.tag}/{tag}" if self.tag else tag)


def seed_stream(master: int, id=(0, "")) -> SeedStream:
    """``id`` is ``(replica_index, tag)`` or a bare replica index."""
    if isinstance(id, tuple):
        index, tag = id
    else:
        index, tag = int(id), ""
    return SeedStream(int(master), int(index), str(tag))


def replica_generators(master: int, tag: str, replicas, offset: int = 0) -> list:
    return [SeedStream(master, offset + r, tag).generator() for r in range(replicas)]
