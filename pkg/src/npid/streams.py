"""Named, counter-based random streams.

Every concern (weight init, shuffling, noise draws, augmentation, ...) gets its
own Philox key derived from the run seed, so consuming one stream never shifts
another. Sequential streams carry serializable state; keyed draws address a
fixed counter block, e.g. ``(epoch, instance)`` for augmentation.
"""
from __future__ import annotations

import zlib

import numpy as np


def _key(seed: int, concern: str) -> np.ndarray:
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(concern.encode())])
    return ss.generate_state(2, dtype=np.uint64)


class Streams:
    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gens: dict[str, np.random.Generator] = {}

    def __getitem__(self, concern: str) -> np.random.Generator:
        gen = self._gens.get(concern)
        if gen is None:
            gen = np.random.Generator(np.random.Philox(key=_key(self.seed, concern)))
            self._gens[concern] = gen
        return gen

    def keyed(self, concern: str, *coords: int) -> np.random.Generator:
        """A generator whose output depends only on ``(seed, concern, coords)``."""
        if len(coords) > 2:
            raise ValueError("at most two counter coordinates are supported")
        counter = np.zeros(4, dtype=np.uint64)
        for slot, c in zip((3, 2), coords):
            counter[slot] = np.uint64(c)
        return np.random.Generator(np.random.Philox(key=_key(self.seed, concern), counter=counter))

    def state(self) -> dict:
        out = {}
        for name, gen in sorted(self._gens.items()):
            st = gen.bit_generator.state
            out[name] = {
                "counter": [int(v) for v in st["state"]["counter"]],
                "key": [int(v) for v in st["state"]["key"]],
                "buffer": [int(v) for v in st["buffer"]],
                "buffer_pos": int(st["buffer_pos"]),
                "has_uint32": int(st["has_uint32"]),
                "uinteger": int(st["uinteger"]),
            }
        return {"seed": self.seed, "streams": out}

    @classmethod
    def from_state(cls, state: dict) -> "Streams":
        obj = cls(state["seed"])
        for name, st in state["streams"].items():
            bg = np.random.Philox(key=_key(obj.seed, name))
            bg.state = {
                "bit_generator": "Philox",
                "state": {
                    "counter": np.array(st["counter"], dtype=np.uint64),
                    "key": np.array(st["key"], dtype=np.uint64),
                },
                "buffer": np.array(st["buffer"], dtype=np.uint64),
                "buffer_pos": st["buffer_pos"],
                "has_uint32": st["has_uint32"],
                "uinteger": st["uinteger"],
            }
            obj._gens[name] = np.random.Generator(bg)
        return obj
