"""Counter-based random streams.

A stream is keyed by ``(seed, stream_id)`` on a Philox generator, so draws for
masking, Gumbel noise, dropout and initialisation never interfere with each
other and are reproducible on any platform.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def stream_id(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


class RngStream:
    def __init__(self, seed: int, stream: int | str = 0, counter: int = 0):
        if isinstance(stream, str):
            stream = stream_id(stream)
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        self._bitgen = np.random.Philox(key=np.array([self.seed, self.stream], dtype=np.uint64),
                                        counter=counter)
        self._gen = np.random.Generator(self._bitgen)

    def child(self, name: str | int) -> "RngStream":
        """Independent sub-stream derived from this stream's key."""
        sub = stream_id(name) if isinstance(name, str) else int(name)
        key = zlib.crc32(f"{self.stream}:{sub}".encode("ascii"))
        return RngStream(self.seed, key)

    # -- draws -----------------------------------------------------------
    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(shape) * std

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def gumbel(self, shape) -> np.ndarray:
        u = self._gen.uniform(np.finfo(np.float64).tiny, 1.0, shape)
        return -np.log(-np.log(u))

    def integers(self, low: int, high: int | None = None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    # -- state -----------------------------------------------------------
    def state(self) -> dict:
        st = self._bitgen.state
        return {
            "seed": self.seed,
            "stream": self.stream,
            "counter": [int(c) for c in st["state"]["counter"]],
            "buffer": [int(b) for b in st["buffer"]],
            "buffer_pos": int(st["buffer_pos"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    @classmethod
    def from_state(cls, st: dict) -> "RngStream":
        r = cls(st["seed"], st["stream"])
        full = r._bitgen.state
        full["state"]["counter"] = np.array(st["counter"], dtype=np.uint64)
        full["buffer"] = np.array(st["buffer"], dtype=np.uint64)
        full["buffer_pos"] = st["buffer_pos"]
        full["has_uint32"] = st["has_uint32"]
        full["uinteger"] = st["uinteger"]
        r._bitgen.state = full
        return r
