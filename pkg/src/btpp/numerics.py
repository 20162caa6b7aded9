"""Dense helpers, the 0/1 sparse product, and keyed random streams."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from btpp.topology import MixingMatrix


def frobenius_norm_sq(M: np.ndarray) -> float:
    M = np.asarray(M, dtype=float)
    return float(np.sum(M * M))


def sparse_apply(M: MixingMatrix, X: np.ndarray) -> np.ndarray:
    """M @ X for a 0/1 matrix; each output row sums its source rows in ascending order."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] != M.n:
        raise ValueError(f"matrix of size {M.n} cannot act on shape {X.shape}")
    out = np.zeros_like(X)
    for r, cols in enumerate(M.support):
        if not cols:
            continue
        acc = X[cols[0]].copy()
        for c in cols[1:]:
            acc += X[c]
        out[r] = acc
    return out


def _purpose_code(purpose: str) -> int:
    return zlib.crc32(purpose.encode())


@dataclass
class RngStream:
    """Counter-based stream keyed by (root_seed, agent, purpose).

    ``at(block)`` returns a generator positioned at an independent block of
    the Philox counter space, so the values drawn for a given block do not
    depend on what was drawn before or by whom. ``next_generator`` walks the
    blocks sequentially, tracked by ``counter``.
    """

    root_seed: int
    stream_id: tuple[int, str]
    counter: int = 0
    _bitgen: np.random.Philox = field(init=False, repr=False)
    _state: dict = field(init=False, repr=False)
    _gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        agent, purpose = self.stream_id
        seq = np.random.SeedSequence(self.root_seed, spawn_key=(agent + 1, _purpose_code(purpose)))
        key = seq.generate_state(2, np.uint64)
        self._bitgen = np.random.Philox(key=key)
        self._state = self._bitgen.state
        self._gen = np.random.Generator(self._bitgen)

    def at(self, block: int) -> np.random.Generator:
        # The block index occupies the top counter word; draws within a
        # block advance the low word.
        st = self._state
        st["state"]["counter"][:] = (0, 0, 0, block)
        st["buffer_pos"] = 4
        st["has_uint32"] = 0
        st["uinteger"] = 0
        self._bitgen.state = st
        return self._gen

    def next_generator(self) -> np.random.Generator:
        gen = self.at(self.counter)
        self.counter += 1
        return gen


def agent_streams(root_seed: int, n: int, purpose: str = "oracle") -> list[RngStream]:
    return [RngStream(root_seed, (i, purpose)) for i in range(n)]


def gaussian_vector(stream: RngStream, dim: int, mean: float = 0.0, stddev: float = 1.0) -> np.ndarray:
    if stddev < 0:
        raise ValueError("stddev must be non-negative")
    gen = stream.next_generator()
    if stddev == 0:
        return np.full(dim, float(mean))
    return mean + stddev * gen.standard_normal(dim)
