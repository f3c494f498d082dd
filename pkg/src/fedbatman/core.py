"""Shared domain types, seeded randomness and parameter-vector arithmetic.

Randomness
----------
Every random draw in the package comes from :class:`SeededRng`, which wraps
the PCG64 bit generator (O'Neill's PCG XSL-RR 128/64, multiplier
``0x2360ED051FC65DA44385DF649FCCF645``, increment derived from the seed) as
shipped by numpy.  Only the raw 64-bit output of the bit generator is used;
uniform doubles, Gaussian noise, bounded integers and permutations are derived
here so that numpy's distribution code can never change a stream:

* uniform double: ``(raw >> 11) * 2**-53``
* bounded integer in ``[0, n)``: rejection sampling on ``raw`` against
  ``2**64 - (2**64 mod n)``
* Gaussian: Box-Muller on two uniform doubles
* permutation: Fisher-Yates from the top index down

Seeds are expanded with numpy's ``SeedSequence`` (a published hashing
scheme), which also provides independent child streams via ``spawn_key``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

SERVER_ID = 0

# child-stream keys used with SeededRng.spawn
STREAM_INIT = 1
STREAM_SHUFFLE = 2
STREAM_PARTITION = 3
STREAM_NETWORK = 4
STREAM_NOISE = 5

_TWO_POW_64 = 1 << 64
_INV_2_53 = 1.0 / (1 << 53)


class SeededRng:
    """Reproducible random stream; not safe to share between threads."""

    def __init__(self, seed: int, key: Sequence[int] = ()):
        seed = int(seed)
        if not 0 <= seed < _TWO_POW_64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = seed
        self.key = tuple(int(k) for k in key)
        seq = np.random.SeedSequence(entropy=seed, spawn_key=self.key)
        self._bits = np.random.PCG64(seq)

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed}, key={self.key})"

    def spawn(self, *key: int) -> "SeededRng":
        """Independent child stream, a pure function of (seed, key path)."""
        return SeededRng(self.seed, self.key + tuple(key))

    def raw(self, n: int) -> np.ndarray:
        return self._bits.random_raw(n)

    def random(self, n: int) -> np.ndarray:
        """``n`` uniform doubles in [0, 1)."""
        return (self.raw(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53

    def uniform(self, lo: float, hi: float, n: int) -> np.ndarray:
        if not lo < hi:
            raise ValueError("empty range")
        return lo + (hi - lo) * self.random(n)

    def normal(self, n: int) -> np.ndarray:
        """``n`` standard normal draws (Box-Muller, one pair per two uniforms)."""
        pairs = (n + 1) // 2
        u = self.random(2 * pairs)
        u1 = 1.0 - u[0::2]  # (0, 1], keeps log finite
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return z[:n]

    def randbelow(self, n: int) -> int:
        if n < 1:
            raise ValueError("randbelow requires n >= 1")
        limit = _TWO_POW_64 - (_TWO_POW_64 % n)
        while True:
            r = int(self.raw(1)[0])
            if r < limit:
                return r % n

    def permutation(self, n: int) -> list[int]:
        items = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.randbelow(i + 1)
            items[i], items[j] = items[j], items[i]
        return items


def rng_uniform(rng: SeededRng, lo: float, hi: float) -> float:
    """Single uniform draw in [lo, hi)."""
    if not lo < hi:
        raise ValueError("empty range")
    return float(rng.uniform(lo, hi, 1)[0])


@dataclass(frozen=True, eq=False)
class ParameterVector:
    """Flat, read-only vector of model weights.

    Layout is fixed by :mod:`fedbatman.nn`: for each LSTM layer the gate
    matrix (row-major, gates ``[i, f, g, o]``) followed by its bias, then the
    output weights and the output bias.
    """

    values: np.ndarray

    def __post_init__(self):
        arr = np.array(self.values, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(arr)):
            raise ValueError("parameter vector contains non-finite entries")
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)

    def __len__(self) -> int:
        return int(self.values.shape[0])

    def __eq__(self, other) -> bool:
        # bitwise equality, -0.0 and 0.0 are distinguished
        if not isinstance(other, ParameterVector):
            return NotImplemented
        return self.values.tobytes() == other.values.tobytes()

    def __hash__(self) -> int:
        return hash(self.values.tobytes())

    @classmethod
    def zeros(cls, d: int) -> "ParameterVector":
        return cls(np.zeros(d))

    def tolist(self) -> list[float]:
        return self.values.tolist()


def param_average(params: Sequence[ParameterVector]) -> ParameterVector:
    """Element-wise arithmetic mean ``(1/J) * sum_j w_j``.

    The sum is a pairwise reduction in list order (adjacent pairs, left to
    right, repeated), which keeps ``J`` identical vectors exact whenever ``J``
    is a power of two.  Callers that need order independence sort by client
    id first (see :func:`fedbatman.fl.aggregate`).
    """
    if len(params) == 0:
        raise ValueError("no clients")
    d = len(params[0])
    if any(len(p) != d for p in params):
        raise ValueError("parameter shape mismatch")
    level = [p.values for p in params]
    while len(level) > 1:
        paired = [level[k] + level[k + 1] for k in range(0, len(level) - 1, 2)]
        if len(level) % 2:
            paired.append(level[-1])
        level = paired
    return ParameterVector(level[0] / len(params))


@dataclass(frozen=True, eq=False)
class LinkCostTrace:
    """Per-route link costs, ``T`` time steps by ``R`` routes; lower is better."""

    costs: np.ndarray

    def __post_init__(self):
        arr = np.array(self.costs, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[:, None]
        if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
            raise ValueError("trace must be a non-empty T x R matrix")
        if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
            raise ValueError("link costs must be positive and finite")
        arr.flags.writeable = False
        object.__setattr__(self, "costs", arr)

    @property
    def num_steps(self) -> int:
        return int(self.costs.shape[0])

    @property
    def num_routes(self) -> int:
        return int(self.costs.shape[1])

    def at(self, t: int, r: int) -> float:
        return trace_at(self, t, r)

    @classmethod
    def from_columns(cls, columns: Iterable["LinkCostTrace"]) -> "LinkCostTrace":
        return cls(np.hstack([c.costs for c in columns]))

    def __eq__(self, other) -> bool:
        if not isinstance(other, LinkCostTrace):
            return NotImplemented
        return self.costs.shape == other.costs.shape and self.costs.tobytes() == other.costs.tobytes()

    __hash__ = None


def trace_at(trace: LinkCostTrace, t: int, r: int) -> float:
    if not (0 <= t < trace.num_steps and 0 <= r < trace.num_routes):
        raise IndexError(f"trace index ({t}, {r}) out of range for {trace.costs.shape}")
    return float(trace.costs[t, r])
