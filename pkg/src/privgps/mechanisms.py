"""Privatization mechanisms: two-coin randomized response and radius obfuscation.

Each privatized bit costs one uniform draw when the truth coin lands heads
and two draws otherwise (the second draw is the noise coin). Bits of a
vector are processed in index order from one shared :class:`RandomSource`,
so a seed fully determines every output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from privgps import kernels
from privgps.geo import GeoPoint, displace


class NoPrivacy(ValueError):
    """The channel is truthful (p = 1); its epsilon is infinite."""


@dataclass(frozen=True)
class CoinPair:
    """Biases of the truth coin ``p`` and the noise coin ``q``."""

    p: float
    q: float

    def __post_init__(self) -> None:
        p, q = float(self.p), float(self.q)
        if not (0.0 <= p <= 1.0):
            raise ValueError(f"p must lie in [0, 1], got {p!r}")
        if not (0.0 < q < 1.0):
            raise ValueError(f"q must lie in (0, 1), got {q!r}")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)

    @property
    def p_yes_given_true(self) -> float:
        return self.p + (1.0 - self.p) * self.q

    @property
    def p_yes_given_false(self) -> float:
        return (1.0 - self.p) * self.q

    def to_dict(self) -> dict:
        return {"p": self.p, "q": self.q}


def check_epsilon(eps) -> float:
    if isinstance(eps, bool):
        raise ValueError("epsilon must be a number")
    eps = float(eps)
    if not (eps > 0 and math.isfinite(eps)):
        raise ValueError(f"epsilon must be positive and finite, got {eps!r}")
    return eps


class RandomSource:
    """Seeded stream of uniform doubles in [0, 1).

    Backed by numpy's PCG64 so the compiled kernels can draw from the same
    bit generator as the Python code without diverging. Not thread safe;
    give each consumer its own instance.
    """

    def __init__(self, seed: int | None = None, *, bit_generator: np.random.BitGenerator | None = None):
        if bit_generator is None:
            if seed is not None and not (0 <= int(seed) < 2**64):
                raise ValueError("seed must be an unsigned 64-bit integer")
            bit_generator = np.random.PCG64(seed)
        self.bit_generator = bit_generator
        self._gen = np.random.Generator(bit_generator)

    @classmethod
    def for_session(cls, daemon_seed: int | None, counter: int) -> "RandomSource":
        """Independent stream for session ``counter`` of a daemon seeded with ``daemon_seed``."""
        if daemon_seed is None:
            return cls()
        ss = np.random.SeedSequence([int(daemon_seed), int(counter)])
        return cls(bit_generator=np.random.PCG64(ss))

    def uniform(self) -> float:
        return float(self._gen.random())


def rr_bit(truth: bool, coins: CoinPair, rng: RandomSource) -> bool:
    if rng.uniform() < coins.p:
        return bool(truth)
    return rng.uniform() < coins.q


def rr_vector(truth, coins: CoinPair, rng: RandomSource) -> np.ndarray:
    """Apply :func:`rr_bit` to every bit of ``truth``; returns a uint8 vector."""
    bits = np.ascontiguousarray(truth, dtype=np.uint8)
    return kernels.rr_bits(bits, coins.p, coins.q, rng.bit_generator)


def rr_counts(cells, n_cells: int, coins: CoinPair, rng: RandomSource) -> np.ndarray:
    """Summed :func:`rr_vector` outputs for owners whose true cells are ``cells``.

    ``cells[k]`` is owner k's cell index, or -1 for an owner outside the grid
    (all-zeros truth). Consumes the stream exactly as calling
    ``rr_vector(one_hot(cells[k]))`` owner by owner would.
    """
    cells = np.ascontiguousarray(cells, dtype=np.int64)
    return kernels.rr_counts(cells, int(n_cells), coins.p, coins.q, rng.bit_generator)


def radius_privatize(true_point: GeoPoint, radius_m: float, rng: RandomSource) -> GeoPoint:
    """Uniform sample from the disk of ``radius_m`` meters around ``true_point``."""
    if not (radius_m >= 0 and math.isfinite(radius_m)):
        raise ValueError(f"radius must be non-negative, got {radius_m!r}")
    u1 = rng.uniform()
    u2 = rng.uniform()
    d = radius_m * math.sqrt(u1)
    theta = 2.0 * math.pi * u2
    return displace(true_point, d * math.sin(theta), d * math.cos(theta))


def epsilon_of(coins: CoinPair) -> float:
    """Tightest local-DP epsilon of the two-coin channel."""
    p, q = coins.p, coins.q
    if p >= 1.0:
        raise NoPrivacy("truthful channel (p = 1) has unbounded epsilon")
    yes = (p + (1 - p) * q) / ((1 - p) * q)
    no = (p + (1 - p) * (1 - q)) / ((1 - p) * (1 - q))
    return math.log(max(yes, no))


def coins_for_epsilon(eps: float) -> CoinPair:
    """Symmetric channel (q = 1/2) whose epsilon equals ``eps``."""
    eps = check_epsilon(eps)
    p = math.tanh(eps / 2.0)  # (e^eps - 1) / (e^eps + 1)
    if p >= 1.0:
        raise ValueError(f"epsilon {eps} too large to represent as a coin bias")
    return CoinPair(p, 0.5)
