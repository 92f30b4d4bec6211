"""Analyst-side inversion of the randomized-response channel.

Given ``yes_count`` privatized "yes" answers out of ``n`` owners, the unbiased
count of owners holding the attribute is::

    (yes_count - (1 - p) * q * n) / p
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from privgps.mechanisms import CoinPair


class DegenerateChannel(ValueError):
    """p = 0: responses carry no information about the truth."""


class MismatchedN(ValueError):
    pass


@dataclass(frozen=True)
class AggregateCount:
    yes_count: int
    n_participants: int

    def __post_init__(self) -> None:
        if self.n_participants < 1:
            raise ValueError("n_participants must be positive")
        if not (0 <= self.yes_count <= self.n_participants):
            raise ValueError(f"yes_count {self.yes_count} outside [0, {self.n_participants}]")


@dataclass(frozen=True)
class Estimate:
    raw: float
    clamped: float
    stderr: float


def _require_informative(coins: CoinPair) -> None:
    if coins.p <= 0.0:
        raise DegenerateChannel("p = 0 makes every response pure noise")


def stderr_of(n: int, coins: CoinPair, pi: float) -> float:
    """Standard deviation of the raw estimate when each of ``n`` owners holds the attribute with probability ``pi``."""
    _require_informative(coins)
    if not (0.0 <= pi <= 1.0):
        raise ValueError(f"pi must lie in [0, 1], got {pi!r}")
    p1 = pi * coins.p_yes_given_true + (1.0 - pi) * coins.p_yes_given_false
    return math.sqrt(n * p1 * (1.0 - p1)) / coins.p


def conditional_stderr(n: int, coins: CoinPair, true_count: int) -> float:
    """Standard deviation of the raw estimate when exactly ``true_count`` of ``n`` owners hold the attribute.

    Smaller than :func:`stderr_of` at ``pi = true_count / n`` unless every
    owner agrees, because the truth itself is not resampled.
    """
    _require_informative(coins)
    if not (0 <= true_count <= n):
        raise ValueError(f"true_count {true_count} outside [0, {n}]")
    a, b = coins.p_yes_given_true, coins.p_yes_given_false
    return math.sqrt(true_count * a * (1 - a) + (n - true_count) * b * (1 - b)) / coins.p


def estimate_count(agg: AggregateCount, coins: CoinPair) -> Estimate:
    _require_informative(coins)
    n = agg.n_participants
    raw = (agg.yes_count - (1.0 - coins.p) * coins.q * n) / coins.p
    clamped = min(max(raw, 0.0), float(n))
    # plug-in: evaluate the variance at the clamped estimated proportion
    return Estimate(raw=raw, clamped=clamped, stderr=stderr_of(n, coins, clamped / n))


def estimate_vector(per_cell_sums: Sequence[AggregateCount], coins: CoinPair) -> list[Estimate]:
    _require_informative(coins)
    ns = {a.n_participants for a in per_cell_sums}
    if len(ns) > 1:
        raise MismatchedN(f"cells disagree on participant count: {sorted(ns)}")
    return [estimate_count(a, coins) for a in per_cell_sums]
