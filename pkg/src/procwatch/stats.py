"""Streaming mean/variance and the z-score used for temporal checks."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .config import CheckerConfig


@dataclass(frozen=True)
class RunningStats:
    n: int = 0
    mean: float = 0.0
    m2: float = 0.0

    @property
    def variance(self) -> float | None:
        """Sample variance; ``None`` below two observations."""
        if self.n < 2:
            return None
        return self.m2 / (self.n - 1)

    @property
    def stddev(self) -> float | None:
        var = self.variance
        return None if var is None else math.sqrt(var)

    def to_json(self) -> dict:
        return {"n": self.n, "mean": self.mean, "m2": self.m2}

    @classmethod
    def from_json(cls, obj: dict) -> "RunningStats":
        return cls(int(obj["n"]), float(obj["mean"]), float(obj["m2"]))


def welford_update(s: RunningStats, x: float) -> RunningStats:
    n = s.n + 1
    delta = x - s.mean
    mean = s.mean + delta / n
    m2 = s.m2 + delta * (x - mean)
    return RunningStats(n, mean, max(m2, 0.0))


def zscore(x: float, s: RunningStats, config=None, prior_mean: float | None = None) -> float | None:
    """Signed z-score of ``x``, or ``None`` when there is nothing to judge by.

    Learned statistics are used once ``s.n >= cold_start_n``; before that the
    annotated mean ``prior_mean`` with a synthetic sigma of
    ``prior_sigma_fraction * prior_mean`` stands in. A zero sigma makes any
    departure from the mean infinitely surprising.
    """
    config = config or CheckerConfig()
    cold_start_n, prior_sigma_fraction = config.cold_start_n, config.prior_sigma_fraction
    if s.n >= max(cold_start_n, 2):
        return _z(x, s.mean, s.stddev)
    if prior_mean is not None:
        return _z(x, prior_mean, prior_sigma_fraction * prior_mean)
    return None


def _z(x: float, mean: float, sigma: float) -> float:
    diff = x - mean
    if sigma > 0:
        return diff / sigma
    if diff == 0:
        return 0.0
    return math.copysign(math.inf, diff)
