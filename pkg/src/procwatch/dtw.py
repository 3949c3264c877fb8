"""Dynamic time warping between sensor series.

Absolute-difference cost, symmetric step pattern (down, right, diagonal),
no slope weighting. Only two rows of the cost matrix are kept.
"""

from __future__ import annotations

import math

import numpy as np

from ._validation import check_values


def znormalize(values: np.ndarray) -> np.ndarray:
    std = values.std()
    if std == 0:
        return np.zeros_like(values)
    return (values - values.mean()) / std


def band_radius(band: float | None, reference_length: int) -> int | None:
    """Sakoe-Chiba radius for a band given as fraction of the reference length."""
    if band is None:
        return None
    if not 0 < band <= 1:
        raise ValueError("band must lie in (0, 1]")
    return max(1, math.ceil(band * reference_length))


def dtw_distance(a, b, band: float | None = None, normalize: bool = False, *, radius: int | None = None) -> float:
    """DTW distance of observed ``a`` against reference ``b``.

    ``a`` and ``b`` may be :class:`SensorSeries` or plain sequences of
    numbers. ``band`` (fraction of ``len(b)``) or ``radius`` (cells) restricts
    the path to ``|i - j| <= radius``.
    """
    x = check_values(a, name="a")
    y = check_values(b, name="b")
    if normalize:
        x, y = znormalize(x), znormalize(y)
    n, m = len(x), len(y)
    if radius is None:
        radius = band_radius(band, m)
    if radius is not None:
        if radius < 0:
            raise ValueError("radius must be >= 0")
        if abs(n - m) > radius:
            raise ValueError(f"band radius {radius} admits no warping path for lengths {n} and {m}")
    # rows run over the shorter series to bound memory
    if m > n:
        x, y, n, m = y, x, m, n
    xs, ys = x.tolist(), y.tolist()
    inf = math.inf
    prev = [inf] * (m + 1)
    prev[0] = 0.0
    for i in range(1, n + 1):
        cur = [inf] * (m + 1)
        if radius is None:
            lo, hi = 1, m
        else:
            lo, hi = max(1, i - radius), min(m, i + radius)
        xi = xs[i - 1]
        for j in range(lo, hi + 1):
            best = prev[j - 1]
            if prev[j] < best:
                best = prev[j]
            if cur[j - 1] < best:
                best = cur[j - 1]
            cur[j] = abs(xi - ys[j - 1]) + best
        prev = cur
    return prev[m]
