"""Input validation helpers shared by the estimators and free functions."""

from __future__ import annotations

import math

import numpy as np

from .series import SensorSeries


def check_values(obj, name: str = "series") -> np.ndarray:
    """Return a finite, non-empty 1-D float array from a series or sequence."""
    if isinstance(obj, SensorSeries):
        values = obj.values
    else:
        values = np.asarray(obj, dtype=float)
    if values.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {values.shape}")
    if values.size == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(values)):
        raise ValueError(f"{name} contains non-finite values")
    return values


def check_occurrence(value, what: str = "occurrence") -> int:
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        raise ValueError(f"{what} must be an integer >= 1, got {value!r}")
    return value


def check_non_negative(value, what: str) -> float:
    value = float(value)
    if not math.isfinite(value) or value < 0:
        raise ValueError(f"{what} must be a finite number >= 0, got {value!r}")
    return value
