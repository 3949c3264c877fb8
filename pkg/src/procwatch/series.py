"""Sensor time series and the parametric golden reference curve."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class SensorSeries:
    """Timestamped numeric sequence; ``points`` are ``(offset_ms, value)`` pairs."""

    points: tuple
    unit: str = ""

    def __post_init__(self):
        pts = tuple((int(o), float(v)) for o, v in self.points)
        if not pts:
            raise ValueError("sensor series must hold at least one point")
        offsets = [o for o, _ in pts]
        if offsets[0] < 0:
            raise ValueError("series offsets must be non-negative")
        if any(b <= a for a, b in zip(offsets, offsets[1:])):
            raise ValueError("series offsets must be strictly increasing")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def values(self) -> np.ndarray:
        return np.array([v for _, v in self.points], dtype=float)

    @classmethod
    def from_values(cls, values, step_ms: int = 100, unit: str = "") -> "SensorSeries":
        return cls(tuple((i * step_ms, float(v)) for i, v in enumerate(values)), unit)

    def to_json(self) -> dict:
        return {"unit": self.unit, "points": [[o, v] for o, v in self.points]}

    @classmethod
    def from_json(cls, obj: dict) -> "SensorSeries":
        return cls(tuple(tuple(p) for p in obj["points"]), obj.get("unit", ""))


def is_series_json(obj) -> bool:
    return isinstance(obj, dict) and set(obj) == {"unit", "points"}


def golden_series(
    n: int = 100,
    low: float = 10.0,
    high: float = 12.0,
    ramp: float = 0.2,
    step_ms: int = 100,
    unit: str = "mm",
) -> SensorSeries:
    """Ramp-plateau-ramp curve: ``low`` rising to ``high`` over the first
    ``ramp`` fraction of the points, flat, then falling back over the last."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0 <= ramp <= 0.5:
        raise ValueError("ramp must lie in [0, 0.5]")
    x = np.arange(n) / max(n - 1, 1)
    up = np.clip(x / ramp, 0, 1) if ramp > 0 else np.ones(n)
    down = np.clip((1 - x) / ramp, 0, 1) if ramp > 0 else np.ones(n)
    values = low + (high - low) * np.minimum(up, down)
    return SensorSeries.from_values(values, step_ms=step_ms, unit=unit)


def perturb(series: SensorSeries, offset: float, noise: float, rng: np.random.Generator) -> SensorSeries:
    if noise < 0:
        raise ValueError("noise amplitude must be >= 0")
    values = series.values + offset
    if noise > 0:
        values = values + rng.normal(0.0, noise, size=len(values))
    return SensorSeries(tuple((o, float(v)) for (o, _), v in zip(series.points, values)), series.unit)


def load_references(directory: str | Path) -> dict[str, SensorSeries]:
    """Read every ``<series_id>.json`` file of a reference directory."""
    refs = {}
    for path in sorted(Path(directory).glob("*.json")):
        with open(path, encoding="utf-8") as fh:
            refs[path.stem] = SensorSeries.from_json(json.load(fh))
    return refs


def save_references(references: dict[str, SensorSeries], directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for sid, series in sorted(references.items()):
        (directory / f"{sid}.json").write_text(json.dumps(series.to_json()) + "\n", encoding="utf-8")
