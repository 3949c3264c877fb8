"""Checker configuration and its JSON file form."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Mapping

UNBOUNDED = "unbounded"


@dataclass(frozen=True)
class CheckerConfig:
    """Tunables of the online checker.

    ``dtw_threshold`` is either one distance for every reference series or a
    mapping ``series_id -> distance`` (``"*"`` acting as the fallback).
    ``dtw_band`` is a Sakoe-Chiba radius as a fraction of the reference
    length, or ``None`` for an unbounded warping window.
    """

    z_threshold: float = 3.0
    dtw_threshold: float | Mapping[str, float] = 1.0
    dtw_band: float | None = None
    znormalize_series: bool = False
    cold_start_n: int = 5
    prior_sigma_fraction: float = 0.1
    exclude_deviating: bool = True

    def __post_init__(self):
        if not self.z_threshold > 0:
            raise ValueError("z_threshold must be > 0")
        if self.dtw_band is not None and not 0 < self.dtw_band <= 1:
            raise ValueError("dtw_band must lie in (0, 1] or be unbounded")
        if self.cold_start_n < 0:
            raise ValueError("cold_start_n must be >= 0")
        if self.prior_sigma_fraction < 0:
            raise ValueError("prior_sigma_fraction must be >= 0")
        if isinstance(self.dtw_threshold, Mapping):
            object.__setattr__(self, "dtw_threshold", dict(self.dtw_threshold))

    def threshold_for(self, series_id: str) -> float:
        t = self.dtw_threshold
        if isinstance(t, Mapping):
            if series_id in t:
                return float(t[series_id])
            return float(t.get("*", CheckerConfig.dtw_threshold))
        return float(t)

    def to_json(self) -> dict:
        out = asdict(self)
        out["dtw_band"] = UNBOUNDED if self.dtw_band is None else self.dtw_band
        return out

    @classmethod
    def from_json(cls, obj: Mapping) -> "CheckerConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        kwargs = dict(obj)
        if kwargs.get("dtw_band") == UNBOUNDED:
            kwargs["dtw_band"] = None
        return cls(**kwargs)

    def replace(self, **changes) -> "CheckerConfig":
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        data.update({k: v for k, v in changes.items() if v is not None})
        return CheckerConfig(**data)


def load_config(path: str | Path) -> CheckerConfig:
    with open(path, encoding="utf-8") as fh:
        return CheckerConfig.from_json(json.load(fh))
