"""Online conformance checking of an event stream.

Temporal checks (task duration and inter-task gap) use z-scores against
per-task running statistics, sensor series are compared to golden references
with DTW, starts are checked against the model's control flow, and ad-hoc
model changes are reported as process evolution.
"""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np
from sklearn.base import BaseEstimator

from .config import CheckerConfig
from .dtw import dtw_distance
from .engine import SERIES_KEY
from .events import START, Event, ModelRecord, StreamItem
from .model import ControlFlowState, ProcessModel, Task, allowed_next
from .series import SensorSeries
from .stats import RunningStats, welford_update, zscore

log = logging.getLogger(__name__)

SNAPSHOT_FORMAT = "procwatch-snapshot/1"
DTW_THRESHOLD_FLOOR = 1e-6


class DeviationKind(str, Enum):
    TIME_DURATION = "TimeDuration"
    TIME_GAP = "TimeGap"
    SENSOR_DATA = "SensorData"
    CONTROL_FLOW = "ControlFlow"
    MODEL_EVOLUTION = "ModelEvolution"


class RootCause(str, Enum):
    WORK_ORGANIZATION = "WorkOrganization"
    WORKPIECE_QUALITY = "WorkpieceQuality/ResourceDegradation"
    AD_HOC_CHANGE = "AdHocChange"
    PROCESS_EVOLUTION = "ProcessEvolution"


ROOT_CAUSE = {
    DeviationKind.TIME_DURATION: RootCause.WORK_ORGANIZATION,
    DeviationKind.TIME_GAP: RootCause.WORK_ORGANIZATION,
    DeviationKind.SENSOR_DATA: RootCause.WORKPIECE_QUALITY,
    DeviationKind.CONTROL_FLOW: RootCause.AD_HOC_CHANGE,
    DeviationKind.MODEL_EVOLUTION: RootCause.PROCESS_EVOLUTION,
}
TEMPORAL = (DeviationKind.TIME_DURATION, DeviationKind.TIME_GAP)


@dataclass(frozen=True)
class Deviation:
    kind: DeviationKind
    case_id: str
    part_id: str | None
    task_id: str | None
    score: float
    threshold: float
    timestamp: int
    explanation: str = ""

    def __post_init__(self):
        if not self.score >= 0:
            raise ValueError("deviation score must be >= 0")

    @property
    def root_cause(self) -> RootCause:
        return ROOT_CAUSE[self.kind]

    def to_json(self) -> dict:
        return {
            "kind": self.kind.value,
            "case": self.case_id,
            "part": self.part_id,
            "task": self.task_id,
            "score": self.score,
            "threshold": self.threshold,
            "root_cause": self.root_cause.value,
            "explanation": self.explanation,
            "ts": self.timestamp,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "Deviation":
        return cls(DeviationKind(obj["kind"]), obj["case"], obj.get("part"), obj.get("task"),
                   float(obj["score"]), float(obj["threshold"]), int(obj["ts"]), obj.get("explanation", ""))


def trace_cost(deviations: Iterable[Deviation]) -> float:
    """Aggregate cost of one part's (or case's) deviations.

    Temporal: ``max(0, |z| - threshold)``; sensor: distance / threshold;
    control flow: one per unexpected move; model evolution: one per change.
    """
    cost = 0.0
    for d in deviations:
        if d.kind in TEMPORAL:
            cost += max(0.0, d.score - d.threshold)
        elif d.kind is DeviationKind.SENSOR_DATA:
            cost += d.score / d.threshold if d.threshold > 0 else math.inf
        elif d.kind is DeviationKind.CONTROL_FLOW:
            cost += d.score
        else:
            cost += 1.0
    return cost


def check_order(e: Event, prefix: Iterable[str], model: ProcessModel) -> Deviation | None:
    """Flag a start event whose task cannot follow ``prefix`` (the started steps)."""
    if e.lifecycle_transition != START:
        return None
    allowed = allowed_next(model, prefix)
    if e.task_id in allowed:
        return None
    return _order_deviation(e, allowed)


def _order_deviation(e: Event, allowed: set[str]) -> Deviation:
    expected = ", ".join(sorted(allowed)) if allowed else "nothing"
    return Deviation(
        DeviationKind.CONTROL_FLOW, e.case_id, e.part_id, e.task_id, 1.0, 0.0, e.timestamp,
        f"task {e.task_id} started out of order; expected {expected}",
    )


def check_series(
    e: Event,
    references: Mapping[str, SensorSeries],
    config: CheckerConfig,
    series_id: str,
) -> Deviation | None:
    """Compare the event's series to reference ``series_id``."""
    observed = e.attributes.get(SERIES_KEY)
    if not isinstance(observed, SensorSeries):
        return None
    reference = references.get(series_id)
    if reference is None:
        log.warning("no golden reference %r for task %s; series not judged", series_id, e.task_id)
        return None
    threshold = config.threshold_for(series_id)
    try:
        distance = dtw_distance(observed, reference, band=config.dtw_band, normalize=config.znormalize_series)
    except ValueError as exc:
        return Deviation(DeviationKind.SENSOR_DATA, e.case_id, e.part_id, e.task_id, math.inf, threshold,
                         e.timestamp, f"series of task {e.task_id} cannot be aligned to {series_id}: {exc}")
    if distance <= threshold:
        return None
    return Deviation(
        DeviationKind.SENSOR_DATA, e.case_id, e.part_id, e.task_id, distance, threshold, e.timestamp,
        f"series of task {e.task_id} deviates from reference {series_id}: "
        f"DTW distance {distance:.4f} > {threshold:.4f}",
    )


# -- checker state -----------------------------------------------------------

class _Instance:
    __slots__ = ("model", "flow", "prefix", "skipped", "open")

    def __init__(self, model: ProcessModel | None):
        self.model = model
        self.flow = ControlFlowState.initial(model) if model is not None else None
        self.prefix: list[str] = []
        self.skipped: Counter = Counter()
        self.open: dict[str, list[int]] = {}

    def task(self, task_id: str) -> Task | None:
        return self.model.task(task_id) if self.model is not None else None

    @property
    def model_id(self) -> str:
        return self.model.model_id if self.model is not None else ""


@dataclass
class _Lane:
    last_complete: tuple | None = None  # (ts, model_id, task_id, Task | None)


@dataclass
class _Observation:
    kind: str
    key: tuple
    value: float


class ConformanceChecker(BaseEstimator):
    """Online multi-perspective conformance checker.

    ``fit`` learns per-task duration/gap statistics and per-reference DTW
    thresholds from conforming runs; ``predict`` (or the lazy ``check``)
    turns a stream of events and model records into deviations. Without
    fitting, checks start from the model's duration annotations.

    Parameters mirror :class:`CheckerConfig`; ``references`` maps series
    ids to golden :class:`SensorSeries`.
    """

    def __init__(
        self,
        z_threshold=3.0,
        dtw_threshold=1.0,
        dtw_band=None,
        znormalize_series=False,
        cold_start_n=5,
        prior_sigma_fraction=0.1,
        exclude_deviating=True,
        references=None,
    ):
        self.z_threshold = z_threshold
        self.dtw_threshold = dtw_threshold
        self.dtw_band = dtw_band
        self.znormalize_series = znormalize_series
        self.cold_start_n = cold_start_n
        self.prior_sigma_fraction = prior_sigma_fraction
        self.exclude_deviating = exclude_deviating
        self.references = references

    @classmethod
    def from_config(cls, config: CheckerConfig, references=None) -> "ConformanceChecker":
        return cls(**{k: v for k, v in config.to_json().items() if k != "dtw_band"},
                   dtw_band=config.dtw_band, references=references)

    @property
    def config(self) -> CheckerConfig:
        threshold = self.dtw_threshold
        fitted = getattr(self, "dtw_thresholds_", None)
        if fitted:
            base = dict(threshold) if isinstance(threshold, Mapping) else {"*": float(threshold)}
            threshold = {**base, **fitted}
        return CheckerConfig(
            z_threshold=self.z_threshold,
            dtw_threshold=threshold,
            dtw_band=self.dtw_band,
            znormalize_series=self.znormalize_series,
            cold_start_n=self.cold_start_n,
            prior_sigma_fraction=self.prior_sigma_fraction,
            exclude_deviating=self.exclude_deviating,
        )

    # state management

    def _ensure_state(self) -> None:
        if not hasattr(self, "stats_"):
            self.stats_ = {}
        if not hasattr(self, "_instances"):
            self.reset()

    def reset(self) -> "ConformanceChecker":
        """Forget per-case state (learned statistics are kept)."""
        self._config = self.config
        self._instances: dict[str, _Instance] = {}
        self._lanes: dict[tuple, _Lane] = {}
        self._cases: set[str] = set()
        self.deviations_: list[Deviation] = []
        self.parts_: dict[tuple, None] = {}
        self._last_part: dict[str, str | None] = {}
        self.diagnostics_: list[str] = []
        return self

    def fit(self, X: Iterable[StreamItem], y=None) -> "ConformanceChecker":
        """Learn statistics and DTW thresholds from conforming runs."""
        self.stats_ = {}
        self.dtw_thresholds_ = {}
        self.reset()
        distances: dict[str, list[float]] = {}
        for item in X:
            for obs in self._observe(item, learn=True):
                if obs.kind == "series":
                    distances.setdefault(obs.key[0], []).append(obs.value)
        if len(self._cases) < 2:
            raise ValueError(f"calibration needs at least 2 conforming runs, got {len(self._cases)}")
        for sid, d in sorted(distances.items()):
            arr = np.asarray(d, dtype=float)
            spread = arr.std(ddof=1) if arr.size > 1 else 0.0
            self.dtw_thresholds_[sid] = max(float(arr.mean() + 3 * spread), DTW_THRESHOLD_FLOOR)
        self.n_cases_fit_ = len(self._cases)
        self.reset()
        return self

    def observe(self, item: StreamItem) -> list[Deviation]:
        """Check one stream item and return the deviations it triggers."""
        self._ensure_state()
        found = [o for o in self._observe(item, learn=False) if isinstance(o, Deviation)]
        self.deviations_.extend(found)
        return found

    def check(self, X: Iterable[StreamItem]) -> Iterator[Deviation]:
        """Lazily check a stream; each deviation is yielded before the next item is read."""
        self._ensure_state()
        for item in X:
            yield from self.observe(item)

    def predict(self, X: Iterable[StreamItem]) -> list[Deviation]:
        return list(self.check(X))

    def costs(self) -> dict[tuple, float]:
        """Cost per ``(case_id, part_id)`` seen so far (part ``None`` = case level)."""
        self._ensure_state()
        grouped: dict[tuple, list[Deviation]] = {key: [] for key in self.parts_}
        for d in self.deviations_:
            grouped.setdefault((d.case_id, d.part_id), []).append(d)
        return {key: trace_cost(devs) for key, devs in grouped.items()}

    # core

    def _observe(self, item: StreamItem, learn: bool) -> list:
        cfg = self._config
        if isinstance(item, ModelRecord):
            return self._model_record(item, learn)
        e = item
        self._cases.add(e.case_id)
        self.parts_.setdefault((e.case_id, e.part_id), None)
        self._last_part[e.case_id] = e.part_id
        inst = self._instances.get(e.source_instance_id)
        if inst is None:
            self.diagnostics_.append(f"no model known for instance {e.source_instance_id}")
            inst = self._instances[e.source_instance_id] = _Instance(None)
        lane = self._lanes.setdefault((e.case_id, e.part_id), _Lane())
        out: list = []
        task = inst.task(e.task_id)
        if e.lifecycle_transition == START:
            if not learn:
                dev = self._order(inst, e)
                if dev is not None:
                    out.append(dev)
            if lane.last_complete is not None:
                prev_ts, prev_model, prev_task_id, prev_task = lane.last_complete
                gap = (e.timestamp - prev_ts) / 1000
                prior = prev_task.expected_gap_after if prev_task is not None else None
                key = ("gap", prev_model, prev_task_id)
                out += self._temporal(DeviationKind.TIME_GAP, key, gap, prior, e, learn, cfg,
                                      f"gap after {prev_task_id} before {e.task_id}")
            inst.open.setdefault(e.task_id, []).append(e.timestamp)
            return out
        starts = inst.open.get(e.task_id)
        if not starts:
            if not learn:
                out.append(Deviation(
                    DeviationKind.CONTROL_FLOW, e.case_id, e.part_id, e.task_id, 1.0, 0.0, e.timestamp,
                    f"task {e.task_id} completed without a matching start (lifecycle anomaly)",
                ))
        else:
            started = starts.pop(0)
            duration = (e.timestamp - started) / 1000
            prior = task.expected_duration if task is not None else None
            label = task.label if task is not None else e.task_id
            key = ("duration", inst.model_id, e.task_id)
            out += self._temporal(DeviationKind.TIME_DURATION, key, duration, prior, e, learn, cfg,
                                  f"task {e.task_id} ({label}) took")
        if task is not None and task.reference_series_id is not None:
            out += self._series(e, task.reference_series_id, learn, cfg)
        lane.last_complete = (e.timestamp, inst.model_id, e.task_id, task)
        return out

    def _temporal(self, kind, key, x, prior, e, learn, cfg, what) -> list:
        stats = self.stats_.get(key, RunningStats())
        if learn:
            self.stats_[key] = welford_update(stats, x)
            return [_Observation(kind.value, key, x)]
        z = zscore(x, stats, cfg, prior)
        flagged = z is not None and abs(z) > cfg.z_threshold
        if not flagged or not cfg.exclude_deviating:
            self.stats_[key] = welford_update(stats, x)
        if not flagged:
            return []
        warm = stats.n >= max(cfg.cold_start_n, 2)
        expected = stats.mean if warm else prior
        basis = "learned mean" if warm else "annotated"
        if kind is DeviationKind.TIME_DURATION:
            text = f"{what} {x:.3f} s; expected ~{expected:.3f} s ({basis})"
        else:
            text = f"{what} was {x:.3f} s; expected ~{expected:.3f} s ({basis})"
        text += f", z={z:+.2f}, threshold {cfg.z_threshold:g}"
        return [Deviation(kind, e.case_id, e.part_id, e.task_id, abs(z), cfg.z_threshold, e.timestamp, text)]

    def _series(self, e: Event, series_id: str, learn: bool, cfg: CheckerConfig) -> list:
        references = self.references or {}
        if learn:
            observed = e.attributes.get(SERIES_KEY)
            reference = references.get(series_id)
            if isinstance(observed, SensorSeries) and reference is not None:
                d = dtw_distance(observed, reference, band=cfg.dtw_band, normalize=cfg.znormalize_series)
                return [_Observation("series", (series_id,), d)]
            return []
        if isinstance(e.attributes.get(SERIES_KEY), SensorSeries) and series_id not in references:
            self.diagnostics_.append(f"missing golden reference {series_id!r} for task {e.task_id}")
        dev = check_series(e, references, cfg, series_id)
        return [dev] if dev is not None else []

    def _order(self, inst: _Instance, e: Event) -> Deviation | None:
        if inst.flow is None:
            return None
        if inst.flow.advance(e.task_id):
            inst.prefix.append(e.task_id)
            self._absorb(inst)
            return None
        dev = _order_deviation(e, inst.flow.allowed())
        inst.skipped[e.task_id] += 1
        return dev

    @staticmethod
    def _absorb(inst: _Instance) -> None:
        # a step already seen out of order is consumed once the model reaches it
        progress = True
        while progress:
            progress = False
            for step in sorted(s for s, n in inst.skipped.items() if n > 0):
                if inst.flow.advance(step):
                    inst.prefix.append(step)
                    inst.skipped[step] -= 1
                    progress = True
                    break

    def _model_record(self, rec: ModelRecord, learn: bool) -> list:
        self._cases.add(rec.case_id)
        model = rec.parsed() if rec.description else None
        if not rec.change:
            self._instances[rec.source_instance_id] = _Instance(model)
            return []
        inst = self._instances.get(rec.source_instance_id)
        if inst is None:
            self.diagnostics_.append(f"model change for unknown instance {rec.source_instance_id} quarantined")
            return []
        return self.check_model_change(rec, inst, model, learn)

    def check_model_change(self, rec: ModelRecord, inst: _Instance, model: ProcessModel | None,
                           learn: bool = False) -> list:
        old = inst.model
        if old is not None and model is not None:
            for task_id, task in model.tasks.items():
                before = old.task(task_id)
                if before is None or before.expected_duration != task.expected_duration:
                    self.stats_.pop(("duration", model.model_id, task_id), None)
                if before is None or before.expected_gap_after != task.expected_gap_after:
                    self.stats_.pop(("gap", model.model_id, task_id), None)
        inst.model = model
        if model is not None:
            inst.flow = ControlFlowState.after(model, inst.prefix)
            if not inst.flow.states:
                self.diagnostics_.append(
                    f"execution of {rec.source_instance_id} so far is illegal under {model.model_id} "
                    f"version {model.version}"
                )
        if learn:
            return []
        part = self._current_part(rec.case_id)
        return [Deviation(
            DeviationKind.MODEL_EVOLUTION, rec.case_id, part, None, 1.0, 0.0, rec.timestamp,
            f"instance {rec.source_instance_id} changed to {rec.model_id} version {rec.version}",
        )]

    def _current_part(self, case_id: str) -> str | None:
        return self._last_part.get(case_id)

    # persistence

    def snapshot(self) -> dict:
        self._ensure_state()
        stats = [
            {"kind": k[0], "model": k[1], "task": k[2], **s.to_json()}
            for k, s in sorted(self.stats_.items())
        ]
        return {"format": SNAPSHOT_FORMAT, "config": self.config.to_json(), "stats": stats}

    def save_snapshot(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.snapshot(), indent=1, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def from_snapshot(cls, snap: Mapping, references=None, **overrides) -> "ConformanceChecker":
        if snap.get("format") != SNAPSHOT_FORMAT:
            raise ValueError(f"not a checker snapshot: format {snap.get('format')!r}")
        config = CheckerConfig.from_json(snap["config"]).replace(**overrides)
        checker = cls.from_config(config, references=references)
        checker.stats_ = {
            (s["kind"], s["model"], s["task"]): RunningStats.from_json(s) for s in snap.get("stats", [])
        }
        checker.reset()
        return checker

    @classmethod
    def load_snapshot(cls, path: str | Path, references=None, **overrides) -> "ConformanceChecker":
        with open(path, encoding="utf-8") as fh:
            return cls.from_snapshot(json.load(fh), references=references, **overrides)
