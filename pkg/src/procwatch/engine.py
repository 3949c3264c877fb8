"""Simulated process execution engine with fault injection.

The engine walks a model step by step, picks one legal interleaving with a
seeded generator and emits the lifecycle notifications a real engine would
send. Faulted occurrences get deterministic timing: ``ZeroDuration`` lasts
0 s and ``Delay`` lasts baseline + extra, neither is jittered.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import IO, Iterable, Iterator, Mapping

import numpy as np

from ._validation import check_non_negative, check_occurrence
from .model import (
    CALL_PREFIX,
    ControlFlowState,
    ModelError,
    ProcessModel,
    SubprocessCall,
    iter_nodes,
    parse_model,
    serialize_model,
)
from .series import SensorSeries, golden_series, is_series_json, perturb

SERIES_KEY = "series"
CORRELATE_KEY = "correlate"
DEFAULT_START_MS = 1_700_000_000_000
MAX_CALL_DEPTH = 32


class NotificationKind(str, Enum):
    INSTANCE_CREATED = "InstanceCreated"
    TASK_ENACTED = "TaskEnacted"
    TASK_FINISHED = "TaskFinished"
    MODEL_CHANGED = "ModelChanged"


class InapplicableFault(ValueError):
    pass


@dataclass(frozen=True)
class Notification:
    kind: NotificationKind
    instance_id: str
    model_id: str
    version: int
    timestamp: int
    task_id: str | None = None
    parent_instance_id: str | None = None
    data: dict = field(default_factory=dict)
    model_description: str | None = None

    def to_json(self) -> dict:
        return {
            "kind": self.kind.value,
            "instance": self.instance_id,
            "parent": self.parent_instance_id,
            "model": self.model_id,
            "version": self.version,
            "task": self.task_id,
            "ts": self.timestamp,
            "data": encode_data(self.data),
            "model_description": self.model_description,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "Notification":
        return cls(
            kind=NotificationKind(obj["kind"]),
            instance_id=str(obj["instance"]),
            model_id=str(obj["model"]),
            version=int(obj["version"]),
            timestamp=int(obj["ts"]),
            task_id=obj.get("task"),
            parent_instance_id=obj.get("parent"),
            data=decode_data(obj.get("data") or {}),
            model_description=obj.get("model_description"),
        )


def encode_data(data: Mapping) -> dict:
    return {k: (v.to_json() if isinstance(v, SensorSeries) else v) for k, v in data.items()}


def decode_data(data: Mapping) -> dict:
    return {k: (SensorSeries.from_json(v) if is_series_json(v) else v) for k, v in data.items()}


def write_notifications(notifications: Iterable[Notification], fh: IO[str]) -> int:
    count = 0
    for n in notifications:
        fh.write(json.dumps(n.to_json()) + "\n")
        count += 1
    return count


def read_notifications(fh: IO[str], errors: list | None = None) -> Iterator[Notification]:
    """Parse notification JSON-lines; ``errors`` collects bad lines instead of raising."""
    for lineno, line in enumerate(fh, 1):
        if not line.strip():
            continue
        try:
            yield Notification.from_json(json.loads(line))
        except (ValueError, KeyError, TypeError) as exc:
            if errors is None:
                raise ValueError(f"line {lineno}: {exc}") from exc
            errors.append((lineno, f"{type(exc).__name__}: {exc}"))


def attach_series(notification: Notification, series: SensorSeries) -> Notification:
    """Store a sensor series in a TaskFinished notification's data."""
    if notification.kind is not NotificationKind.TASK_FINISHED:
        raise ValueError(f"series can only be attached to TaskFinished, not {notification.kind.value}")
    return replace(notification, data={**notification.data, SERIES_KEY: series})


# -- faults ------------------------------------------------------------------

@dataclass(frozen=True)
class ZeroDuration:
    task_id: str
    occurrence: int = 1
    run: int | None = None


@dataclass(frozen=True)
class Delay:
    task_id: str
    occurrence: int = 1
    extra_seconds: float = 0.0
    phase: str = "duration"  # "duration" lengthens the task, "gap" postpones its start
    run: int | None = None


@dataclass(frozen=True)
class TamperSeries:
    task_id: str
    occurrence: int = 1
    offset: float = 0.0
    noise: float = 0.0
    run: int | None = None


@dataclass(frozen=True)
class SwapOrder:
    task_id_a: str
    task_id_b: str
    occurrence: int = 1
    run: int | None = None


@dataclass(frozen=True)
class DropEvent:
    task_id: str
    occurrence: int = 1
    which: str = "enact"
    run: int | None = None


@dataclass(frozen=True)
class ChangeModel:
    """Switch the running instance to ``model`` right after the task finishes."""

    task_id: str
    occurrence: int
    model: ProcessModel
    run: int | None = None


_FAULT_KINDS = {
    "zero_duration": ZeroDuration,
    "delay": Delay,
    "tamper_series": TamperSeries,
    "swap_order": SwapOrder,
    "drop_event": DropEvent,
    "change_model": ChangeModel,
}
_FAULT_NAMES = {v: k for k, v in _FAULT_KINDS.items()}
_JSON_FIELDS = {"task": "task_id", "task_a": "task_id_a", "task_b": "task_id_b"}


@dataclass(frozen=True)
class FaultPlan:
    faults: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "faults", tuple(self.faults))
        for f in self.faults:
            _check_fault(f)

    def for_run(self, run: int) -> list:
        return [f for f in self.faults if f.run is None or f.run == run]

    def to_json(self) -> dict:
        out = []
        for f in self.faults:
            entry = {"kind": _FAULT_NAMES[type(f)]}
            for name, value in vars(f).items():
                key = {v: k for k, v in _JSON_FIELDS.items()}.get(name, name)
                if name == "run" and value is None:
                    continue
                entry[key] = serialize_model(value) if isinstance(value, ProcessModel) else value
            out.append(entry)
        return {"faults": out}

    @classmethod
    def from_json(cls, obj: Mapping) -> "FaultPlan":
        faults = []
        for entry in obj.get("faults", []):
            entry = dict(entry)
            kind = entry.pop("kind", None)
            if kind not in _FAULT_KINDS:
                raise ValueError(f"unknown fault kind {kind!r}")
            kwargs = {_JSON_FIELDS.get(k, k): v for k, v in entry.items()}
            if kind == "change_model" and isinstance(kwargs.get("model"), str):
                kwargs["model"] = parse_model(kwargs["model"])
            try:
                faults.append(_FAULT_KINDS[kind](**kwargs))
            except TypeError as exc:
                raise ValueError(f"bad {kind} fault: {exc}") from None
        return cls(tuple(faults))


def _check_fault(f) -> None:
    check_occurrence(f.occurrence)
    if isinstance(f, Delay):
        check_non_negative(f.extra_seconds, "extra_seconds")
        if f.phase not in ("duration", "gap"):
            raise ValueError("delay phase must be 'duration' or 'gap'")
    elif isinstance(f, TamperSeries):
        check_non_negative(f.noise, "perturbation amplitude")
    elif isinstance(f, DropEvent):
        if f.which not in ("enact", "finish"):
            raise ValueError("drop_event 'which' must be 'enact' or 'finish'")
    elif isinstance(f, SwapOrder):
        if f.task_id_a == f.task_id_b:
            raise ValueError("swap_order needs two distinct tasks")


# -- clock -------------------------------------------------------------------

@dataclass(frozen=True)
class SimClock:
    """Simulated wall clock.

    Durations default to the task's ``dur`` annotation and then to
    ``default_duration``; gaps to the ``gap`` annotation and then to 0.
    ``jitter`` is the relative standard deviation of the lognormal spread.
    """

    start_ms: int = DEFAULT_START_MS
    baselines: Mapping[str, float] = field(default_factory=dict)
    jitter: float = 0.0
    default_duration: float = 1.0
    gaps: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        check_non_negative(self.jitter, "jitter")
        for task_id, seconds in self.baselines.items():
            if not seconds > 0:
                raise ValueError(f"baseline for {task_id!r} must be > 0")
        for task_id, seconds in self.gaps.items():
            check_non_negative(seconds, f"gap baseline for {task_id!r}")

    def duration_baseline(self, model: ProcessModel, task_id: str) -> float:
        if task_id in self.baselines:
            return float(self.baselines[task_id])
        task = model.task(task_id)
        if task is not None and task.expected_duration is not None:
            return task.expected_duration
        return self.default_duration

    def gap_baseline(self, model: ProcessModel, task_id: str) -> float:
        if task_id in self.gaps:
            return float(self.gaps[task_id])
        task = model.task(task_id)
        if task is not None and task.expected_gap_after is not None:
            return task.expected_gap_after
        return 0.0

    def to_json(self) -> dict:
        return {
            "start_ms": self.start_ms,
            "baselines": dict(self.baselines),
            "jitter": self.jitter,
            "default_duration": self.default_duration,
            "gaps": dict(self.gaps),
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "SimClock":
        return cls(**obj)


def _sample(rng: np.random.Generator, baseline: float, jitter: float) -> float:
    # always draw so faulted and clean runs stay aligned on the same seed
    z = rng.standard_normal()
    if jitter == 0 or baseline == 0:
        return baseline
    sigma2 = math.log1p(jitter * jitter)
    return baseline * math.exp(math.sqrt(sigma2) * z - sigma2 / 2)


# -- execution ---------------------------------------------------------------

class _Run:
    def __init__(self, repository, clock, faults, seed, references, series_noise, run_index):
        self.repository = repository
        self.clock = clock
        self.seed = seed
        self.references = references or {}
        self.series_noise = series_noise
        plan_seq, time_seq, series_seq = np.random.SeedSequence(seed).spawn(3)
        self.rng_plan = np.random.default_rng(plan_seq)
        self.rng_time = np.random.default_rng(time_seq)
        self.rng_series = np.random.default_rng(series_seq)
        self.faults = faults.for_run(run_index)
        self.applied: set[int] = set()
        self.counts: dict[str, int] = {}
        self.planned: dict[str, int] = {}
        self.now = clock.start_ms
        self.out: list[Notification] = []
        self.n_instances = 0
        self.run_index = run_index

    def new_instance_id(self) -> str:
        self.n_instances += 1
        key = f"{self.seed}/{self.run_index}/{self.n_instances}".encode()
        return hashlib.sha256(key).hexdigest()[:8]

    def find(self, cls, task_id: str, occurrence: int):
        for i, f in enumerate(self.faults):
            if isinstance(f, cls) and f.task_id == task_id and f.occurrence == occurrence:
                self.applied.add(i)
                return f
        return None

    def emit(self, **kwargs) -> Notification:
        n = Notification(**kwargs)
        self.out.append(n)
        return n

    def plan(self, model: ProcessModel) -> list[tuple]:
        """Choose one legal step order; model changes are folded in."""
        steps: list[tuple] = []
        state = ControlFlowState.initial(model, calls=True)
        current = model
        local: dict[str, int] = {}
        while True:
            options = sorted(state.allowed())
            if not options:
                if not state.complete:
                    raise ModelError(f"model {current.model_id!r} cannot complete")
                break
            step = options[int(self.rng_plan.integers(len(options)))] if len(options) > 1 else options[0]
            state.advance(step)
            change = None
            if not step.startswith(CALL_PREFIX) and step in current.tasks:
                local[step] = local.get(step, 0) + 1
                occ = self.planned.get(step, 0) + local[step]
                fault = self.find(ChangeModel, step, occ)
                if fault is not None:
                    change = fault.model
                    if change.model_id != current.model_id or change.version <= current.version:
                        raise InapplicableFault(
                            f"inapplicable fault: model change must keep id {current.model_id!r} "
                            f"and raise version above {current.version}"
                        )
                    prefix = [s[0] for s in steps] + [step]
                    state = ControlFlowState.after(change, prefix, calls=True)
                    if not state.states:
                        raise InapplicableFault(
                            f"inapplicable fault: execution so far is illegal under {change.model_id} "
                            f"version {change.version}"
                        )
                    current = change
            steps.append((step, change))
        for step_id, n in local.items():
            self.planned[step_id] = self.planned.get(step_id, 0) + n
        self.swap(steps)
        return steps

    def swap(self, steps: list[tuple]) -> None:
        for i, f in enumerate(self.faults):
            if not isinstance(f, SwapOrder):
                continue
            pos = {}
            for task_id in (f.task_id_a, f.task_id_b):
                seen = self.planned.get(task_id, 0) - sum(1 for s in steps if s[0] == task_id)
                for k, s in enumerate(steps):
                    if s[0] == task_id:
                        seen += 1
                        if seen == f.occurrence:
                            pos[task_id] = k
                            break
            if len(pos) == 2:
                a, b = pos[f.task_id_a], pos[f.task_id_b]
                steps[a], steps[b] = steps[b], steps[a]
                self.applied.add(i)

    def instance(self, model: ProcessModel, parent: str | None, correlate: bool, depth: int) -> None:
        if depth > MAX_CALL_DEPTH:
            raise ModelError(f"subprocess calls nested deeper than {MAX_CALL_DEPTH}")
        iid = self.new_instance_id()
        data = {} if parent is None else {CORRELATE_KEY: correlate}
        self.emit(
            kind=NotificationKind.INSTANCE_CREATED, instance_id=iid, parent_instance_id=parent,
            model_id=model.model_id, version=model.version, timestamp=self.now, data=data,
            model_description=serialize_model(model),
        )
        current = model
        for step, change in self.plan(model):
            if step.startswith(CALL_PREFIX):
                call_id = step[len(CALL_PREFIX):]
                if call_id not in self.repository:
                    raise ModelError(f"unresolved subprocess reference {call_id!r}")
                node_correlate = _call_correlation(current, call_id)
                self.instance(self.repository[call_id], iid, node_correlate, depth + 1)
                continue
            self.task(current, iid, parent, step)
            if change is not None:
                current = change
                self.emit(
                    kind=NotificationKind.MODEL_CHANGED, instance_id=iid, parent_instance_id=parent,
                    model_id=current.model_id, version=current.version, timestamp=self.now,
                    model_description=serialize_model(current),
                )

    def task(self, model: ProcessModel, iid: str, parent: str | None, step: str) -> None:
        is_signal = step not in model.tasks
        common = dict(instance_id=iid, parent_instance_id=parent, model_id=model.model_id,
                      version=model.version, task_id=step)
        if is_signal:
            self.emit(kind=NotificationKind.TASK_ENACTED, timestamp=self.now, **common)
            self.emit(kind=NotificationKind.TASK_FINISHED, timestamp=self.now, data={"signal": True}, **common)
            return
        occ = self.counts.get(step, 0) + 1
        self.counts[step] = occ
        baseline = self.clock.duration_baseline(model, step)
        seconds = _sample(self.rng_time, baseline, self.clock.jitter)
        gap = _sample(self.rng_time, self.clock.gap_baseline(model, step), self.clock.jitter)
        delay = self.find(Delay, step, occ)
        if delay is not None and delay.phase == "gap":
            self.now += round(delay.extra_seconds * 1000)
        if self.find(ZeroDuration, step, occ) is not None:
            seconds = 0.0
        elif delay is not None and delay.phase == "duration":
            seconds = baseline + delay.extra_seconds
        drop = self.find(DropEvent, step, occ)
        start = self.now
        if not (drop is not None and drop.which == "enact"):
            self.emit(kind=NotificationKind.TASK_ENACTED, timestamp=start, **common)
        self.now = start + round(seconds * 1000)
        data = {}
        ref = model.tasks[step].reference_series_id
        tamper = self.find(TamperSeries, step, occ)
        if ref is not None:
            series = self.references.get(ref) or golden_series()
            if self.series_noise > 0:
                series = perturb(series, 0.0, self.series_noise, self.rng_series)
            if tamper is not None:
                series = perturb(series, tamper.offset, tamper.noise, self.rng_series)
        elif tamper is not None:
            raise InapplicableFault(f"inapplicable fault: task {step!r} produces no sensor series")
        finished = Notification(kind=NotificationKind.TASK_FINISHED, timestamp=self.now, data=data, **common)
        if ref is not None:
            finished = attach_series(finished, series)
        if not (drop is not None and drop.which == "finish"):
            self.out.append(finished)
        self.now += round(gap * 1000)


def _call_correlation(model: ProcessModel, call_id: str) -> bool:
    for node in iter_nodes(model.root):
        if isinstance(node, SubprocessCall) and node.model_id == call_id:
            return node.correlate_to_root
    return True


def run_instance(
    model: ProcessModel,
    clock: SimClock | None = None,
    faults: FaultPlan | None = None,
    seed: int = 0,
    *,
    repository: Mapping[str, ProcessModel] | None = None,
    references: Mapping[str, SensorSeries] | None = None,
    series_noise: float = 0.0,
    run_index: int = 0,
) -> list[Notification]:
    """Execute one instance of ``model`` and return its notifications.

    Subprocess calls resolve through ``repository`` and run inline, their
    notifications carrying the caller as parent. Output is a pure function
    of the arguments.
    """
    clock = clock or SimClock()
    faults = faults or FaultPlan()
    check_non_negative(series_noise, "series_noise")
    repo = dict(repository or {})
    repo.setdefault(model.model_id, model)
    run = _Run(repo, clock, faults, seed, references, series_noise, run_index)
    run.instance(model, None, True, 0)
    unused = [f for i, f in enumerate(run.faults) if i not in run.applied]
    if unused:
        raise InapplicableFault("inapplicable fault(s): " + "; ".join(_describe(f) for f in unused))
    return run.out


def _describe(f) -> str:
    if isinstance(f, SwapOrder):
        return f"swap_order {f.task_id_a}/{f.task_id_b} occurrence {f.occurrence} never executes"
    return f"{_FAULT_NAMES[type(f)]} on {f.task_id!r} occurrence {f.occurrence} never executes"


def simulate_runs(
    repository: Mapping[str, ProcessModel],
    root: str,
    clock: SimClock | None = None,
    faults: FaultPlan | None = None,
    seed: int = 0,
    runs: int = 1,
    *,
    references: Mapping[str, SensorSeries] | None = None,
    series_noise: float = 0.0,
    spacing_ms: int = 60_000,
) -> list[Notification]:
    """Run ``runs`` instances back to back; run ``i`` uses seed ``seed + i``."""
    clock = clock or SimClock()
    if root not in repository:
        raise ModelError(f"unknown root model {root!r}")
    out: list[Notification] = []
    start = clock.start_ms
    for i in range(runs):
        notes = run_instance(
            repository[root], replace(clock, start_ms=start), faults, seed + i,
            repository=repository, references=references, series_noise=series_noise, run_index=i,
        )
        out.extend(notes)
        start = notes[-1].timestamp + spacing_ms
    return out
