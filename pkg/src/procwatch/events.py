"""Logger: engine notifications to XES-style events, traces and persisted logs."""

from __future__ import annotations

import bisect
import copy
import json
import logging
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import IO, Iterable, Iterator, Mapping, Union

from .engine import CORRELATE_KEY, Notification, NotificationKind, decode_data, encode_data
from .model import ModelError, ProcessModel, parse_model

log = logging.getLogger(__name__)

START = "start"
COMPLETE = "complete"
LIFECYCLE_ANOMALY = "lifecycle anomaly"
OUT_OF_ORDER = "out-of-order timestamp"


@dataclass(frozen=True)
class Event:
    case_id: str
    source_instance_id: str
    task_id: str
    concept_name: str
    lifecycle_transition: str
    timestamp: int
    org_resource: str | None = None
    attributes: dict = field(default_factory=dict)
    part_id: str | None = None
    seq: int = field(default=0, compare=False)

    def to_json(self) -> dict:
        out = {
            "case": self.case_id,
            "source_instance": self.source_instance_id,
            "task": self.task_id,
            "name": self.concept_name,
            "lifecycle": self.lifecycle_transition,
            "ts": self.timestamp,
            "resource": self.org_resource,
            "attrs": encode_data(self.attributes),
        }
        if self.part_id is not None:
            out["part"] = self.part_id
        return out

    @classmethod
    def from_json(cls, obj: Mapping) -> "Event":
        lifecycle = obj["lifecycle"]
        if lifecycle not in (START, COMPLETE):
            raise ValueError(f"unknown lifecycle transition {lifecycle!r}")
        return cls(
            case_id=str(obj["case"]),
            source_instance_id=str(obj.get("source_instance") or obj["case"]),
            task_id=str(obj.get("task") or obj["name"]),
            concept_name=str(obj["name"]),
            lifecycle_transition=lifecycle,
            timestamp=int(obj["ts"]),
            org_resource=obj.get("resource"),
            attributes=decode_data(obj.get("attrs") or {}),
            part_id=obj.get("part"),
        )


@dataclass(frozen=True)
class ModelRecord:
    """Model description bound to an instance; ``change`` marks an ad-hoc change."""

    case_id: str
    source_instance_id: str
    parent_instance_id: str | None
    model_id: str
    version: int
    description: str
    timestamp: int
    change: bool = False
    seq: int = field(default=0, compare=False)

    def to_json(self) -> dict:
        return {
            "case": self.case_id,
            "source_instance": self.source_instance_id,
            "parent": self.parent_instance_id,
            "model": self.model_id,
            "version": self.version,
            "model_description": self.description,
            "ts": self.timestamp,
            "change": self.change,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "ModelRecord":
        return cls(
            case_id=str(obj["case"]),
            source_instance_id=str(obj["source_instance"]),
            parent_instance_id=obj.get("parent"),
            model_id=str(obj["model"]),
            version=int(obj["version"]),
            description=str(obj["model_description"]),
            timestamp=int(obj["ts"]),
            change=bool(obj.get("change", False)),
        )

    def parsed(self) -> ProcessModel:
        return parse_model(self.description)


StreamItem = Union[Event, ModelRecord]


def item_to_json(item: StreamItem) -> dict:
    return item.to_json()


def item_from_json(obj: Mapping) -> StreamItem:
    if "model_description" in obj:
        return ModelRecord.from_json(obj)
    return Event.from_json(obj)


def dump_items(items: Iterable[StreamItem], fh: IO[str]) -> int:
    count = 0
    for item in items:
        fh.write(json.dumps(item.to_json()) + "\n")
        count += 1
    return count


def load_items(fh: IO[str], errors: list | None = None) -> Iterator[StreamItem]:
    """Parse an event-stream JSON-lines file.

    Malformed lines raise unless ``errors`` is given, in which case they are
    recorded as ``(line_number, message)`` and skipped.
    """
    for lineno, line in enumerate(fh, 1):
        if not line.strip():
            continue
        try:
            yield item_from_json(json.loads(line))
        except (ValueError, KeyError, TypeError) as exc:
            if errors is None:
                raise ValueError(f"line {lineno}: {exc}") from exc
            errors.append((lineno, f"{type(exc).__name__}: {exc}"))


@dataclass
class Trace:
    case_id: str
    events: list = field(default_factory=list)
    models: list = field(default_factory=list)
    open: bool = True
    flags: set = field(default_factory=set)
    _open: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def versions(self) -> list[tuple[str, int]]:
        return [(m.model_id, m.version) for m in self.models]

    def items(self) -> list[StreamItem]:
        return sorted(self.events + self.models, key=lambda x: x.seq)


@dataclass
class Log:
    traces: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    _seq: int = 0

    def __len__(self) -> int:
        return len(self.traces)

    def next_seq(self) -> int:
        self._seq += 1
        return self._seq

    def n_events(self) -> int:
        return sum(len(t.events) for t in self.traces.values())


def check_trace(trace: Trace) -> list[str]:
    """Post-hoc invariant check; returns the problems found."""
    problems = []
    ts = [e.timestamp for e in trace.events]
    if any(b < a for a, b in zip(ts, ts[1:])):
        problems.append(OUT_OF_ORDER)
    open_starts: dict = {}
    for e in sorted(trace.events, key=lambda x: x.seq):
        key = (e.source_instance_id, e.task_id)
        if e.lifecycle_transition == START:
            open_starts[key] = open_starts.get(key, 0) + 1
        elif open_starts.get(key, 0) > 0:
            open_starts[key] -= 1
        else:
            problems.append(LIFECYCLE_ANOMALY)
            break
    return problems


def append(store: Log, e: Event | ModelRecord) -> Log:
    """Add an item to its case's trace in place (and return the log).

    Events stay sorted by timestamp; a late event is still stored and the
    trace flagged. Completes without an open start flag a lifecycle anomaly.
    """
    trace = store.traces.get(e.case_id)
    if trace is None:
        trace = store.traces[e.case_id] = Trace(e.case_id)
    if not e.seq:
        e = replace(e, seq=store.next_seq())
    else:
        store._seq = max(store._seq, e.seq)
    if isinstance(e, ModelRecord):
        trace.models.append(e)
        return store
    if trace.events and e.timestamp < trace.events[-1].timestamp:
        trace.flags.add(OUT_OF_ORDER)
        idx = bisect.bisect_right([x.timestamp for x in trace.events], e.timestamp)
        trace.events.insert(idx, e)
    else:
        trace.events.append(e)
    key = (e.source_instance_id, e.task_id)
    if e.lifecycle_transition == START:
        trace._open[key] = trace._open.get(key, 0) + 1
    elif trace._open.get(key, 0) > 0:
        trace._open[key] -= 1
    else:
        trace.flags.add(LIFECYCLE_ANOMALY)
    return store


@dataclass
class Quarantined:
    notification: Notification
    reason: str


def notification_to_events(
    n: Notification,
    correlation: dict[str, str],
    models: dict[str, ProcessModel] | None = None,
) -> list[Event]:
    """Convert one notification; updates ``correlation`` (instance -> root case).

    Raises ``LookupError`` for a subprocess notification whose parent is
    unknown.
    """
    models = models if models is not None else {}
    if n.kind in (NotificationKind.INSTANCE_CREATED, NotificationKind.MODEL_CHANGED):
        if n.kind is NotificationKind.INSTANCE_CREATED:
            correlation[n.instance_id] = _root_of(n, correlation)
        elif n.instance_id not in correlation:
            raise LookupError(f"model change for unknown instance {n.instance_id!r}")
        if n.model_description:
            models[n.instance_id] = parse_model(n.model_description)
        return []
    if n.instance_id not in correlation:
        # task notification without a creation record: its own case
        correlation[n.instance_id] = _root_of(n, correlation)
    case = correlation[n.instance_id]
    model = models.get(n.instance_id)
    label = model.label_of(n.task_id) if model is not None else n.task_id
    data = dict(n.data)
    resource = data.pop("org:resource", None)
    lifecycle = START if n.kind is NotificationKind.TASK_ENACTED else COMPLETE
    return [Event(case, n.instance_id, n.task_id, label, lifecycle, n.timestamp, resource, data)]


def _root_of(n: Notification, correlation: Mapping[str, str]) -> str:
    parent = n.parent_instance_id
    if parent is None or n.data.get(CORRELATE_KEY) is False:
        return n.instance_id
    if parent not in correlation:
        raise LookupError(f"orphan subprocess notification: parent {parent!r} unknown")
    return correlation[parent]


class Logger:
    """Single consumer of the notification stream.

    ``feed`` returns the stream items (events and model records) produced
    by a notification and appends them to the log. Orphans are quarantined.
    """

    def __init__(self, metadata: Mapping | None = None):
        self.log = Log(metadata=dict(metadata or {}))
        self.correlation: dict[str, str] = {}
        self.models: dict[str, ProcessModel] = {}
        self.quarantine: list[Quarantined] = []
        self._lock = threading.Lock()

    def feed(self, n: Notification) -> list[StreamItem]:
        with self._lock:
            try:
                events = notification_to_events(n, self.correlation, self.models)
            except (LookupError, ModelError) as exc:
                log.warning("quarantined %s for %s: %s", n.kind.value, n.instance_id, exc)
                self.quarantine.append(Quarantined(n, str(exc)))
                return []
            items: list[StreamItem] = list(events)
            if n.kind in (NotificationKind.INSTANCE_CREATED, NotificationKind.MODEL_CHANGED):
                items = [ModelRecord(
                    case_id=self.correlation[n.instance_id],
                    source_instance_id=n.instance_id,
                    parent_instance_id=n.parent_instance_id,
                    model_id=n.model_id,
                    version=n.version,
                    description=n.model_description or "",
                    timestamp=n.timestamp,
                    change=n.kind is NotificationKind.MODEL_CHANGED,
                )]
            out = []
            for item in items:
                item = replace(item, seq=self.log.next_seq())
                append(self.log, item)
                out.append(item)
            return out

    def consume(self, notifications: Iterable[Notification]) -> Iterator[StreamItem]:
        for n in notifications:
            yield from self.feed(n)

    def close(self) -> None:
        with self._lock:
            for trace in self.log.traces.values():
                trace.open = False

    def snapshot(self) -> Log:
        with self._lock:
            return copy.deepcopy(self.log)


def replay(log: Log, speed: float | str = "instant", include_models: bool = True) -> Iterator[StreamItem]:
    """Yield the log's items merged in global ``(timestamp, case, seq)`` order.

    With a numeric ``speed`` the inter-event delays are reproduced, divided
    by ``speed``.
    """
    items = []
    for trace in log.traces.values():
        items.extend(trace.events)
        if include_models:
            items.extend(trace.models)
    items.sort(key=lambda x: (x.timestamp, x.case_id, x.seq))
    if speed != "instant" and not (isinstance(speed, (int, float)) and speed > 0):
        raise ValueError("speed must be a positive multiplier or 'instant'")
    prev = None
    for item in items:
        if speed != "instant" and prev is not None:
            time.sleep(max(0, item.timestamp - prev) / 1000 / speed)
        prev = item.timestamp
        yield item


# -- persistence -------------------------------------------------------------

INDEX_SUFFIX = ".idx.json"
LOG_FORMAT = "procwatch-log/1"


def save_log(log: Log, path: str | Path) -> None:
    """Write the log as JSON-lines in arrival order plus an index sidecar."""
    path = Path(path)
    items = sorted(
        (item for t in log.traces.values() for item in t.items()), key=lambda x: x.seq
    )
    writer = LogWriter(path, metadata=log.metadata)
    for item in items:
        writer.write(item)
    writer.close()


class LogWriter:
    """Append-only JSON-lines writer maintaining the index sidecar."""

    def __init__(self, path: str | Path, metadata: Mapping | None = None):
        self.path = Path(path)
        self.metadata = dict(metadata or {})
        self._fh = open(self.path, "w", encoding="utf-8")
        self._offset = 0
        self._line = 0
        self._cases: dict[str, list[int]] = {}

    def write(self, item: StreamItem) -> None:
        line = json.dumps(item.to_json()) + "\n"
        self._fh.write(line)
        self._cases.setdefault(item.case_id, []).append(self._offset)
        self._offset += len(line.encode("utf-8"))
        self._line += 1

    def close(self) -> None:
        self._fh.close()
        index = {
            "format": LOG_FORMAT,
            "metadata": self.metadata,
            "lines": self._line,
            "cases": self._cases,
        }
        Path(str(self.path) + INDEX_SUFFIX).write_text(json.dumps(index, indent=1, sort_keys=True) + "\n",
                                                       encoding="utf-8")


def load_log(path: str | Path, case: str | None = None) -> Log:
    """Read a persisted log; with ``case`` only that trace, via the index."""
    path = Path(path)
    index_path = Path(str(path) + INDEX_SUFFIX)
    metadata = {}
    offsets = None
    if index_path.exists():
        index = json.loads(index_path.read_text(encoding="utf-8"))
        metadata = index.get("metadata", {})
        if case is not None:
            offsets = index["cases"].get(case, [])
    out = Log(metadata=metadata)
    with open(path, "rb") as fh:
        if offsets is None:
            lines = fh.read().decode("utf-8").splitlines()
        else:
            lines = []
            for off in offsets:
                fh.seek(off)
                lines.append(fh.readline().decode("utf-8"))
    for line in lines:
        if not line.strip():
            continue
        item = item_from_json(json.loads(line))
        if case is not None and item.case_id != case:
            continue
        append(out, item)
    for trace in out.traces.values():
        trace.open = False
    return out
