"""Glue between engine, logger, splitter and checker, plus run manifests."""

from __future__ import annotations

import hashlib
import json
import queue
import threading
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping

from .config import CheckerConfig, load_config
from .conformance import ConformanceChecker, Deviation
from .engine import FaultPlan, Notification, SimClock, simulate_runs
from .events import Logger, StreamItem
from .model import ProcessModel, parse_repository
from .series import SensorSeries, load_references
from .splitter import PartSplitter

_DONE = object()


def staged(source: Iterable, *stages: Callable[[Iterable], Iterable], maxsize: int = 1024) -> Iterator:
    """Run each stage in its own thread, connected by bounded FIFO queues.

    A stage maps an iterable to an iterable; ordering is preserved end to
    end. Exceptions raised in a stage are re-raised in the consumer.
    """
    errors: list[BaseException] = []

    def pump(items: Iterable, q: queue.Queue) -> None:
        try:
            for item in items:
                q.put(item)
        except BaseException as exc:  # re-raised by the consumer
            errors.append(exc)
        finally:
            q.put(_DONE)

    def drain(q: queue.Queue) -> Iterator:
        while True:
            item = q.get()
            if item is _DONE:
                return
            yield item

    # the source and every stage but the last are pumped by worker threads;
    # the last stage runs in the consumer
    current: Iterable = source
    threads = []
    for stage in stages:
        q: queue.Queue = queue.Queue(maxsize)
        t = threading.Thread(target=pump, args=(current, q), daemon=True)
        threads.append(t)
        t.start()
        current = stage(drain(q))
    yield from current
    for t in threads:
        t.join(timeout=5)
    if errors:
        raise errors[0]


def notifications_to_items(notifications: Iterable[Notification], logger: Logger | None = None) -> list[StreamItem]:
    logger = logger or Logger()
    items = list(logger.consume(notifications))
    logger.close()
    return items


def check_items(items: Iterable[StreamItem], checker: ConformanceChecker, split: bool = True) -> list[Deviation]:
    if split:
        items = PartSplitter().iter_transform(items)
    return checker.predict(items)


def simulate_items(
    repository: Mapping[str, ProcessModel],
    root: str,
    *,
    clock: SimClock | None = None,
    faults: FaultPlan | None = None,
    seed: int = 0,
    runs: int = 1,
    references: Mapping[str, SensorSeries] | None = None,
    series_noise: float = 0.0,
) -> tuple[list[Notification], Logger, list[StreamItem]]:
    """Simulate and log; returns notifications, the logger and the live event stream."""
    notes = simulate_runs(repository, root, clock, faults, seed, runs,
                          references=references, series_noise=series_noise)
    logger = Logger({"seed": seed, "runs": runs, "root": root})
    items = notifications_to_items(notes, logger)
    return notes, logger, items


# -- manifests ---------------------------------------------------------------

@dataclass
class RunManifest:
    """Everything a reproducible run needs.

    In a manifest file, paths are relative to the manifest's directory.
    """

    models: Path
    root: str
    faults: Path | None = None
    seed: int = 0
    runs: int = 1
    clock: dict = field(default_factory=dict)
    series_noise: float = 0.0
    config: Path | None = None
    references: Path | None = None
    output: Path | None = None

    @classmethod
    def load(cls, path: str | Path) -> "RunManifest":
        path = Path(path)
        obj = json.loads(path.read_text(encoding="utf-8"))
        if not isinstance(obj, dict) or "models" not in obj or "root" not in obj:
            raise ValueError("manifest needs at least 'models' and 'root'")
        base = path.parent
        known = {"models", "root", "faults", "seed", "runs", "clock", "series_noise", "config",
                 "references", "output"}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown manifest key(s): {', '.join(sorted(unknown))}")

        def rel(key):
            return (base / obj[key]) if obj.get(key) is not None else None

        manifest = cls(
            models=rel("models"), root=obj["root"], faults=rel("faults"), seed=int(obj.get("seed", 0)),
            runs=int(obj.get("runs", 1)), clock=dict(obj.get("clock", {})),
            series_noise=float(obj.get("series_noise", 0.0)), config=rel("config"),
            references=rel("references"), output=rel("output"),
        )
        manifest.check_paths()
        return manifest

    def check_paths(self) -> None:
        for name in ("models", "faults", "config", "references"):
            p = getattr(self, name)
            if p is not None and not p.exists():
                raise FileNotFoundError(f"manifest {name} path does not exist: {p}")
        if self.runs < 1:
            raise ValueError("runs must be >= 1")

    def digest(self) -> str:
        """Hash over the manifest's effective content, independent of file locations."""
        refs = self.reference_series()
        payload = {
            "models": self.models.read_text(encoding="utf-8"),
            "root": self.root,
            "faults": self.fault_plan().to_json(),
            "seed": self.seed,
            "runs": self.runs,
            "clock": self.sim_clock().to_json(),
            "series_noise": self.series_noise,
            "config": self.checker_config().to_json(),
            "references": {k: refs[k].to_json() for k in sorted(refs)},
        }
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def repository(self) -> dict[str, ProcessModel]:
        return parse_repository(self.models.read_text(encoding="utf-8"))

    def fault_plan(self) -> FaultPlan:
        if self.faults is None:
            return FaultPlan()
        return FaultPlan.from_json(json.loads(self.faults.read_text(encoding="utf-8")))

    def sim_clock(self) -> SimClock:
        return SimClock.from_json(self.clock)

    def checker_config(self) -> CheckerConfig:
        return load_config(self.config) if self.config is not None else CheckerConfig()

    def reference_series(self) -> dict[str, SensorSeries]:
        return load_references(self.references) if self.references is not None else {}


def scenario_path(name: str) -> Path:
    """Path of a shipped scenario file (models, fault plans, manifests, references)."""
    return Path(str(resources.files("procwatch") / "scenarios" / name))
