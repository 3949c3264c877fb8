"""Split batch-oriented cases into per-part traces at signal events.

A signal opens a part: the signal's own events and everything after it up
to the next signal of the same case belong to that part. Events before the
first signal form the case preamble and carry no part id.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator

from sklearn.base import BaseEstimator, TransformerMixin

from .events import START, Event, ModelRecord, StreamItem
from .model import ProcessModel


def part_id_for(case_id: str, ordinal: int) -> str:
    return f"{case_id}#{ordinal}"


@dataclass
class PartTrace:
    part_id: str
    part_ordinal: int
    parent_case_id: str
    events: list = field(default_factory=list)


def is_signal(event: Event, model: ProcessModel | None) -> bool:
    """Signal start in the case's root instance."""
    return (
        model is not None
        and event.lifecycle_transition == START
        and event.source_instance_id == event.case_id
        and event.task_id in model.signal_ids
    )


class _CaseCursor:
    __slots__ = ("model", "ordinal", "current")

    def __init__(self, model=None):
        self.model = model
        self.ordinal = 0
        self.current: PartTrace | None = None


class PartStream:
    """Incremental splitter over an interleaved multi-case stream.

    ``push`` labels each event with its part id and returns the parts that
    were closed by it; ``finish`` closes whatever is still open.
    """

    def __init__(self, models: dict[str, ProcessModel] | None = None):
        self._cases: dict[str, _CaseCursor] = {}
        self._models = dict(models or {})
        self.preamble: dict[str, list[Event]] = {}

    def cursor(self, case_id: str) -> _CaseCursor:
        cur = self._cases.get(case_id)
        if cur is None:
            cur = self._cases[case_id] = _CaseCursor(self._models.get(case_id))
        return cur

    def set_model(self, case_id: str, model: ProcessModel) -> None:
        self.cursor(case_id).model = model

    def push(self, item: StreamItem) -> tuple[StreamItem, list[PartTrace]]:
        if isinstance(item, ModelRecord):
            if item.source_instance_id == item.case_id:
                self.set_model(item.case_id, item.parsed())
            return item, []
        cur = self.cursor(item.case_id)
        closed = []
        if is_signal(item, cur.model):
            if cur.current is not None:
                closed.append(cur.current)
            cur.ordinal += 1
            cur.current = PartTrace(part_id_for(item.case_id, cur.ordinal), cur.ordinal, item.case_id)
        if cur.current is None:
            labelled = replace(item, part_id=None)
            self.preamble.setdefault(item.case_id, []).append(labelled)
        else:
            labelled = replace(item, part_id=cur.current.part_id)
            cur.current.events.append(labelled)
        return labelled, closed

    def finish(self, case_id: str | None = None) -> list[PartTrace]:
        keys = [case_id] if case_id is not None else list(self._cases)
        out = []
        for key in keys:
            cur = self._cases.get(key)
            if cur is not None and cur.current is not None:
                out.append(cur.current)
                cur.current = None
        return out


def split(stream: Iterable[Event], model: ProcessModel) -> tuple[list[Event], list[PartTrace]]:
    """Partition one case's ordered events into ``(preamble, parts)``."""
    ps = PartStream()
    parts: list[PartTrace] = []
    case_id = None
    for e in stream:
        if case_id is None:
            case_id = e.case_id
            ps.set_model(case_id, model)
        elif e.case_id != case_id:
            raise ValueError(f"split expects a single case, got {case_id!r} and {e.case_id!r}")
        _, closed = ps.push(e)
        parts.extend(closed)
    parts.extend(ps.finish())
    return ps.preamble.get(case_id, []), parts


def iter_parts(stream: Iterable[Event], model: ProcessModel) -> Iterator[PartTrace]:
    """Like :func:`split` but yields each part as soon as it is closed."""
    ps = PartStream()
    case_id = None
    for e in stream:
        if case_id is None:
            case_id = e.case_id
            ps.set_model(case_id, model)
        _, closed = ps.push(e)
        yield from closed
    yield from ps.finish()


class PartSplitter(TransformerMixin, BaseEstimator):
    """Transformer labelling every event of a stream with its part id.

    The root model of each case is taken from the model records travelling
    in the stream; ``models`` may pre-seed ``case_id -> ProcessModel``.
    """

    def __init__(self, models=None):
        self.models = models

    def fit(self, X=None, y=None):
        return self

    def transform(self, X: Iterable[StreamItem]) -> list[StreamItem]:
        return list(self.iter_transform(X))

    def iter_transform(self, X: Iterable[StreamItem]) -> Iterator[StreamItem]:
        ps = PartStream(self.models)
        for item in X:
            labelled, _ = ps.push(item)
            yield labelled
