"""Annotated process models: node types, the text format, and control-flow queries.

Model document grammar (whitespace-insensitive, ``#`` starts a comment)::

    document := model+
    model    := "model" IDENT ["version" "=" INT] "{" node "}"
              | node                              # bare node, id "model", version 1
    node     := task | signal | call | seq | par | loop
    task     := "task" IDENT [STRING] (KEY "=" NUMBER|IDENT)*
                    KEY in {dur, gap, ref}
    signal   := "signal" (STRING | IDENT)
    call     := "call" IDENT ["correlate" "=" ("true" | "false")]
    seq      := "seq" "{" body "}"
    par      := "par" "{" body "}"
    loop     := "loop" INT "{" body "}"           # several nodes form an implicit seq
    body     := node (";" node)* [";"]

``dur`` is the expected task duration in seconds, ``gap`` the expected wait
between the end of the task and the start of the next one, ``ref`` the id of
the golden sensor series the task's output is compared against.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Union


class ModelError(ValueError):
    """Raised for an invalid process model."""


class ModelSyntaxError(ModelError):
    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"{message} at line {line}, column {column}")
        self.line = line
        self.column = column


@dataclass(frozen=True)
class Task:
    task_id: str
    label: str = ""
    expected_duration: float | None = None
    expected_gap_after: float | None = None
    reference_series_id: str | None = None

    def __post_init__(self):
        if not self.label:
            object.__setattr__(self, "label", self.task_id)


@dataclass(frozen=True)
class Sequence:
    children: tuple = ()


@dataclass(frozen=True)
class Parallel:
    children: tuple = ()


@dataclass(frozen=True)
class Loop:
    body: "Node"
    count: int = 1


@dataclass(frozen=True)
class SubprocessCall:
    model_id: str
    correlate_to_root: bool = True


@dataclass(frozen=True)
class Signal:
    label: str


Node = Union[Task, Sequence, Parallel, Loop, SubprocessCall, Signal]


@dataclass(frozen=True)
class ProcessModel:
    model_id: str
    version: int
    root: Node
    _tasks: dict = field(default=None, compare=False, repr=False, hash=False)

    def __post_init__(self):
        tasks: dict[str, Task] = {}
        signals: set[str] = set()
        for node in iter_nodes(self.root):
            if isinstance(node, Task):
                if node.task_id in tasks:
                    raise ModelError(f"duplicate task id {node.task_id!r} in model {self.model_id!r}")
                tasks[node.task_id] = node
            elif isinstance(node, Signal):
                signals.add(node.label)
        clash = signals & tasks.keys()
        if clash:
            raise ModelError(f"signal label collides with task id: {sorted(clash)}")
        _validate(self.root)
        if self.version < 1:
            raise ModelError("model version must be >= 1")
        object.__setattr__(self, "_tasks", tasks)
        object.__setattr__(self, "_signals", frozenset(signals))

    @property
    def tasks(self) -> Mapping[str, Task]:
        return self._tasks

    @property
    def signal_ids(self) -> frozenset:
        return self._signals

    def task(self, task_id: str) -> Task | None:
        return self._tasks.get(task_id)

    def calls(self) -> set[str]:
        return {n.model_id for n in iter_nodes(self.root) if isinstance(n, SubprocessCall)}

    def label_of(self, step_id: str) -> str:
        task = self._tasks.get(step_id)
        return task.label if task is not None else step_id


def iter_nodes(node: Node) -> Iterator[Node]:
    yield node
    if isinstance(node, (Sequence, Parallel)):
        for child in node.children:
            yield from iter_nodes(child)
    elif isinstance(node, Loop):
        yield from iter_nodes(node.body)


def _validate(node: Node) -> None:
    for n in iter_nodes(node):
        if isinstance(n, Sequence) and not n.children:
            raise ModelError("empty sequence")
        if isinstance(n, Parallel) and not n.children:
            raise ModelError("empty parallel")
        if isinstance(n, Loop) and n.count < 1:
            raise ModelError("loop count must be >= 1")
        if isinstance(n, Task):
            for name in ("expected_duration", "expected_gap_after"):
                value = getattr(n, name)
                if value is not None and value < 0:
                    raise ModelError(f"negative duration on task {n.task_id!r}")


# -- parsing -----------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+|\#[^\n]*)
  | (?P<string>"(?:[^"\\]|\\.)*")
  | (?P<number>-?\d+(?:\.\d+)?(?:[eE][-+]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_.:\-]*)
  | (?P<punct>[{};=])
    """,
    re.VERBOSE,
)

_TASK_KEYS = {"dur": "expected_duration", "gap": "expected_gap_after", "ref": "reference_series_id"}
_KEYWORDS = {"task", "signal", "call", "seq", "par", "loop", "model"}


@dataclass
class _Token:
    kind: str
    value: str
    line: int
    column: int


def _tokenize(text: str) -> list[_Token]:
    tokens = []
    pos, line, line_start = 0, 1, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ModelSyntaxError(f"unexpected character {text[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        value = m.group()
        if kind != "ws":
            if kind == "string":
                value = re.sub(r"\\(.)", r"\1", value[1:-1])
            tokens.append(_Token(kind, value, line, m.start() - line_start + 1))
        newlines = m.group().count("\n")
        if newlines:
            line += newlines
            line_start = m.start() + m.group().rfind("\n") + 1
        pos = m.end()
    tokens.append(_Token("eof", "", line, pos - line_start + 1))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.tokens = _tokenize(text)
        self.i = 0

    @property
    def tok(self) -> _Token:
        return self.tokens[self.i]

    def error(self, message: str, tok: _Token | None = None):
        tok = tok or self.tok
        return ModelSyntaxError(message, tok.line, tok.column)

    def take(self, kind: str | None = None, value: str | None = None) -> _Token:
        tok = self.tok
        if (kind and tok.kind != kind) or (value is not None and tok.value != value):
            want = repr(value) if value is not None else kind
            got = tok.value or tok.kind
            raise self.error(f"expected {want}, got {got!r}")
        self.i += 1
        return tok

    def at(self, kind: str, value: str | None = None) -> bool:
        return self.tok.kind == kind and (value is None or self.tok.value == value)

    def document(self) -> list[ProcessModel]:
        models = []
        while not self.at("eof"):
            models.append(self.model())
        if not models:
            raise self.error("empty document")
        return models

    def model(self) -> ProcessModel:
        start = self.tok
        if not self.at("ident", "model"):
            root = self.node()
            model_id, version = "model", 1
        else:
            self.take()
            model_id = self.take("ident").value
            version = 1
            if self.at("ident", "version"):
                self.take()
                self.take("punct", "=")
                num = self.take("number")
                if not num.value.isdigit():
                    raise self.error("version must be a positive integer", num)
                version = int(num.value)
            self.take("punct", "{")
            root = self.node()
            self.take("punct", "}")
        try:
            return ProcessModel(model_id, version, root)
        except ModelSyntaxError:
            raise
        except ModelError as exc:
            raise ModelSyntaxError(str(exc), start.line, start.column) from None

    def node(self) -> Node:
        tok = self.take("ident")
        kw = tok.value
        if kw == "task":
            return self.task()
        if kw == "signal":
            label = self.tok
            if label.kind not in ("string", "ident"):
                raise self.error("expected signal label")
            self.take()
            if self.at("ident") and self.tokens[self.i + 1].value == "=":
                raise self.error("signal nodes take no annotations")
            return Signal(label.value)
        if kw == "call":
            model_id = self.take("ident").value
            correlate = True
            if self.at("ident", "correlate"):
                self.take()
                self.take("punct", "=")
                flag = self.take("ident")
                if flag.value not in ("true", "false"):
                    raise self.error("correlate must be true or false", flag)
                correlate = flag.value == "true"
            return SubprocessCall(model_id, correlate)
        if kw in ("seq", "par"):
            children = self.body(tok)
            if not children:
                raise self.error(f"empty {'sequence' if kw == 'seq' else 'parallel'}", tok)
            return Sequence(tuple(children)) if kw == "seq" else Parallel(tuple(children))
        if kw == "loop":
            num = self.take("number")
            if not num.value.isdigit() or int(num.value) < 1:
                raise self.error("loop count must be a positive integer", num)
            children = self.body(tok)
            if not children:
                raise self.error("empty loop body", tok)
            body = children[0] if len(children) == 1 else Sequence(tuple(children))
            return Loop(body, int(num.value))
        raise self.error(f"unknown node type {kw!r}", tok)

    def body(self, opener: _Token) -> list[Node]:
        self.take("punct", "{")
        children = []
        while not self.at("punct", "}"):
            if self.at("eof"):
                raise self.error(f"unclosed block opened by {opener.value!r}", opener)
            children.append(self.node())
            if self.at("punct", ";"):
                self.take()
            elif not self.at("punct", "}"):
                raise self.error("expected ';' or '}'")
        self.take("punct", "}")
        return children

    def task(self) -> Task:
        task_id = self.take("ident")
        if task_id.value in _KEYWORDS:
            raise self.error(f"reserved word {task_id.value!r} used as task id", task_id)
        label = self.take().value if self.at("string") else ""
        attrs: dict = {}
        while self.at("ident") and self.tokens[self.i + 1].value == "=":
            key = self.take()
            if key.value not in _TASK_KEYS:
                raise self.error(f"unknown key {key.value!r}", key)
            self.take("punct", "=")
            value = self.tok
            if key.value == "ref":
                if value.kind not in ("ident", "string"):
                    raise self.error("ref expects a series id")
                attrs[_TASK_KEYS[key.value]] = self.take().value
            else:
                if value.kind != "number":
                    raise self.error(f"{key.value} expects a number")
                number = float(self.take().value)
                if number < 0:
                    raise self.error("negative duration", value)
                attrs[_TASK_KEYS[key.value]] = number
        return Task(task_id.value, label, **attrs)


def parse_model(text: str, repository: Mapping[str, ProcessModel] | None = None) -> ProcessModel:
    """Parse a document holding exactly one model.

    When ``repository`` is given every subprocess call must resolve in it
    (or be a self-reference).
    """
    models = _Parser(text).document()
    if len(models) != 1:
        raise ModelError(f"expected one model, found {len(models)}")
    model = models[0]
    if repository is not None:
        _check_calls([model], {**repository, model.model_id: model})
    return model


def parse_repository(text: str, external: Mapping[str, ProcessModel] | None = None) -> dict[str, ProcessModel]:
    """Parse a document with one or more models into ``{model_id: model}``."""
    models = _Parser(text).document()
    repo: dict[str, ProcessModel] = dict(external or {})
    seen = set()
    for m in models:
        if m.model_id in seen:
            raise ModelError(f"duplicate model id {m.model_id!r}")
        seen.add(m.model_id)
        repo[m.model_id] = m
    _check_calls(models, repo)
    return {m.model_id: m for m in models}


def _check_calls(models: Iterable[ProcessModel], repo: Mapping[str, ProcessModel]) -> None:
    for m in models:
        missing = sorted(m.calls() - repo.keys())
        if missing:
            raise ModelError(f"unresolved subprocess reference(s) in {m.model_id!r}: {', '.join(missing)}")


# -- serialization -----------------------------------------------------------

def _fmt_number(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def _quote(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


def _ident_ok(s: str) -> bool:
    return re.fullmatch(r"[A-Za-z_][A-Za-z0-9_.:\-]*", s) is not None and s not in _KEYWORDS


def serialize_node(node: Node) -> str:
    if isinstance(node, Task):
        parts = ["task", node.task_id]
        if node.label != node.task_id:
            parts.append(_quote(node.label))
        if node.expected_duration is not None:
            parts.append(f"dur={_fmt_number(node.expected_duration)}")
        if node.expected_gap_after is not None:
            parts.append(f"gap={_fmt_number(node.expected_gap_after)}")
        if node.reference_series_id is not None:
            ref = node.reference_series_id
            parts.append(f"ref={ref if _ident_ok(ref) else _quote(ref)}")
        return " ".join(parts)
    if isinstance(node, Signal):
        return f"signal {_quote(node.label)}"
    if isinstance(node, SubprocessCall):
        return f"call {node.model_id}" + ("" if node.correlate_to_root else " correlate=false")
    if isinstance(node, Sequence):
        return "seq { " + "; ".join(serialize_node(c) for c in node.children) + " }"
    if isinstance(node, Parallel):
        return "par { " + "; ".join(serialize_node(c) for c in node.children) + " }"
    if isinstance(node, Loop):
        return f"loop {node.count} {{ {serialize_node(node.body)} }}"
    raise TypeError(f"not a model node: {node!r}")


def serialize_model(model: ProcessModel) -> str:
    return f"model {model.model_id} version={model.version} {{ {serialize_node(model.root)} }}"


def serialize_repository(models: Iterable[ProcessModel]) -> str:
    return "\n".join(serialize_model(m) for m in models) + "\n"


# -- control flow ------------------------------------------------------------
#
# Residual expressions (Brzozowski-style derivatives) over the node tree.
# A state is a hashable tuple; a prefix maps to the set of states reachable
# after consuming it. Calls are transparent unless ``calls=True``, in which
# case each call is a symbol ``call:<model_id>`` (used by the engine).

_EPS = ("eps",)


def _to_state(node: Node, calls: bool) -> tuple:
    if isinstance(node, Task):
        return ("sym", node.task_id)
    if isinstance(node, Signal):
        return ("sym", node.label)
    if isinstance(node, SubprocessCall):
        return ("sym", CALL_PREFIX + node.model_id) if calls else _EPS
    if isinstance(node, Sequence):
        return _seq(tuple(_to_state(c, calls) for c in node.children))
    if isinstance(node, Parallel):
        return _par(tuple(_to_state(c, calls) for c in node.children))
    if isinstance(node, Loop):
        body = _to_state(node.body, calls)
        return _seq((body,) * node.count)
    raise TypeError(f"not a model node: {node!r}")


CALL_PREFIX = "call:"


def _seq(items: tuple) -> tuple:
    items = tuple(i for i in items if i != _EPS)
    if not items:
        return _EPS
    return items[0] if len(items) == 1 else ("seq", items)


def _par(items: tuple) -> tuple:
    items = tuple(sorted(i for i in items if i != _EPS))
    if not items:
        return _EPS
    return items[0] if len(items) == 1 else ("par", items)


def _nullable(s: tuple) -> bool:
    tag = s[0]
    if tag == "eps":
        return True
    if tag == "sym":
        return False
    return all(_nullable(c) for c in s[1])


def _first(s: tuple) -> set[str]:
    tag = s[0]
    if tag == "eps":
        return set()
    if tag == "sym":
        return {s[1]}
    if tag == "par":
        out: set[str] = set()
        for c in s[1]:
            out |= _first(c)
        return out
    out = set()
    for c in s[1]:
        out |= _first(c)
        if not _nullable(c):
            break
    return out


def _derive(s: tuple, sym: str) -> set[tuple]:
    tag = s[0]
    if tag == "eps":
        return set()
    if tag == "sym":
        return {_EPS} if s[1] == sym else set()
    items = s[1]
    out: set[tuple] = set()
    if tag == "seq":
        head, rest = items[0], items[1:]
        for d in _derive(head, sym):
            out.add(_seq((d,) + rest))
        if _nullable(head):
            out |= _derive(_seq(rest), sym)
        return out
    for i, c in enumerate(items):
        for d in _derive(c, sym):
            out.add(_par(items[:i] + (d,) + items[i + 1:]))
    return out


class ControlFlowState:
    """Incremental position of one instance within its model.

    ``advance`` consumes one step id and returns whether it was legal;
    illegal steps leave the state unchanged.
    """

    __slots__ = ("states",)

    def __init__(self, states: frozenset):
        self.states = states

    @classmethod
    def initial(cls, model: ProcessModel, calls: bool = False) -> "ControlFlowState":
        return cls(frozenset({_to_state(model.root, calls)}))

    @classmethod
    def after(cls, model: ProcessModel, prefix: Iterable[str], calls: bool = False) -> "ControlFlowState":
        state = cls.initial(model, calls)
        for step in prefix:
            if not state.advance(step):
                return cls(frozenset())
        return state

    def allowed(self) -> set[str]:
        out: set[str] = set()
        for s in self.states:
            out |= _first(s)
        return out

    def can_advance(self, step: str) -> bool:
        return any(_derive(s, step) for s in self.states)

    def advance(self, step: str) -> bool:
        nxt: set[tuple] = set()
        for s in self.states:
            nxt |= _derive(s, step)
        if not nxt:
            return False
        self.states = frozenset(nxt)
        return True

    @property
    def complete(self) -> bool:
        return any(_nullable(s) for s in self.states)

    def copy(self) -> "ControlFlowState":
        return ControlFlowState(self.states)


def allowed_next(model: ProcessModel, prefix: Iterable[str]) -> set[str]:
    """Step ids (task ids and signal labels) that may start after ``prefix``.

    Subprocess calls are transparent: their tasks belong to the child
    instance's own model. A non-conforming prefix yields the empty set.
    """
    return ControlFlowState.after(model, prefix).allowed()
