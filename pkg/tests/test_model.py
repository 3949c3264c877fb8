import random

import pytest
from hypothesis import given, settings, strategies as st

from procwatch.model import (
    ControlFlowState, Loop, ModelError, ModelSyntaxError, Parallel, ProcessModel, Sequence, Signal,
    SubprocessCall, Task, allowed_next, parse_model, parse_repository, serialize_model, serialize_repository,
)

from oracles import allowed_oracle, language, random_model


def test_parse_task_annotations():
    m = parse_model('model x version=2 { seq { task a "Move up" dur=30 gap=1.5 ref=diameter; task b } }')
    assert m.model_id == "x" and m.version == 2
    a = m.task("a")
    assert (a.label, a.expected_duration, a.expected_gap_after, a.reference_series_id) == \
        ("Move up", 30.0, 1.5, "diameter")
    assert m.task("b").label == "b"
    assert m.task("b").expected_duration is None


def test_parse_bare_node_and_comments():
    m = parse_model("# header\nseq { task a; # trailing\n task b }")
    assert list(m.tasks) == ["a", "b"]


def test_turm_fixture_parses(turm):
    assert set(turm) == {"turm_daily", "produce_turm", "turm_setup", "turm_keyence", "unload_to_tray"}
    assert turm["turm_daily"].signal_ids == {"part"}
    assert turm["unload_to_tray"].task("a17").expected_duration == 30


@pytest.mark.parametrize("text, fragment", [
    ("seq { task a; task a }", "duplicate task id"),
    ("seq { }", "empty sequence"),
    ("loop 0 { task a }", "count"),
    ("task a dur=-1", "negative"),
    ("task a speed=3", "unknown"),
    ('seq { task part; signal "part" }', "collides"),
])
def test_invalid_models_rejected(text, fragment):
    with pytest.raises(ModelError, match=fragment):
        parse_model(text)


def test_syntax_error_has_position():
    with pytest.raises(ModelSyntaxError) as info:
        parse_model("seq {\n  task a;\n  ??? }")
    assert info.value.line == 3


def test_unresolved_call():
    with pytest.raises(ModelError, match="unresolved"):
        parse_repository("model a { call nowhere }")


def test_repository_roundtrip(turm):
    again = parse_repository(serialize_repository(turm.values()))
    assert again == turm


_ids = st.sampled_from([f"t{i}" for i in range(12)])


@st.composite
def trees(draw, depth=0):
    leaf = st.one_of(
        st.builds(Task, _ids, st.sampled_from(["", "Move up", 'q"uote']),
                  st.one_of(st.none(), st.integers(0, 100).map(float), st.floats(0.1, 9.5).map(lambda x: round(x, 2))),
                  st.one_of(st.none(), st.sampled_from([0.0, 1.0, 2.5])),
                  st.one_of(st.none(), st.just("diameter"))),
        st.builds(Signal, st.sampled_from(["part", "batch end"])),
        st.builds(SubprocessCall, st.sampled_from(["child"]), st.booleans()),
    )
    if depth >= 3:
        return draw(leaf)
    kind = draw(st.sampled_from(["leaf", "seq", "par", "loop"]))
    if kind == "leaf":
        return draw(leaf)
    if kind == "loop":
        return Loop(draw(trees(depth + 1)), draw(st.integers(1, 4)))
    kids = tuple(draw(st.lists(trees(depth + 1), min_size=1, max_size=3)))
    return Sequence(kids) if kind == "seq" else Parallel(kids)


@settings(max_examples=200, deadline=None)
@given(trees())
def test_serialize_parse_roundtrip(root):
    try:
        model = ProcessModel("m", 1, root)
    except ModelError:
        return  # duplicate ids or signal clash drawn
    assert parse_model(serialize_model(model)) == model


def test_allowed_next_examples():
    m = parse_model("seq { task a; par { task b; task c }; task d }")
    assert allowed_next(m, []) == {"a"}
    assert allowed_next(m, ["a"]) == {"b", "c"}
    assert allowed_next(m, ["a", "c"]) == {"b"}
    assert allowed_next(m, ["a", "c", "b"]) == {"d"}
    assert allowed_next(m, ["b"]) == set()


def test_loop_repeats_exactly():
    m = parse_model("loop 2 { seq { task a; task b } }")
    st_ = ControlFlowState.initial(m)
    for step in ["a", "b", "a", "b"]:
        assert st_.advance(step)
    assert st_.complete and st_.allowed() == set()


def test_calls_are_symbols_only_on_request():
    m = parse_model("seq { task a; call c; task b }", repository={"c": parse_model("model c { task x }")})
    assert allowed_next(m, ["a"]) == {"b"}
    assert ControlFlowState.after(m, ["a"], calls=True).allowed() == {"call:c"}


def test_allowed_next_matches_enumeration():
    rng = random.Random(7)
    for _ in range(200):
        model = random_model(rng)
        words = language(model.root)
        prefixes = {w[:i] for w in words for i in range(len(w) + 1)}
        for p in prefixes:
            assert allowed_next(model, p) == allowed_oracle(words, p)
        for w in words:
            assert ControlFlowState.after(model, w).complete
