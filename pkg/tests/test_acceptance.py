"""Acceptance criteria, one test per criterion.

Each test carries ``@pytest.mark.criterion(n, title)``; the conftest hook
prints one PASS/FAIL line per criterion at the end of the run. Running this
file directly (``python tests/test_acceptance.py``) does the same.
"""

from __future__ import annotations

import copy
import random
import sys
import time
from collections import Counter
from pathlib import Path

import numpy as np
import pytest

from procwatch.conformance import TEMPORAL, ConformanceChecker, DeviationKind, check_order
from procwatch.dtw import dtw_distance
from procwatch.engine import (
    ChangeModel, Delay, FaultPlan, SimClock, SwapOrder, TamperSeries, ZeroDuration, run_instance, simulate_runs,
)
from procwatch.events import COMPLETE, START, Event, Logger, load_log, replay, save_log
from procwatch.model import parse_model
from procwatch.pipeline import RunManifest, scenario_path, simulate_items
from procwatch.splitter import PartSplitter
from procwatch.stats import RunningStats, welford_update
from procwatch.xes import export_xes, import_xes, validate_xes

sys.path.insert(0, str(Path(__file__).parent))
from oracles import allowed_oracle, dtw_brute, language, random_model, single_swaps, two_pass  # noqa: E402

DK = DeviationKind
criterion = pytest.mark.criterion


def _manifest(name):
    return RunManifest.load(scenario_path(f"{name}.manifest.json"))


def _run_manifest(m: RunManifest, faults=None, seed=None):
    _, logger, items = simulate_items(
        m.repository(), m.root, clock=m.sim_clock(), faults=m.fault_plan() if faults is None else faults,
        seed=m.seed if seed is None else seed, runs=m.runs, references=m.reference_series(),
        series_noise=m.series_noise,
    )
    return logger, items


def _check(items, checker):
    return checker.predict(PartSplitter().iter_transform(items))


def _calibrate():
    m = _manifest("calibration")
    _, items = _run_manifest(m)
    return ConformanceChecker(references=m.reference_series()).fit(PartSplitter().iter_transform(items))


@pytest.fixture(scope="module")
def calibrated():
    return _calibrate()


def _fresh(calibrated, **kw):
    """Unwarmed checker carrying only the calibrated DTW thresholds."""
    return ConformanceChecker(dtw_threshold=dict(calibrated.dtw_thresholds_), references=calibrated.references, **kw)


# 1 -------------------------------------------------------------------------

@criterion(1, "zero-duration incident: exactly 3 TimeDuration alerts, nothing else, < 1 s")
def test_incident_zero_duration():
    m = _manifest("incident_zero_duration")
    t0 = time.perf_counter()
    _, items = _run_manifest(m)
    devs = _check(items, ConformanceChecker(references=m.reference_series()))
    elapsed = time.perf_counter() - t0
    print(f"[1] alerts={[(d.kind.value, d.task_id, round(d.score, 2)) for d in devs]} runtime={elapsed:.3f}s")
    assert [d.kind for d in devs] == [DK.TIME_DURATION] * 3
    assert sorted(d.task_id for d in devs) == ["a12", "a17", "a21"]
    assert all(d.score > 3 for d in devs)
    assert elapsed < 1.0


# 2 -------------------------------------------------------------------------

@criterion(2, "mandrel incident: exactly 1 SensorData alert above the calibrated threshold, < 1 s")
def test_incident_mandrel(calibrated):
    m = _manifest("incident_mandrel")
    t0 = time.perf_counter()
    _, items = _run_manifest(m)
    devs = _check(items, _fresh(calibrated))
    elapsed = time.perf_counter() - t0
    threshold = calibrated.dtw_thresholds_["diameter"]
    print(f"[2] threshold={threshold:.4f} alerts={[(d.kind.value, d.task_id, round(d.score, 3)) for d in devs]} "
          f"runtime={elapsed:.3f}s")
    assert [d.kind for d in devs] == [DK.SENSOR_DATA]
    assert devs[0].task_id == "k2" and devs[0].score > threshold

    # the conforming twin on the same seed has identical timing and no alerts
    _, clean = _run_manifest(m, faults=FaultPlan())
    stamp = lambda xs: [(x.task_id, x.lifecycle_transition, x.timestamp) for x in xs if isinstance(x, Event)]
    assert stamp(clean) == stamp(items)
    assert _check(clean, _fresh(calibrated)) == []
    assert elapsed < 1.0


# 3 -------------------------------------------------------------------------

@criterion(3, "batch dilution: four parts cost exactly 0, the faulty part > 0")
def test_batch_dilution(calibrated):
    m = _manifest("batch_dilution")
    _, items = _run_manifest(m)
    checker = _fresh(calibrated)
    devs = _check(items, checker)
    costs = {part: c for (case, part), c in checker.costs().items() if part is not None}
    case = items[0].case_id
    print(f"[3] per-part costs={ {p: round(c, 3) for p, c in sorted(costs.items())} }")
    assert len(costs) == 5
    assert costs[f"{case}#3"] > 0
    assert [c for p, c in costs.items() if p != f"{case}#3"] == [0.0] * 4
    assert {d.part_id for d in devs} == {f"{case}#3"}
    # without splitting, the whole batch is a single trace and the fault is diluted into it
    whole = _fresh(calibrated)
    whole.predict(items)
    assert list(whole.costs()) == [(case, None)]


# 4 -------------------------------------------------------------------------

def _occurrences(items):
    n_dur = sum(isinstance(i, Event) and i.lifecycle_transition == COMPLETE and i.task_id != "part" for i in items)
    n_gap = sum(isinstance(i, Event) and i.lifecycle_transition == START for i in items) - (
        len({i.case_id for i in items}))
    return n_dur, n_gap


@criterion(4, "threshold 3: < 1 % flags on conforming runs (n >= 1000), 100 % recall for >= 5 sigma delays")
def test_threshold_semantics(turm):
    jitter = 0.05
    items = list(Logger().consume(simulate_runs(turm, "produce_turm", SimClock(jitter=jitter), None, 4000, 150)))
    checker = ConformanceChecker()
    devs = checker.predict(items)
    n_dur, n_gap = _occurrences(items)
    kinds = Counter(d.kind for d in devs)
    rate_dur, rate_gap = kinds[DK.TIME_DURATION] / n_dur, kinds[DK.TIME_GAP] / n_gap
    print(f"[4] duration flags {kinds[DK.TIME_DURATION]}/{n_dur} = {rate_dur:.4%}, "
          f"gap flags {kinds[DK.TIME_GAP]}/{n_gap} = {rate_gap:.4%}")
    assert n_dur >= 1000 and n_gap >= 1000
    assert rate_dur < 0.01 and rate_gap < 0.01
    assert set(kinds) <= set(TEMPORAL)

    # recall: each annotated task of each run delayed by 5 learned sigma, judged by a copy of the warm checker
    produce = turm["produce_turm"]
    children = {name: turm[name] for name in ("turm_setup", "turm_keyence", "unload_to_tray")}
    targets = [(mid, t) for mid, m in [("produce_turm", produce), *children.items()]
               for t, task in m.tasks.items() if task.expected_duration is not None]
    hits = total = 0
    for k, (model_id, task_id) in enumerate(targets * 5):
        sigma = checker.stats_[("duration", model_id, task_id)].stddev
        plan = FaultPlan([Delay(task_id, 1, 5 * sigma)])
        probe = list(Logger().consume(run_instance(produce, SimClock(jitter=jitter), plan, 9000 + k,
                                                   repository=turm)))
        found = copy.deepcopy(checker).predict(probe)
        total += 1
        hits += any(d.kind is DK.TIME_DURATION and d.task_id == task_id for d in found)
    print(f"[4] recall for 5 sigma delays: {hits}/{total}")
    assert hits == total


# 5 -------------------------------------------------------------------------

@criterion(5, "DTW equals brute force on 500 short pairs; full band equals unbounded up to length 512")
def test_dtw_oracle():
    rng = np.random.default_rng(5)
    for _ in range(500):
        a = rng.normal(size=rng.integers(1, 7)).round(3)
        b = rng.normal(size=rng.integers(1, 7)).round(3)
        assert dtw_distance(a, b) == dtw_brute(a.tolist(), b.tolist())
    worst = 0.0
    lengths = [(1, 1), (512, 512), (1, 512), (512, 257)] + [tuple(rng.integers(1, 513, size=2)) for _ in range(16)]
    for n, m in lengths:
        a, b = rng.normal(size=n), rng.normal(size=m)
        full = dtw_distance(a, b, radius=max(n, m))
        worst = max(worst, abs(full - dtw_distance(a, b)))
        if n <= 2 * m:
            worst = max(worst, abs(dtw_distance(a, b, band=1.0) - dtw_distance(a, b)))
    print(f"[5] 500 brute-force pairs exact; max |banded - unbounded| = {worst:.3g}")
    assert worst <= 1e-9


# 6 -------------------------------------------------------------------------

@criterion(6, "Welford matches two-pass mean/variance within 1e-9 relative over 1e5 samples")
def test_welford_oracle():
    rng = np.random.default_rng(6)
    for name, xs in [("normal", rng.normal(size=100_000)),
                     ("offset", 1e6 + rng.normal(size=100_000)),
                     ("lognormal", rng.lognormal(3.0, 1.0, size=100_000))]:
        s = RunningStats()
        for x in xs.tolist():
            s = welford_update(s, x)
        mean, var = two_pass(xs.tolist())
        rel_m, rel_v = abs(s.mean - mean) / abs(mean), abs(s.variance - var) / var
        print(f"[6] {name}: rel. error mean {rel_m:.2e}, variance {rel_v:.2e}")
        assert rel_m <= 1e-9 and rel_v <= 1e-9


# 7 -------------------------------------------------------------------------

@criterion(7, "order check matches exhaustive allowed-next enumeration on legal and single-swap sequences")
def test_order_oracle():
    rng = random.Random(7)
    decisions = models = 0
    while models < 150:
        model = random_model(rng, max_tasks=8)
        words = language(model.root)
        if len(words) > 60:
            continue  # keep the exhaustive loop desk-sized
        models += 1
        oracle: dict[tuple, set] = {}
        seqs = set(words)
        for w in words:
            seqs |= single_swaps(w)
        for w in seqs:
            for i in range(len(w)):
                prefix = w[:i]
                if prefix not in oracle:
                    oracle[prefix] = allowed_oracle(words, prefix)
                e = Event("c", "c", w[i], w[i], START, i)
                flagged = check_order(e, prefix, model) is not None
                assert flagged == (w[i] not in oracle[prefix]), (model, w, i)
                decisions += 1
    print(f"[7] {models} models, {decisions} start decisions agree with the oracle")


# 8 -------------------------------------------------------------------------

_PARITY_FAULTS = [
    lambda: FaultPlan(),
    lambda: FaultPlan([ZeroDuration("a17")]),
    lambda: FaultPlan([TamperSeries("k2", 2, 0.4, 0.05)]),
    lambda: FaultPlan([SwapOrder("k1", "k2", 4)]),
    lambda: FaultPlan([Delay("p5", 5, 60.0)]),
]


@criterion(8, "live checking and replay of the persisted log give identical alerts on 20 seeded runs")
def test_stream_log_parity(tmp_path, turm, references, calibrated):
    total = 0
    for seed in range(20):
        plan = _PARITY_FAULTS[seed % len(_PARITY_FAULTS)]()
        notes = simulate_runs(turm, "turm_daily", SimClock(jitter=0.05), plan, 100 + seed, 2,
                              references=references, series_noise=0.02)
        logger = Logger()
        live = _check(logger.consume(notes), _fresh(calibrated))
        path = tmp_path / f"log{seed}.jsonl"
        save_log(logger.log, path)
        replayed = _check(replay(load_log(path)), _fresh(calibrated))
        assert replayed == live, seed
        total += len(live)
    print(f"[8] 20 runs, {total} alerts, identical in both modes")
    assert total > 0


# 9 -------------------------------------------------------------------------

@criterion(9, "exported XES validates against the schema; export-import-export is byte-identical")
def test_xes(turm, references):
    logs = []
    for name in ("incident_zero_duration", "incident_mandrel", "batch_dilution", "calibration"):
        logger, _ = _run_manifest(_manifest(name))
        logs.append(logger.log)
    v2 = parse_model(
        "model unload_to_tray version=2 { seq { task a10 dur=8 gap=1; task a12 \"Move up\" dur=30; "
        "task a17 \"wait\" dur=30; task a21 \"Move down\" dur=30 gap=1; task a25 dur=6 } }")
    notes = simulate_runs(turm, "turm_daily", SimClock(jitter=0.1), FaultPlan([ChangeModel("a10", 2, v2)]), 3, 2)
    logger = Logger({"note": "<&\"'>"})
    list(logger.consume(notes))
    logs.append(logger.log)
    for log in logs:
        text = export_xes(log)
        assert validate_xes(text) == []
        assert export_xes(import_xes(text)) == text
    print(f"[9] {len(logs)} logs valid and byte-stable, {sum(l.n_events() for l in logs)} events")


# 10 ------------------------------------------------------------------------

_V2 = parse_model(
    "model unload_to_tray version=2 { seq { task a10 dur=8 gap=1; task a12 dur=30; task a17 dur=30; "
    "task a21 dur=30 gap=1; task a25 dur=6 gap=1; task a30 \"Report\" dur=4 } }")
_DUR_TASKS = ["s1", "s2", "p5", "k1", "k2", "a10", "a12", "a17", "a21", "a25"]  # execution order
_GAP_TASKS = ["s2", "p5", "k1", "k2", "a10", "a12", "a25"]  # predecessor has a gap annotation
_ADJACENT = [("s1", "s2"), ("k1", "k2"), ("a10", "a12"), ("a12", "a17"), ("a17", "a21"), ("a21", "a25")]


def _fault_for(kind: str, rng: random.Random, turm):
    prior = {t: m.tasks[t] for m in turm.values() for t in m.tasks}
    if kind == "zero_duration":
        return FaultPlan([ZeroDuration(rng.choice(_DUR_TASKS))]), {DK.TIME_DURATION}
    if kind == "delay":
        if rng.random() < 0.5:
            t = rng.choice(_DUR_TASKS)
            return FaultPlan([Delay(t, 1, 5 * 0.1 * prior[t].expected_duration)]), {DK.TIME_DURATION}
        t = rng.choice(_GAP_TASKS)
        before = prior[_DUR_TASKS[_DUR_TASKS.index(t) - 1]]
        return FaultPlan([Delay(t, 1, 5 * 0.1 * before.expected_gap_after, phase="gap")]), {DK.TIME_GAP}
    if kind == "tamper_series":
        return FaultPlan([TamperSeries("k2", 1, rng.uniform(0.2, 0.6), rng.uniform(0.0, 0.1))]), {DK.SENSOR_DATA}
    if kind == "swap_order":
        a, b = rng.choice(_ADJACENT)
        return FaultPlan([SwapOrder(a, b)]), {DK.CONTROL_FLOW}
    if kind == "change_model":
        return FaultPlan([ChangeModel(rng.choice(["a10", "a12", "a17", "a21"]), 1, _V2)]), {DK.MODEL_EVOLUTION}
    return FaultPlan(), set()


@criterion(10, "fault matrix: each fault kind maps onto its deviation kind only, on 50 seeded runs each")
def test_fault_matrix(turm, references):
    rows = {}
    for kind in ("zero_duration", "delay", "tamper_series", "swap_order", "change_model", "empty"):
        rng = random.Random(kind)
        seen: Counter = Counter()
        for seed in range(50):
            plan, expected = _fault_for(kind, rng, turm)
            notes = run_instance(turm["produce_turm"], SimClock(jitter=0.02), plan, 500 + seed,
                                 repository=turm, references=references)
            devs = _check(Logger().consume(notes), ConformanceChecker(references=references))
            got = {d.kind for d in devs}
            seen.update(d.kind.value for d in devs)
            assert got == expected, (kind, seed, plan, [(d.kind.value, d.task_id) for d in devs])
            if kind == "swap_order":
                assert len(devs) == 1 and devs[0].task_id == plan.faults[0].task_id_b
        rows[kind] = dict(seen)
    for kind, counts in rows.items():
        print(f"[10] {kind:<14} -> {counts or 'no alerts'}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
