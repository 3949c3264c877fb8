"""Command-line entry point: ``procwatch {simulate,check,calibrate,export-xes,stats}``.

Exit codes: 0 no deviations, 1 deviations found, 2 input error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .config import CheckerConfig, load_config
from .conformance import ConformanceChecker
from .engine import read_notifications, simulate_runs, write_notifications
from .events import (
    Event, Log, LogWriter, Logger, StreamItem, append, load_items, load_log, replay,
)
from .model import ModelError
from .pipeline import RunManifest, scenario_path, staged
from .series import load_references, save_references
from .splitter import PartSplitter
from .xes import export_xes, validate_xes

EXIT_OK, EXIT_DEVIATIONS, EXIT_INPUT = 0, 1, 2
INPUT_ERRORS = (OSError, ValueError, KeyError, TypeError, ModelError)


class InputError(Exception):
    pass


def _err(msg: str) -> None:
    print(f"procwatch: {msg}", file=sys.stderr)


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- simulate ----------------------------------------------------------------

def _manifest_from_args(args) -> RunManifest:
    if args.manifest and args.scenario:
        raise InputError("give either --manifest or --scenario")
    if args.scenario:
        args.manifest = str(scenario_path(f"{args.scenario}.manifest.json"))
        if not Path(args.manifest).exists():
            raise InputError(f"unknown scenario {args.scenario!r}")
    if args.manifest:
        m = RunManifest.load(args.manifest)
    else:
        if not args.models or not args.root:
            raise InputError("simulate needs --manifest, --scenario, or --models and --root")
        m = RunManifest(models=Path(args.models), root=args.root,
                        faults=Path(args.faults) if args.faults else None,
                        references=Path(args.references) if args.references else None)
    # flag overrides
    if args.seed is not None:
        m.seed = args.seed
    if args.runs is not None:
        m.runs = args.runs
    if args.jitter is not None:
        m.clock = {**m.clock, "jitter": args.jitter}
    if args.series_noise is not None:
        m.series_noise = args.series_noise
    if args.faults and args.manifest:
        m.faults = Path(args.faults)
    if args.references and args.manifest:
        m.references = Path(args.references)
    m.check_paths()
    return m


def cmd_simulate(args) -> int:
    m = _manifest_from_args(args)
    out = Path(args.out) if args.out else m.output
    if out is None:
        raise InputError("no output directory: pass --out")
    repository = m.repository()
    if m.root not in repository:
        raise InputError(f"root model {m.root!r} not found in {m.models}")
    refs = m.reference_series()
    digest = m.digest()
    notes = simulate_runs(repository, m.root, m.sim_clock(), m.fault_plan(), m.seed, m.runs,
                          references=refs, series_noise=m.series_noise)

    out.mkdir(parents=True, exist_ok=True)
    with open(out / "notifications.jsonl", "w", encoding="utf-8") as fh:
        write_notifications(notes, fh)
    metadata = {"manifest:sha256": digest, "run:seed": m.seed, "run:runs": m.runs, "run:root": m.root}
    logger = Logger(metadata)
    writer = LogWriter(out / "log.jsonl", metadata=metadata)
    for item in staged(notes, logger.consume):
        writer.write(item)
    writer.close()
    logger.close()
    (out / "log.xes").write_text(export_xes(logger.log), encoding="utf-8")
    if refs:
        save_references(refs, out / "references")

    anomalies = {cid: sorted(t.flags) for cid, t in sorted(logger.log.traces.items()) if t.flags}
    summary = {
        "manifest_sha256": digest,
        "seed": m.seed,
        "runs": m.runs,
        "root": m.root,
        "faults": m.fault_plan().to_json(),
        "notifications": len(notes),
        "cases": len(logger.log),
        "events": logger.log.n_events(),
        "quarantined": len(logger.quarantine),
        "anomalies": anomalies,
    }
    (out / "run.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    print(f"simulated {m.runs} run(s) of {m.root} (seed {m.seed}): {len(notes)} notifications, "
          f"{summary['events']} events -> {out}")
    return EXIT_OK


# -- event sources -----------------------------------------------------------

def _source(args, bad: list) -> tuple[Iterable[StreamItem], str]:
    """Stream items from exactly one of --log / --stream / --events, plus an input hash."""
    given = [name for name in ("log", "stream", "events") if getattr(args, name, None)]
    if len(given) != 1:
        raise InputError("give exactly one of --log, --stream or --events")
    kind = given[0]
    path = Path(getattr(args, kind))
    if not path.exists():
        raise InputError(f"no such file: {path}")
    digest = _sha256_file(path)
    if kind == "log":
        return replay(load_log(path)), digest
    if kind == "events":
        return _lines(path, lambda fh: load_items(fh, errors=bad)), digest

    logger = Logger()
    notes = _lines(path, lambda fh: read_notifications(fh, errors=bad))
    return staged(notes, logger.consume), digest


def _lines(path: Path, parse) -> Iterator:
    with open(path, encoding="utf-8") as fh:
        yield from parse(fh)


def _report_bad(bad: list) -> None:
    if bad:
        _err(f"skipped {len(bad)} malformed line(s)")
        for lineno, msg in bad[:10]:
            _err(f"  line {lineno}: {msg}")


# -- check -------------------------------------------------------------------

def _build_checker(args) -> ConformanceChecker:
    refs = load_references(args.references) if args.references else None
    stats = {}
    if args.snapshot:
        snap = ConformanceChecker.load_snapshot(args.snapshot)
        config, stats = snap.config, snap.stats_
    else:
        config = CheckerConfig()
    if args.config:
        config = load_config(args.config)
    config = config.replace(
        z_threshold=args.z_threshold,
        dtw_threshold=args.dtw_threshold,
        dtw_band=args.dtw_band,
        cold_start_n=args.cold_start_n,
        prior_sigma_fraction=args.prior_sigma_fraction,
        znormalize_series=True if args.znormalize else None,
    )
    checker = ConformanceChecker.from_config(config, references=refs)
    checker.stats_ = dict(stats)
    return checker.reset()


def _summary_rows(checker: ConformanceChecker) -> list[dict]:
    counts: dict[tuple, int] = {}
    for d in checker.deviations_:
        key = (d.case_id, d.part_id)
        counts[key] = counts.get(key, 0) + 1
    rows = []
    for (case, part), cost in sorted(checker.costs().items(), key=lambda kv: (kv[0][0], kv[0][1] or "")):
        rows.append({"case": case, "part": part, "alerts": counts.get((case, part), 0), "cost": cost})
    return rows


def _print_table(rows: list[dict], fh) -> None:
    print(f"{'case':<12} {'part':<14} {'alerts':>6} {'cost':>10}", file=fh)
    for r in rows:
        print(f"{r['case']:<12} {r['part'] or '-':<14} {r['alerts']:>6} {r['cost']:>10.3f}", file=fh)


def cmd_check(args) -> int:
    bad: list = []
    checker = _build_checker(args)
    items, digest = _source(args, bad)
    stages = [] if args.no_split else [PartSplitter().iter_transform]
    alerts_fh = open(args.alerts, "w", encoding="utf-8") if args.alerts else sys.stdout
    n = 0
    try:
        for d in staged(items, *stages, checker.check):
            alerts_fh.write(json.dumps(d.to_json()) + "\n")
            alerts_fh.flush()
            n += 1
    finally:
        if args.alerts:
            alerts_fh.close()
    _report_bad(bad)
    for msg in checker.diagnostics_:
        _err(f"warning: {msg}")
    rows = _summary_rows(checker)
    _print_table(rows, sys.stderr)
    if args.summary:
        summary = {"input_sha256": digest, "alerts": n, "malformed_lines": len(bad),
                   "config": checker.config.to_json(), "parts": rows}
        Path(args.summary).write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    if bad and args.strict:
        return EXIT_INPUT
    return EXIT_DEVIATIONS if n else EXIT_OK


# -- calibrate ---------------------------------------------------------------

def cmd_calibrate(args) -> int:
    bad: list = []
    base = load_config(args.config) if args.config else CheckerConfig()
    base = base.replace(dtw_band=args.dtw_band, znormalize_series=True if args.znormalize else None)
    refs = load_references(args.references) if args.references else None
    items, digest = _source(args, bad)
    checker = ConformanceChecker.from_config(base, references=refs)
    try:
        checker.fit(PartSplitter().iter_transform(items))
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    _report_bad(bad)
    snap = checker.snapshot()
    snap["calibration"] = {"input_sha256": digest, "cases": checker.n_cases_fit_}
    Path(args.out).write_text(json.dumps(snap, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    for sid, thr in sorted(checker.dtw_thresholds_.items()):
        print(f"dtw_threshold[{sid}] = {thr:.6g}")
    print(f"calibrated on {checker.n_cases_fit_} run(s), {len(checker.stats_)} statistics -> {args.out}")
    return EXIT_OK


# -- export-xes --------------------------------------------------------------

def cmd_export_xes(args) -> int:
    bad: list = []
    if args.log:
        log = load_log(args.log)
    else:
        items, _ = _source(args, bad)
        log = Log()
        for item in items:
            append(log, item)
        for trace in log.traces.values():
            trace.open = False
    _report_bad(bad)
    text = export_xes(log)
    problems = validate_xes(text)
    if problems:
        for p in problems[:10]:
            _err(f"schema: {p}")
        return EXIT_INPUT
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# -- stats -------------------------------------------------------------------

def _describe(values: list[float]) -> dict:
    arr = np.asarray(values, dtype=float)
    return {
        "n": int(arr.size),
        "mean": float(arr.mean()),
        "std": float(arr.std(ddof=1)) if arr.size > 1 else None,
        "min": float(arr.min()),
        "max": float(arr.max()),
    }


def log_stats(items: Iterable[StreamItem]) -> dict:
    """Counts and per-task duration summaries (seconds) for a stream."""
    cases: dict[str, dict] = {}
    open_starts: dict[tuple, int] = {}
    durations: dict[str, list[float]] = {}
    for item in PartSplitter().iter_transform(items):
        c = cases.setdefault(item.case_id, {"events": 0, "parts": set(), "models": set()})
        if not isinstance(item, Event):
            c["models"].add(f"{item.model_id}@{item.version}")
            continue
        c["events"] += 1
        if item.part_id is not None:
            c["parts"].add(item.part_id)
        key = (item.source_instance_id, item.task_id)
        if item.lifecycle_transition == "start":
            open_starts[key] = item.timestamp
        elif key in open_starts:
            durations.setdefault(item.task_id, []).append((item.timestamp - open_starts.pop(key)) / 1000)
    return {
        "cases": {cid: {"events": c["events"], "parts": len(c["parts"]), "models": sorted(c["models"])}
                  for cid, c in sorted(cases.items())},
        "durations": {tid: _describe(v) for tid, v in sorted(durations.items())},
    }


def cmd_stats(args) -> int:
    if args.snapshot:
        snap = json.loads(Path(args.snapshot).read_text(encoding="utf-8"))
        ConformanceChecker.from_snapshot(snap)  # validates the format
        result = {"config": snap["config"], "stats": snap["stats"]}
    else:
        bad: list = []
        items, _ = _source(args, bad)
        result = log_stats(items)
        _report_bad(bad)
    if args.json:
        print(json.dumps(result, indent=1, sort_keys=True))
        return EXIT_OK
    if "durations" in result:
        print(f"{len(result['cases'])} case(s)")
        for cid, c in result["cases"].items():
            print(f"  {cid}: {c['events']} events, {c['parts']} part(s), models {', '.join(c['models'])}")
        print(f"{'task':<12} {'n':>6} {'mean s':>10} {'std s':>10}")
        for tid, d in result["durations"].items():
            std = "-" if d["std"] is None else f"{d['std']:.3f}"
            print(f"{tid:<12} {d['n']:>6} {d['mean']:>10.3f} {std:>10}")
    else:
        print(f"{'kind':<9} {'model':<16} {'task':<10} {'n':>5} {'mean':>10}")
        for s in result["stats"]:
            print(f"{s['kind']:<9} {s['model']:<16} {s['task']:<10} {s['n']:>5} {s['mean']:>10.3f}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def _add_sources(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("event source (exactly one)")
    g.add_argument("--log", help="persisted log (log.jsonl), replayed instantly")
    g.add_argument("--stream", help="engine notification JSON-lines, run through the logger")
    g.add_argument("--events", help="event-stream JSON-lines")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="procwatch", description="Online conformance checking for simulated "
                                     "manufacturing processes.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run the engine and write notifications, log and XES")
    p.add_argument("--manifest", help="run manifest JSON")
    p.add_argument("--scenario", help="shipped scenario name, e.g. incident_zero_duration")
    p.add_argument("--models", help="model repository file (without a manifest)")
    p.add_argument("--root", help="root model id (without a manifest)")
    p.add_argument("--faults", help="fault plan JSON")
    p.add_argument("--references", help="directory of reference series")
    p.add_argument("--seed", type=int)
    p.add_argument("--runs", type=int)
    p.add_argument("--jitter", type=float, help="relative timing spread")
    p.add_argument("--series-noise", type=float)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("check", help="check a stream or log, emit alerts as JSON-lines")
    _add_sources(p)
    p.add_argument("--config", help="checker config JSON")
    p.add_argument("--snapshot", help="calibration snapshot (config and warm statistics)")
    p.add_argument("--references", help="directory of reference series")
    p.add_argument("--z-threshold", type=float)
    p.add_argument("--dtw-threshold", type=float)
    p.add_argument("--dtw-band", type=float)
    p.add_argument("--cold-start-n", type=int)
    p.add_argument("--prior-sigma-fraction", type=float)
    p.add_argument("--znormalize", action="store_true", help="z-normalize series before DTW")
    p.add_argument("--no-split", action="store_true", help="check whole cases, without part splitting")
    p.add_argument("--alerts", help="write alerts here instead of stdout")
    p.add_argument("--summary", help="write the per-part cost summary as JSON")
    p.add_argument("--strict", action="store_true", help="exit 2 if any input line was malformed")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("calibrate", help="learn statistics and DTW thresholds from conforming runs")
    _add_sources(p)
    p.add_argument("--config", help="base checker config JSON")
    p.add_argument("--references", help="directory of reference series")
    p.add_argument("--dtw-band", type=float)
    p.add_argument("--znormalize", action="store_true")
    p.add_argument("--out", required=True, help="snapshot JSON to write")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("export-xes", help="export a log as XES")
    _add_sources(p)
    p.add_argument("--out", help="XES file (default stdout)")
    p.set_defaults(func=cmd_export_xes)

    p = sub.add_parser("stats", help="summarize a log or a calibration snapshot")
    _add_sources(p)
    p.add_argument("--snapshot")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_stats)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        _err(str(exc))
        return EXIT_INPUT
    except INPUT_ERRORS as exc:
        _err(f"{type(exc).__name__}: {exc}")
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
