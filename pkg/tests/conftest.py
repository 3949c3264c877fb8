import json
from pathlib import Path

import pytest

from procwatch.engine import FaultPlan
from procwatch.model import parse_repository
from procwatch.pipeline import scenario_path
from procwatch.series import load_references


@pytest.fixture(scope="session")
def turm():
    return parse_repository(scenario_path("turm.pm").read_text())


@pytest.fixture(scope="session")
def references():
    return load_references(scenario_path("references"))


def load_plan(name: str) -> FaultPlan:
    return FaultPlan.from_json(json.loads(Path(scenario_path(f"{name}.faults.json")).read_text()))


# -- acceptance reporting ----------------------------------------------------

_criteria: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _criteria[number] = (title, "PASS" if report.passed else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, status = _criteria[number]
        terminalreporter.write_line(f"criterion {number:>2}: {status}  {title}")
