from __future__ import annotations

import json
from pathlib import Path

import pytest

from thinker.llm import script_load
from thinker.retrieval import LexicalRetriever

FIXTURES = Path(__file__).parent / "fixtures"

_ACCEPTANCE: list[tuple[str, str, float, float]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(name, limit): acceptance criterion with a runtime limit in seconds")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        name, limit = mark.args
        _ACCEPTANCE.append((name, report.outcome, report.duration, limit))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome, duration, limit in _ACCEPTANCE:
        verdict = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{verdict}  {name}  ({duration:.2f}s, limit {limit:g}s)")


@pytest.fixture
def fixtures() -> Path:
    return FIXTURES


@pytest.fixture
def film_question() -> dict:
    return json.loads((FIXTURES / "film_question.json").read_text())


@pytest.fixture
def film_llm():
    return script_load(FIXTURES / "film_script.json")


@pytest.fixture
def film_retriever() -> LexicalRetriever:
    return LexicalRetriever.from_file(FIXTURES / "films.jsonl")

