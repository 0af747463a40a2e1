from __future__ import annotations

import os
from pathlib import Path

import pytest
from hypothesis import settings

settings.register_profile("ci", deadline=None, print_blob=True)
settings.load_profile("ci")

_VERDICTS: list[tuple[str, str, str]] = []


@pytest.fixture
def verdict():
    """Record a PASS/FAIL line for an acceptance criterion and return its outcome."""

    def record(criterion: str, ok: bool, detail: str) -> bool:
        line = ("PASS" if ok else "FAIL", criterion, detail)
        _VERDICTS.append(line)
        print(f"{line[0]} {criterion}: {detail}")
        return ok

    return record


@pytest.fixture
def workdir(tmp_path):
    """Directory for virtual devices; must support O_DIRECT (override with OFFLOADKIT_TEST_DIR)."""
    base = os.environ.get("OFFLOADKIT_TEST_DIR")
    if not base:
        return tmp_path
    d = Path(base) / tmp_path.name
    d.mkdir(parents=True, exist_ok=True)
    return d


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for status, criterion, detail in sorted(_VERDICTS, key=lambda v: _order(v[1])):
        terminalreporter.write_line(f"{status} {criterion}: {detail}")


def _order(name: str):
    head = name.split()[0].lstrip("AC")
    return (int(head) if head.isdigit() else 99, name)
