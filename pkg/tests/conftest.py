from __future__ import annotations

import pytest

from openguard.harness import generate_victim_corpus


@pytest.fixture
def corpus(tmp_path):
    """A fresh 40-file corpus; returns its manifest."""
    return generate_victim_corpus(tmp_path / "victim", 40, seed=5)


def pytest_terminal_summary(terminalreporter):
    from acceptance_results import RESULTS
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        ok, detail = RESULTS[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
