"""Shared fixtures: tape hygiene and the acceptance summary banner."""

import pytest

from topicnet import tensor as tn

ACCEPTANCE_RESULTS = []


def record_acceptance(index: int, name: str, passed: bool, detail: str = "") -> None:
    """Collect one criterion verdict for the end-of-run banner."""
    ACCEPTANCE_RESULTS.append((index, name, passed, detail))


@pytest.fixture(autouse=True)
def _clean_state():
    tn.TAPE.clear()
    try:
        from topicnet import objectives

        objectives.reset_psi_evals()
    except ImportError:
        pass
    yield
    tn.TAPE.clear()


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for idx, name, ok, detail in sorted(ACCEPTANCE_RESULTS):
        line = f"ACCEPTANCE {idx} ({name}): {'PASS' if ok else 'FAIL'}"
        if detail:
            line += f" [{detail}]"
        terminalreporter.write_line(line)
