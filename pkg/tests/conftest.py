"""Collects acceptance outcomes and prints one line per criterion at session end."""
import pytest

ACCEPTANCE: dict[str, list[tuple[str, bool, str]]] = {}


@pytest.fixture
def criterion():
    """Record one checked clause: ``criterion(number, label, ok, detail)``."""

    def record(number, label, ok, detail=""):
        ACCEPTANCE.setdefault(str(number), []).append((label, bool(ok), detail))
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE, key=int):
        clauses = ACCEPTANCE[number]
        ok = all(c[1] for c in clauses)
        detail = "; ".join(f"{label}: {'ok' if good else 'FAILED'} ({d})" for label, good, d in clauses)
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
