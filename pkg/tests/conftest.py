import pytest

_REPORT: dict[int, list[tuple[str, bool, str]]] = {}


@pytest.fixture(scope="session")
def acceptance():
    """Collects (criterion, check, ok, detail) rows for the end-of-run summary."""

    def record(criterion: int, check: str, ok: bool, detail: str = "") -> bool:
        _REPORT.setdefault(criterion, []).append((check, bool(ok), detail))
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _REPORT:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for criterion in sorted(_REPORT):
        rows = _REPORT[criterion]
        status = "PASS" if all(ok for _, ok, _ in rows) else "FAIL"
        detail = "; ".join(f"{name} {'ok' if ok else 'FAILED'} ({d})" if d else
                           f"{name} {'ok' if ok else 'FAILED'}" for name, ok, d in rows)
        tr.write_line(f"criterion {criterion}: {status}: {detail}")
