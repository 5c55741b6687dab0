import pytest

# acceptance tests append (criterion, passed, detail) here
ACCEPTANCE_RESULTS: list[tuple[int, bool, str]] = []


@pytest.fixture
def record_criterion():
    def record(criterion: int, passed: bool, detail: str) -> bool:
        line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'} ({detail})"
        print(line)
        ACCEPTANCE_RESULTS.append((criterion, passed, detail))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in sorted(ACCEPTANCE_RESULTS, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {criterion}: {'PASS' if passed else 'FAIL'} ({detail})")
