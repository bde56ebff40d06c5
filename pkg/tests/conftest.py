"""Shared pytest plumbing: the acceptance suite reports one line per criterion."""

ACCEPTANCE_RESULTS = {}


def record_criterion(number: int, title: str, passed: bool, detail: str):
    ACCEPTANCE_RESULTS[number] = (title, passed, detail)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {title}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        title, passed, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if passed else 'FAIL'}  {title}: {detail}")
