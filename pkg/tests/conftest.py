import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_line(request):
    """Record one summary line per acceptance criterion, marked PASS or FAIL by test outcome."""
    holder = {"detail": ""}
    yield holder
    report = getattr(request.node, "rep_call", None)
    status = "PASS" if report is not None and report.passed else "FAIL"
    ACCEPTANCE_LINES.append(f"{status}  {request.node.name}: {holder['detail']}")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
