"""Collects one pass/fail line per acceptance criterion and prints them at the end of the run."""
import pytest

RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion a test decides")


@pytest.fixture
def record(request):
    """Store the verdict and measurements of the criterion the calling test is marked with."""
    marker = request.node.get_closest_marker("criterion")
    number, title = marker.args

    def _record(passed, detail):
        RESULTS[number] = (title, bool(passed), detail)
        return passed
    return _record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call":
        return
    number, title = marker.args
    if report.failed:
        # an exception before the verdict was recorded, or an assertion after it
        lines = str(call.excinfo.value).splitlines() if call.excinfo else []
        message = lines[0] if lines else "failed"
        prior = RESULTS.get(number)
        if prior is None:
            RESULTS[number] = (title, False, message)
        elif prior[1]:
            RESULTS[number] = (title, False, f"{prior[2]}; {message}")
    elif report.passed and number not in RESULTS:
        RESULTS[number] = (title, True, "")


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(RESULTS):
        title, passed, detail = RESULTS[number]
        line = f"criterion {number} {title}: {'PASS' if passed else 'FAIL'}"
        terminalreporter.write_line(f"{line} ({detail})" if detail else line)
