import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")

# (number, title) -> (passed, detail), filled by tests marked with @pytest.mark.criterion
_CRITERIA: dict[tuple[int, str], tuple[bool, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def detail(request):
    """Collects measured values that end up on the criterion's summary line."""
    parts: list[str] = []
    request.node.criterion_detail = parts
    return parts.append


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call":
        return
    parts = getattr(item, "criterion_detail", [])
    if report.failed and call.excinfo is not None:
        parts = [*parts, f"error: {call.excinfo.typename}: {str(call.excinfo.value).splitlines()[0][:160]}"]
    _CRITERIA[tuple(marker.args)] = (report.passed, "; ".join(parts))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for (number, title), (passed, text) in sorted(_CRITERIA.items()):
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number:>2}. {title}: {text}")
