import pytest

from d3dlab.datasets import SyntheticConfig, build_in_memory
from d3dlab.network import NetworkConfig

TINY_DATA = SyntheticConfig(clips_per_class=5, clip_extents=(4, 16, 16), seed=3)
TINY_NET = NetworkConfig(base_width=4, clip_extents=(4, 16, 16), seed=0)


@pytest.fixture(scope="session")
def tiny_dataset():
    return build_in_memory(TINY_DATA)


CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    number, title = marker.args
    if report.failed or report.when == "call":
        detail = ""
        if report.failed:
            crash = getattr(report.longrepr, "reprcrash", None)
            detail = (crash.message if crash else str(report.longrepr)).splitlines()[0]
        CRITERIA[number] = (title, "FAIL" if report.failed else "PASS", detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        title, verdict, detail = CRITERIA[number]
        line = f"{verdict} criterion {number}: {title}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))
