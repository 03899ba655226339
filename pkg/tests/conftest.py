import numpy as np
import pytest
from hypothesis import settings

from ginn import datasets, tabular

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture(scope="session")
def iris():
    return datasets.load_iris()


@pytest.fixture
def write_csv(tmp_path):
    """Write text to a CSV file in a fresh temporary directory."""

    def _write(text, name="data.csv"):
        path = tmp_path / name
        path.write_text(text, encoding="utf-8")
        return path

    return _write


def random_dataset(n, k, missing=0.2, seed=0, labels=False):
    rng = np.random.default_rng(seed)
    values = rng.normal(size=(n, k))
    values[rng.random((n, k)) < missing] = np.nan
    # keep every column partly observed
    values[0] = rng.normal(size=k)
    y = rng.integers(0, 3, size=n) if labels else None
    return tabular.from_array(values, labels=y, label_categories=["a", "b", "c"] if labels else None)


# one pass/fail line per acceptance criterion, printed after the run
_CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion implemented by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    failed = report.failed
    if report.when == "call" or failed:
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        previous = _CRITERIA.get(number)
        if previous is None or previous[0] == "PASS":
            _CRITERIA[number] = ("FAIL" if failed else "PASS", title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        status, title, detail = _CRITERIA[number]
        line = f"criterion {number:>2} {status}: {title}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))
