import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dxarisk.cohort import LabeledDataset

settings.register_profile("default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_dataset(n_neg, n_pos, n_features=4, shift=1.5, seed=0, names=None):
    """Gaussian classes; positives are shifted by ``shift`` along every feature."""
    rng = np.random.default_rng(seed)
    X = np.vstack([rng.standard_normal((n_neg, n_features)), rng.standard_normal((n_pos, n_features)) + shift])
    y = np.r_[np.zeros(n_neg, int), np.ones(n_pos, int)]
    names = names or [f"f{j}" for j in range(n_features)]
    return LabeledDataset(X, y, list(names), [f"s{i:04d}" for i in range(n_neg + n_pos)])


@pytest.fixture
def imbalanced():
    return make_dataset(90, 10, n_features=3, seed=1)


# ---------------------------------------------------------------- acceptance summary

_CRITERIA: dict[int, tuple[str, str, float]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): one numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    # setup time counts: criteria 7 and 11 do their pipeline runs in a fixture
    spent = _CRITERIA.get(number, ("", "", 0.0))[2] + report.duration
    if report.when == "setup":
        _CRITERIA[number] = (title, "FAIL" if report.outcome != "passed" else "", spent)
    elif report.when == "call":
        _CRITERIA[number] = (title, "PASS" if report.outcome == "passed" else "FAIL", spent)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status, secs = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {status}  {title}  ({secs:.1f} s)")
