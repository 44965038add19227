import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=25)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    from veloxnet.data import synth_dataset

    root = tmp_path_factory.mktemp("synth")
    synth_dataset(root, classes=5, per_class=8, seed=0)
    return root


_acceptance = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or report.outcome != "passed":
        n = int(report.nodeid.split("test_criterion_")[1].split("_")[0])
        prev = _acceptance.get(n, (True, 0.0))
        _acceptance[n] = (prev[0] and report.outcome == "passed", prev[1] + report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    from test_acceptance import CRITERIA

    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        if n not in _acceptance:
            terminalreporter.write_line(f"criterion {n}: NOT RUN  {CRITERIA[n]}")
            continue
        ok, seconds = _acceptance[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {CRITERIA[n]}  ({seconds:.1f}s)")
