import numpy as np
import pytest

from lcd_forge import tensor as T


@pytest.fixture(autouse=True)
def float64_mode():
    """Tests run in 64-bit unless they switch modes themselves."""
    T.set_float_mode(64)
    yield
    T.set_float_mode(64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_expert():
    from lcd_forge import data
    from lcd_forge.tasks import TRAIN_TASKS

    return data.generate_expert(TRAIN_TASKS, 40, 48, 24, np.random.default_rng(0))


@pytest.fixture(scope="session")
def small_llp(small_expert):
    """An LLP trained briefly in 32-bit on the small expert corpus."""
    from lcd_forge.llp import build_relabeled, train_llp

    T.set_float_mode(32)
    try:
        pairs = build_relabeled(small_expert.episodes, 4, 0, np.random.default_rng(1))
        llp, report = train_llp(pairs, np.random.default_rng(2), epochs=40, hidden=128, latent_dim=32)
    finally:
        T.set_float_mode(64)
    return llp, report


_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when != "call" and report.outcome == "passed":
        return
    n = int(report.nodeid.split("test_criterion_")[1].split("_")[0])
    note = dict(report.user_properties).get("summary", "")
    prev = _CRITERIA.get(n)
    # parametrized criteria fail if any case fails
    if prev and prev[0] == "failed":
        return
    _CRITERIA[n] = (report.outcome, note if prev is None or report.outcome == "failed" else f"{prev[1]} | {note}")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        outcome, note = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if outcome == 'passed' else 'FAIL'}  {note}")
