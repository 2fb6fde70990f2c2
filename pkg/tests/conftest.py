import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from repfusion.autonet import DenoiserArch
from repfusion.datasets import gaussian_mixture
from repfusion.diffusion import TeacherConfig, scaled_linear_schedule, train_teacher
from repfusion.numeric import RngStream

settings.register_profile("repo", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture(scope="session")
def toy_data():
    return gaussian_mixture(k=3, d=8, n=300, spread=0.3, rng=RngStream(11), radius=2.0)


@pytest.fixture(scope="session")
def small_teacher(toy_data):
    """A briefly trained teacher, T=20, mid width 8."""
    arch = DenoiserArch(8, (24, 8, 24), time_dim=8)
    cfg = TeacherConfig(epochs=30, batch_size=64, lr=0.02)
    return train_teacher(arch, scaled_linear_schedule(20), toy_data, cfg, RngStream(5))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)



# ----- acceptance summary -----
# Tests marked ``criterion(n, title)`` get one PASS/FAIL line in the terminal
# summary; ``acceptance_notes[n]`` holds measured values printed alongside.

acceptance_results: dict = {}
acceptance_notes: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    m = item.get_closest_marker("criterion")
    rep = outcome.get_result()
    if m is None or (rep.when != "call" and not rep.failed):
        return
    key = tuple(m.args)
    if rep.when == "call" or key not in acceptance_results:
        acceptance_results[key] = rep.outcome


def pytest_terminal_summary(terminalreporter):
    if not acceptance_results:
        return
    terminalreporter.section("acceptance criteria")
    for (number, title), outcome in sorted(acceptance_results.items()):
        status = "PASS" if outcome == "passed" else "FAIL"
        note = acceptance_notes.get(number, "")
        terminalreporter.write_line(f"criterion {number:>2} {status}: {title}" + (f" [{note}]" if note else ""))
