import os

from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", max_examples=1000, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

import pytest

from plmnet.dataset import Jitter, collect_dataset
from plmnet.geometry import preset


@pytest.fixture(scope="session")
def small_dataset():
    """A few short expert episodes on the training track."""
    return collect_dataset(preset("train_track"), episodes=6, duration=8.0,
                           jitter=Jitter(action_noise=0.02), seed=11)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import VERDICTS
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for c in sorted(VERDICTS, key=lambda c: c.number):
        terminalreporter.write_line(c.line())
