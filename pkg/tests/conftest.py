from __future__ import annotations

import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ecgclues.synth import BeatTemplate, make_cohort, synthesize

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def noiseless():
    """Eight noiseless beats at 100 Hz with the default morphology."""
    return synthesize(BeatTemplate(), n_beats=8, fs=100.0, seed=0, record_id="clean", label="NORM")


@pytest.fixture(scope="session")
def small_cohort():
    return make_cohort(6, fs=100.0, seed=3, n_beats=8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from oracles import ACCEPTANCE

    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {detail}")
