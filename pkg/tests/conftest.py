import sys
import warnings
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from triphase.errors import StratumExhausted  # noqa: E402
from triphase.simulation import SimConfig, generate_cohort, sample_phases, stream  # noqa: E402


def small_cohort(n1=1500, n2=500, n3=150, seed=11, setting="s1", **kw):
    """A sampled synthetic cohort small enough for unit tests."""
    cfg = SimConfig(n1=n1, n2=n2, n3=n3, setting=setting, truth="gamma", **kw)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", StratumExhausted)
        full, _ = generate_cohort(cfg, stream(seed, 0, 0))
        return sample_phases(full, cfg, stream(seed, 0, 1)), full


@pytest.fixture(scope="session")
def cohort_pair():
    return small_cohort()


@pytest.fixture(scope="session")
def cohort(cohort_pair):
    return cohort_pair[0]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one PASS/FAIL line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
