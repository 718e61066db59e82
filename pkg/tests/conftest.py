import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cfx.dataset import DEFAULT_SCHEMA, Dataset
from cfx.synthbench import SynthConfig, generate_synthetic

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# Filled by tests/test_acceptance.py, printed once at the end of the run.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def synth_small():
    """400 synthetic records and their ground truth."""
    return generate_synthetic(SynthConfig(n=400, seed=11))


@pytest.fixture(scope="session")
def synth_5000():
    return generate_synthetic(SynthConfig(n=5000, seed=5))


def make_dataset(rows, schema=DEFAULT_SCHEMA, record_ids=None):
    """Dataset from (outcome, treatments, confounders) tuples."""
    y = [r[0] for r in rows]
    t = [r[1] for r in rows]
    x = [r[2] for r in rows]
    ids = list(range(len(rows))) if record_ids is None else record_ids
    return Dataset(tuple(schema), ids, y, t, x)


MID_CONFOUNDERS = [2573.91, 76516.76, 44.52, 58.68, 16.59, 14.65, 6.13, 247.19, 36.0]
