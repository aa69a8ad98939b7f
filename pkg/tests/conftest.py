import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from biquant import pipeline
from biquant.bench import train_reference

settings.register_profile("default", max_examples=100, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def reference():
    """Trained detector and splits for seed 0."""
    detector, train, val, test = reference_for(0)
    return dict(detector=detector, train=train, val=val, test=test)


@pytest.fixture(scope="session")
def pipeline_result():
    return run_for(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_REFERENCES = {}
_RUNS = {}


def reference_for(seed):
    """Cached (detector, train, val, test) for ``seed``."""
    if seed not in _REFERENCES:
        _REFERENCES[seed] = train_reference(seed)
    return _REFERENCES[seed]


def run_for(seed, **changes):
    """Cached pipeline run on the seed's reference with config overrides."""
    key = (seed, tuple(sorted(changes.items())))
    if key not in _RUNS:
        detector, train, _, _ = reference_for(seed)
        _RUNS[key] = pipeline.run(detector, train, pipeline.QuantConfig(seed=seed, **changes))
    return _RUNS[key]


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
