import numpy as np
import pytest

from roofadv.attack import prepare_samples
from roofadv.data import SyntheticParams, generate_synthetic_dataset
from roofadv.detector import TemplateDetector
from roofadv.roof_fit import VehicleShapeBank, build_prior


@pytest.fixture(scope="session")
def prior():
    return build_prior(VehicleShapeBank.procedural())


@pytest.fixture(scope="session")
def small_frames():
    return generate_synthetic_dataset(SyntheticParams(n_frames=8, vehicles=(2, 5)), rng=11, prefix="t")


@pytest.fixture(scope="session")
def small_detector(small_frames):
    return TemplateDetector(l2=1e-4, max_iter=60, hard_negative_rounds=1).fit(small_frames)


@pytest.fixture(scope="session")
def small_samples(small_frames, prior):
    return prepare_samples(small_frames[:3], prior)


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


_VERDICTS = []


@pytest.fixture(scope="session")
def verdicts():
    """Collector for acceptance PASS/FAIL lines, printed in the terminal summary."""
    return _VERDICTS


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
