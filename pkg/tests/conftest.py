import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pointnuc.data import generate_dataset_dir

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """A 10-image 64x64 dataset (6/2/2) for fast harness tests."""
    root = tmp_path_factory.mktemp("tiny") / "data"
    generate_dataset_dir(root, (6, 2, 2), seed=3, image_size=(64, 64), nuclei_per_image=(3, 6),
                         radius_range=(3.0, 6.0))
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_configure(config):
    config._criteria = {}


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(n, passed, detail)``."""

    def record(number, passed, detail):
        status = "PASS" if passed else "FAIL"
        request.config._criteria[number] = f"criterion {number}: {status} - {detail}"
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "_criteria", {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
