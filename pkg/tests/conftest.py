"""
Pytest configuration and shared fixtures for lowprec_mlmc tests.
"""
import pytest

from lowprec_mlmc.randvar import build_inv_cdf_approx
from lowprec_mlmc.sde import GeometricBrownianMotion
from lowprec_mlmc.softfloat import PRESETS


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="Run slow statistical acceptance tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def bf16():
    return PRESETS["bf16"]


@pytest.fixture
def fp16():
    return PRESETS["fp16"]


@pytest.fixture
def fp32():
    return PRESETS["fp32"]


@pytest.fixture
def carrier():
    return PRESETS["fp64"]


@pytest.fixture
def gbm():
    """GBM with the desk defaults mu=0.05, sigma=0.2, x0=1, T=1."""
    return GeometricBrownianMotion()


@pytest.fixture(scope="session")
def linear8():
    return build_inv_cdf_approx("linear", 8)


@pytest.fixture(scope="session")
def linear1024():
    return build_inv_cdf_approx("linear", 1024)


@pytest.fixture(scope="session")
def cubic64():
    return build_inv_cdf_approx("cubic", 64)


@pytest.fixture
def write_lines(tmp_path):
    """Write lines to a file under tmp_path and return its path as a string."""
    def _write(name, *lines):
        path = tmp_path / name
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return str(path)
    return _write
