import pytest
import torch

from attndistill import synthetic
from attndistill.backbone import build_toy


@pytest.fixture(scope="session")
def toy64():
    """Default toy backbone in double precision."""
    return build_toy({"dtype": "float64"})


@pytest.fixture(scope="session")
def toy32():
    return build_toy()


@pytest.fixture(scope="session")
def identity_toy():
    return build_toy({"identity_codec": True, "dtype": "float64"})


@pytest.fixture
def style_image():
    return synthetic.stripes(64, 64)


@pytest.fixture
def content_image():
    return synthetic.scene(64, 64)



def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[number])
