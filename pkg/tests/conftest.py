from pathlib import Path

import pytest
from hypothesis import settings as hypothesis_settings

from app.env import settings
from app.apis.complex_core import build_complete, builtin_complex

hypothesis_settings.register_profile("ci", max_examples=25, deadline=None)
hypothesis_settings.load_profile("ci")

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def rp2():
    return builtin_complex("rp2")


@pytest.fixture
def torus():
    return builtin_complex("torus")


@pytest.fixture
def complete_6_3():
    return build_complete(6, 3)


@pytest.fixture
def complete_8_4():
    return build_complete(8, 4)


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture(autouse=True)
def serial_workers():
    """Tests run serially; results never depend on the pool size anyway."""
    previous = settings.workers
    settings.workers = 1
    yield
    settings.workers = previous
