import pytest

from horsespec.construction import DEFAULTS


@pytest.fixture(scope="session")
def params():
    return DEFAULTS
