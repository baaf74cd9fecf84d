import os
import warnings

import pytest

from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# numba's on-disk cache can warn about file locations in read-only installs
warnings.filterwarnings("ignore", module="numba")


_ACCEPTANCE = []


@pytest.fixture
def acceptance_lines():
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
