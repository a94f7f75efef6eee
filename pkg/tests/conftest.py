import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mfglab.fixtures import fixture  # noqa: E402
from mfglab.policy import build_quantization  # noqa: E402

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def crowd2():
    return fixture("crowd2_global")


@pytest.fixture(scope="session")
def local9(crowd2):
    return build_quantization(crowd2, resolution=2, softness_floor=0.05, kernel_space="local")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
