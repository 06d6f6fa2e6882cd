from pathlib import Path

import numpy as np
import pytest

from probmask import netcore

ROOT = Path(__file__).resolve().parents[1]
MNIST_DIR = ROOT / "data" / "mnist5k"

# filled by tests/test_acceptance.py, printed at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def two_layer():
    spec = netcore.mlp([6, 5, 4])
    return spec, netcore.kaiming_normal_init(spec, 7)


@pytest.fixture
def mnist_dir():
    return MNIST_DIR
