import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from phylotopo.trees import TaxaSet, enumerate_unrooted

# One line per acceptance criterion, printed in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, passed: bool, detail: str):
    status = "PASS" if passed else "FAIL"
    line = f"ACCEPTANCE {number:2d} [{status}] {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(set(ACCEPTANCE_LINES)):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def taxa8():
    return TaxaSet([f"T{i}" for i in range(8)])


@pytest.fixture(scope="session")
def eight_leaf_trees(taxa8):
    return list(enumerate_unrooted(taxa8))


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240817)
