import numpy as np
import pytest

from dclab.attention import construct_typed, mix
from dclab.dgp import TokenSequence, generate
from dclab.graph import grid, reweight, spectral_basis

RHO = (0.25, 0.5, 0.2, 0.05)


@pytest.fixture(scope="session")
def g44():
    return grid(4, 4)


@pytest.fixture(scope="session")
def rg44(g44):
    return reweight(g44)


@pytest.fixture(scope="session")
def basis44(rg44):
    return spectral_basis(rg44, 3)


@pytest.fixture(scope="session")
def seq8k(rg44):
    return generate(rg44, 8192, 0.0, seed=1)


@pytest.fixture(scope="session")
def typed8k(seq8k, g44):
    return {k: construct_typed(seq8k, g44, k) for k in "ABOT"}


@pytest.fixture(scope="session")
def mixture8k(typed8k):
    return mix([typed8k[k] for k in "ABOT"], RHO)


def alternating(n, c=2):
    """K2-style sequence 1,2,1,2,... (0-based tokens)."""
    return TokenSequence(np.arange(n) % c, c)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
