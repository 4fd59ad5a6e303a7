import numpy as np
import pytest

from fpcpd.tensor import DenseTensor3, FactorModel, reconstruct

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_model(rng, dims, rank):
    return FactorModel(rng.standard_normal((dims[0], rank)),
                       rng.standard_normal((dims[1], rank)),
                       rng.standard_normal((dims[2], rank)))


def exact_tensor(rng, dims, rank):
    f = random_model(rng, dims, rank)
    return reconstruct(f), f


@pytest.fixture
def small_tensor(rng):
    return DenseTensor3(rng.standard_normal((3, 4, 5)))
