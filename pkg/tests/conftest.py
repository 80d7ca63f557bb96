import pytest

from pdmpsim.models import GaussianPotential, TelegraphModel, ZzsModel

from helpers import FixedUniform


@pytest.fixture
def half():
    return FixedUniform(0.5)


@pytest.fixture
def zzs1():
    return ZzsModel(GaussianPotential(1)).to_pdmp()


@pytest.fixture
def telegraph():
    return TelegraphModel(1.0).to_pdmp()


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
