import pytest

from pvmppt.harness import build_reference_model
from pvmppt.pvmodel import ND195R1S, calibrate_module


@pytest.fixture(scope="session")
def nd_module():
    return calibrate_module(ND195R1S)


@pytest.fixture(scope="session")
def ref_3x5(nd_module):
    return build_reference_model(nd_module, 5, 3)
