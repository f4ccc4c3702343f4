import numpy as np
import pytest

from contacthj.geometry import GridFunction, TorusSpec
from contacthj.hamiltonian import build_model


@pytest.fixture(scope="session")
def e1():
    return build_model("E1")


@pytest.fixture(scope="session")
def e2():
    return build_model("E2")


@pytest.fixture(scope="session")
def spec256():
    return TorusSpec(1, 1.0, 256)


@pytest.fixture(scope="session")
def sine_phi(spec256):
    return GridFunction.sample(spec256, lambda X: -0.3 + 0.05 * np.sin(2 * np.pi * X[:, 0]))
