import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from psdbp import qprocess as qp  # noqa: E402
from psdbp.offspring import OffspringSpec  # noqa: E402


@pytest.fixture(scope="session")
def ricker_spec():
    return OffspringSpec.ricker("two_point_binary", 1.2, 30)


@pytest.fixture(scope="session")
def ricker_qp(ricker_spec):
    return qp.adaptive_kernel(ricker_spec)


@pytest.fixture(scope="session")
def geom_spec():
    return OffspringSpec.constant("geometric", 0.8)


@pytest.fixture(scope="session")
def geom_qp(geom_spec):
    kernel = qp.build_kernel(geom_spec, 400)
    return kernel, qp.spectral(kernel, tol=1e-15)
