import numpy as np
import pytest

from deepempc.config import build_mpc, load_config
from deepempc.dynamics import DiscreteModel, FurutaParams

# frozen copy of the packaged physics so oracle values do not drift with the defaults
PHYSICS = dict(m1=0.257, m2=0.127, L1=0.2159, L2=0.337, l1=0.10795, l2=0.156, I1=0.000998,
               I2=0.0012, c1=0.0024, c2=0.0024, Kg=70.0, Kt=0.00768, Kv=0.00768, Rm=2.6,
               eta_m=0.69, eta_g=0.90, g=9.81)


@pytest.fixture(scope="session")
def params():
    return FurutaParams.from_dict(PHYSICS)


@pytest.fixture(scope="session")
def model(params):
    return DiscreteModel(params, 0.01)


@pytest.fixture(scope="session")
def cfg():
    c = load_config()
    c["physics"] = dict(PHYSICS)
    return c


@pytest.fixture(scope="session")
def mpc_config(cfg, model):
    return build_mpc(cfg, model)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one summary line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
