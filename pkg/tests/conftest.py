import numpy as np
import pytest

from bvmfg.fixed_point import solve_mfg
from bvmfg.measures import Measure
from bvmfg.model import SYSTEMIC_FIXTURE, build_model, make_grid


def systemic_config(**changes):
    cfg = dict(SYSTEMIC_FIXTURE, family="systemic_risk")
    cfg.update(changes)
    return cfg


@pytest.fixture(scope="session")
def systemic_spec():
    return build_model(systemic_config())


@pytest.fixture(scope="session")
def grid121(systemic_spec):
    return make_grid(systemic_spec, 121)


@pytest.fixture(scope="session")
def mu0(grid121):
    return Measure.gaussian(grid121, 0.0, 0.25)


@pytest.fixture(scope="session")
def mfg_solution(systemic_spec, grid121, mu0):
    sol, report = solve_mfg(systemic_spec, mu0, grid121, tol=1e-3)
    return sol, report


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
