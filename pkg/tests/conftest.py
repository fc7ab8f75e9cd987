import numpy as np
import pytest

from orlfc.config import default_network_params, default_sim_settings
from orlfc.exo import build_scenario1_exo


@pytest.fixture(scope="session")
def params():
    return default_network_params()


@pytest.fixture(scope="session")
def settings():
    return default_sim_settings()


@pytest.fixture(scope="session")
def scenario1_exo(params, settings):
    return build_scenario1_exo(params, settings)


@pytest.fixture(scope="session")
def mean_injection(scenario1_exo):
    return scenario1_exo.output(scenario1_exo.initial_state())


@pytest.fixture(scope="session")
def steady0(params, mean_injection):
    from orlfc.network import steady_state_solve
    return steady_state_solve(mean_injection, params)


@pytest.fixture(scope="session")
def torus_domain(scenario1_exo):
    from orlfc.approx import PenaltyDomain
    return PenaltyDomain.from_exo(scenario1_exo, order=5, nodes_per_phase=32)


@pytest.fixture(scope="session")
def approx_solution_s1(torus_domain, params, scenario1_exo):
    from orlfc.approx import algorithm1_run
    return algorithm1_run(torus_domain, params, scenario1_exo, eps_bar=1e-7)


def rng_for(name, salt=0):
    return np.random.default_rng(abs(hash((name, salt))) % (2 ** 31))
