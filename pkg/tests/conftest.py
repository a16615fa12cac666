import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tbdefect.presets import (DEFAULT_MU, chain_torus, defect_chain_model, gapped_chain_model,
                              origin_vacancy, two_species_chain)
from tbdefect.relax import RelaxProblem, relax_geometry
from tbdefect.thermo import INF, Ensemble

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def chain():
    return two_species_chain()


@pytest.fixture(scope="session")
def gapped():
    return gapped_chain_model()


@pytest.fixture(scope="session")
def model():
    return defect_chain_model()


@pytest.fixture(scope="session")
def vacancy_cell():
    return chain_torus(16, origin_vacancy())


@pytest.fixture(scope="session")
def relaxed_vacancy(vacancy_cell, model):
    """Zero-temperature grand-canonical minimiser on the 16-cell vacancy torus."""
    prob = RelaxProblem(vacancy_cell, model, Ensemble.grand_canonical(DEFAULT_MU, INF),
                        tolerance=1e-11)
    return relax_geometry(prob)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
