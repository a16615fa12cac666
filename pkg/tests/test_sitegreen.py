import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tbdefect.errors import CollisionError, DomainError
from tbdefect.hamiltonian import HoppingModel, assemble
from tbdefect.lattice import ReferenceCrystal, build_configuration
from tbdefect.presets import (DEFAULT_MU, chain_torus, defect_chain_model, gapped_chain_model,
                              origin_vacancy)
from tbdefect.sitegreen import (build_contours, gbeta_analytic, grand_potential_difference,
                                locality_profile, site_energies_contour, site_energies_eigen,
                                site_energy_contour, site_energy_eigen)
from tbdefect.spectrum import eigendecompose
from tbdefect.thermo import INF, grand_potential, grand_potential_terms

MONO = ReferenceCrystal([[1.0]], [[0.0]], ["A"])


# --- analytic continuation --------------------------------------------------------

def test_gbeta_examples():
    assert gbeta_analytic(-1.5, INF, 0.5) == 2 * (-1.5 - 0.5)
    assert gbeta_analytic(0.5, 4.0, 0.5) == pytest.approx(-2 * math.log(2) / 4.0, rel=1e-15)
    val = gbeta_analytic(-1.0, 10.0, 0.0)
    assert val.real == pytest.approx(-2.00000908, abs=1e-8)
    assert val.real == pytest.approx(-2 - 0.2 * math.log1p(math.exp(-10)), rel=1e-15)


@given(st.one_of(st.floats(0.05, 200), st.just(INF)), st.floats(-5, 5), st.floats(-1, 1))
def test_gbeta_matches_real_terms(beta, lam, mu):
    # zero-temperature grand potential terms reject mu on the spectrum
    if lam == mu or (beta == INF and abs(lam - mu) <= 1e-8 * max(1.0, abs(lam))):
        return
    got = gbeta_analytic(lam, beta, mu)
    assert got.imag == 0.0
    assert got.real == pytest.approx(grand_potential_terms([lam], beta, mu)[0], rel=1e-12, abs=1e-300)


def test_gbeta_domain():
    with pytest.raises(DomainError):
        gbeta_analytic(1j * math.pi, 1.0, 0.0)
    with pytest.raises(DomainError):
        gbeta_analytic(0.3j, INF, 0.0)
    gbeta_analytic(0.5j, 2.0, 0.0)


@given(st.floats(0.5, 50), st.floats(0.1, 3), st.floats(-3, 3))
def test_gbeta_holomorphic_cauchy_riemann(beta, x, y):
    # right of mu, away from the cut
    h = 1e-6
    z = complex(x, y)
    dx = (gbeta_analytic(z + h, beta, 0.0) - gbeta_analytic(z - h, beta, 0.0)) / (2 * h)
    dy = (gbeta_analytic(z + 1j * h, beta, 0.0) - gbeta_analytic(z - 1j * h, beta, 0.0)) / (2j * h)
    assert abs(dx - dy) <= 1e-6 * max(1.0, abs(dx))


# --- contours ---------------------------------------------------------------------

def test_contour_rectangle_for_symmetric_pair():
    lower, upper = build_contours([-1.0, 1.0], 0.0, INF)
    assert (lower.re_min, lower.re_max, lower.half_height) == (-2.0, -0.5, 0.5)
    assert (upper.re_min, upper.re_max, upper.half_height) == (0.5, 2.0, 0.5)
    assert lower.clearance >= 0.5 - 1e-15 and upper.clearance >= 0.5 - 1e-15


def test_contour_weights_integrate_constants():
    # -(1/2 pi i) oint dz = 0 and -(1/2 pi i) oint dz/(z - c) = -1 inside
    lower, _ = build_contours([-1.0, 1.0], 0.0, INF)
    assert abs(lower.weights.sum()) < 1e-14
    err = [abs(np.sum(c.weights / (c.nodes + 1.0)) + 1.0)
           for c in (lower, lower.refined([-1.0, 1.0], 0.0))]
    assert err[0] < 1e-9 and err[1] < 1e-14


def test_contour_collision():
    with pytest.raises(CollisionError):
        build_contours([-1.0, 0.0, 1.0], 0.0, INF)


def test_finite_beta_nodes_avoid_the_cut():
    lam = np.array([-1.0, -0.3, 0.2, 1.0])
    for c in build_contours(lam, 0.0, 1.0):
        assert np.all(np.abs(c.nodes.real) >= 0.1 - 1e-15)
        gbeta_analytic(c.nodes, 1.0, 0.0)


# --- site energies ----------------------------------------------------------------

@pytest.mark.parametrize("lam, beta", [(-0.7, INF), (-0.7, 3.0), (0.4, 3.0)])
def test_single_level_residue(lam, beta):
    m = HoppingModel(t=0.0, onsite={"A": lam})
    h = assemble(build_configuration(MONO, None, [1]), None, m)
    cs = build_contours([lam], 0.0, beta)
    assert site_energy_contour(h, cs, beta, 0.0, 0) == pytest.approx(
        grand_potential_terms([lam], beta, 0.0)[0], abs=1e-10)


def test_zero_temperature_upper_contour_unused():
    m = HoppingModel(t=0.0, onsite={"A": 0.8})
    h = assemble(build_configuration(MONO, None, [1]), None, m)
    assert abs(site_energy_contour(h, build_contours([0.8], 0.0, INF), INF, 0.0, 0)) < 1e-14


@pytest.fixture(scope="module")
def small_vacancy():
    cell = chain_torus(6, origin_vacancy())
    u = 0.03 * np.random.default_rng(5).uniform(-1, 1, (cell.n_sites, 1))
    return assemble(cell, u, defect_chain_model())


@pytest.mark.parametrize("beta", [10.0, INF])
def test_contour_matches_eigen(small_vacancy, beta):
    spec = eigendecompose(small_vacancy)
    eig = site_energies_eigen(spec, beta, DEFAULT_MU).values
    con = site_energies_contour(small_vacancy, build_contours(spec, DEFAULT_MU, beta), beta,
                                DEFAULT_MU).values
    assert np.max(np.abs(eig - con)) < 1e-8


def test_contour_independent_of_rectangle_margin(small_vacancy):
    spec = eigendecompose(small_vacancy)
    a = site_energy_contour(small_vacancy, build_contours(spec, DEFAULT_MU, 10.0), 10.0, DEFAULT_MU, 3)
    b = site_energy_contour(small_vacancy, build_contours(spec, DEFAULT_MU, 10.0, margin=2.5), 10.0,
                            DEFAULT_MU, 3)
    assert a == pytest.approx(b, abs=1e-8)


@pytest.mark.parametrize("beta", [0.5, 10.0, INF])
def test_site_energies_partition_total(small_vacancy, beta):
    spec = eigendecompose(small_vacancy)
    tab = site_energies_eigen(spec, beta, DEFAULT_MU)
    assert tab.total == pytest.approx(grand_potential(spec, beta, DEFAULT_MU), abs=1e-10)
    assert tab.values[2] == site_energy_eigen(spec, beta, DEFAULT_MU, 2)


def test_homogeneous_ring_equal_site_energies():
    spec = eigendecompose(assemble(chain_torus(8), None, gapped_chain_model()))
    g = site_energies_eigen(spec, 5.0, 0.0).values
    assert np.ptp(g[0::2]) < 1e-12 and np.ptp(g[1::2]) < 1e-12


def test_orbital_blocks_sum():
    cell = chain_torus(4, orbitals_per_site=2)
    m = HoppingModel(t=0.8, gamma0=4.0, r0=1.0, r_cut=2.6, r_on=2.2, kappa=4.0,
                     onsite={"A": 1.0, "B": -1.0}, nb=2, coupling=np.eye(2))
    spec = eigendecompose(assemble(cell, None, m))
    tab = site_energies_eigen(spec, 3.0, 0.1, nb=2)
    assert tab.values.shape == (cell.n_sites,)
    assert tab.total == pytest.approx(grand_potential(spec, 3.0, 0.1), abs=1e-12)


# --- renormalised grand potential -----------------------------------------------

def test_grand_potential_difference_zero():
    cell = chain_torus(6, origin_vacancy())
    assert grand_potential_difference(cell, None, defect_chain_model(), 10.0, DEFAULT_MU) == 0.0


def test_grand_potential_difference_telescopes(small_vacancy):
    cell, m = small_vacancy.host, defect_chain_model()
    u = 0.03 * np.random.default_rng(5).uniform(-1, 1, (cell.n_sites, 1))
    want = (grand_potential(eigendecompose(assemble(cell, u, m)), 10.0, DEFAULT_MU)
            - grand_potential(eigendecompose(assemble(cell, None, m)), 10.0, DEFAULT_MU))
    assert grand_potential_difference(cell, u, m, 10.0, DEFAULT_MU) == pytest.approx(want, abs=1e-10)


def test_grand_potential_difference_size_independent():
    m = defect_chain_model()
    vals = []
    for n in (32, 64):
        cell = chain_torus(n, origin_vacancy())
        x = cell.reference_distances(0)
        u = np.zeros((cell.n_sites, 1))
        near = x < 4.5
        u[near, 0] = 0.02 * np.sign(cell.positions[near, 0]) * np.exp(-x[near])
        vals.append(grand_potential_difference(cell, u, m, INF, DEFAULT_MU))
    assert abs(vals[0] - vals[1]) < 1e-4


# --- locality ------------------------------------------------------------------

def test_diagonal_hamiltonian_resolvent_is_diagonal():
    h = assemble(chain_torus(5), None, HoppingModel(t=0.0, onsite={"A": 1.0, "B": -1.0}))
    prof = locality_profile(h, 0.3 + 0.1j, 4)
    assert prof.magnitudes[4] > 0
    assert np.all(np.delete(prof.magnitudes, 4) == 0.0)


def test_resolvent_decay_rates():
    h = assemble(chain_torus(24), None, gapped_chain_model())
    rates = [locality_profile(h, z, 0).gamma_fit for z in (0.8, 0.5, 0.0)]
    assert rates[0] > 0
    assert all(a <= b for a, b in zip(rates, rates[1:]))


def test_zero_temperature_site_energy_limit(relaxed_vacancy, vacancy_cell, model):
    spec = eigendecompose(assemble(vacancy_cell, relaxed_vacancy.displacement, model))
    d = float(np.min(np.abs(spec.eigenvalues - DEFAULT_MU)))
    g_inf = site_energies_eigen(spec, INF, DEFAULT_MU).values
    betas = np.array([10.0, 20.0, 40.0])
    for site in (0, 1, 5, 15):
        err = np.array([abs(site_energies_eigen(spec, b, DEFAULT_MU).values[site] - g_inf[site])
                        for b in betas])
        rate = -np.polyfit(betas, np.log(err), 1)[0]
        assert rate >= 0.9 * d / 6
