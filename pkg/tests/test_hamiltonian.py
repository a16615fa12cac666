import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from tbdefect.errors import AdmissibilityError, ValidationError
from tbdefect.hamiltonian import (HoppingModel, assemble, assemble_bloch, eval_hopping,
                                  hamiltonian_derivative, septic_taper, torus_wavevectors)
from tbdefect.lattice import ReferenceCrystal, build_configuration, build_torus, torus_distance
from tbdefect.presets import chain_torus, defect_chain_model, origin_vacancy, two_species_chain
from tbdefect.spectrum import eigendecompose, torus_reference_spectrum

MONO = ReferenceCrystal([[1.0]], [[0.0]], ["A"])
NN = HoppingModel(t=1.0, r0=1.0, r_cut=1.5, r_on=1.2, onsite={"A": 0.0})


def test_taper_is_c3():
    x = np.array([0.0, 1.0])
    v, dv = septic_taper(x)
    assert v.tolist() == [1.0, 0.0] and dv.tolist() == [0.0, 0.0]
    # second and third derivatives vanish at both ends: one-sided jumps make
    # the central differences O(h), so they must shrink with h
    for x0 in (0.0, 1.0):
        for h in (1e-2, 1e-3):
            pts = x0 + h * np.arange(-3, 4)
            vals = septic_taper(pts)[0]
            d2 = (vals[4] - 2 * vals[3] + vals[2]) / h ** 2
            d3 = (vals[5] - 2 * vals[4] + 2 * vals[2] - vals[1]) / (2 * h ** 3)
            assert abs(d2) < 50 * h ** 2 and abs(d3) < 300 * h


def test_hopping_normalisation_point():
    m = HoppingModel(t=0.7, r0=1.0, r_cut=1.6, onsite={"A": 0.0})
    val, _ = eval_hopping(m, ("A", "A"), (0, 0), [1.0])
    assert val == pytest.approx(-0.7, rel=1e-15)


def test_hopping_beyond_cutoff_is_zero():
    m = HoppingModel(onsite={"A": 0.0})
    val, grad = eval_hopping(m, ("A", "A"), (0, 0), [m.r_cut + 0.01, 0.0])
    assert val == 0.0 and np.all(grad == 0.0)


@given(arrays(float, 2, elements=st.floats(-2.5, 2.5)))
def test_hopping_gradient_matches_fd(xi):
    m = defect_chain_model()
    r = np.linalg.norm(xi)
    if r < 0.3 or abs(r - m.r_cut) < 1e-3:
        return
    _, grad = eval_hopping(m, ("A", "B"), (0, 0), xi)
    h = 1e-6
    fd = np.array([(eval_hopping(m, ("A", "B"), (0, 0), xi + h * e)[0]
                    - eval_hopping(m, ("A", "B"), (0, 0), xi - h * e)[0]) / (2 * h) for e in np.eye(2)])
    assert np.allclose(grad, fd, rtol=1e-7, atol=1e-9)


def test_decay_envelope_bound():
    m = defect_chain_model()
    h0, gamma = m.decay_envelope()
    r = np.linspace(0.01, 3.0, 500)
    h, dh = m.radial(r)
    bound = h0 * np.exp(-gamma * r)
    assert np.all(np.abs(h) <= bound * (1 + 1e-9)) and np.all(np.abs(dh) <= bound * (1 + 1e-9))


def test_model_round_trip():
    m = defect_chain_model(nb=2)
    again = HoppingModel.from_dict(m.to_dict())
    assert again.to_dict() == m.to_dict()


def test_model_rejects_unknown_family():
    with pytest.raises(ValidationError):
        HoppingModel.from_dict({"family": "slater-koster", "onsite": {}})


def test_four_ring_circulant():
    h = assemble(build_torus(MONO, [[4.0]]), None, NN)
    assert h.matrix[0].tolist() == [0.0, -1.0, 0.0, -1.0]


def test_two_ring_image_sum():
    m = HoppingModel(t=-1.0, gamma0=1.0, r0=0.0, r_cut=40.0, r_on=39.0, onsite={"A": 0.0})
    h = assemble(build_torus(MONO, [[2.0]]), None, m)
    want = 2 * math.exp(-1) / (1 - math.exp(-2))
    assert h.matrix[0, 1] == pytest.approx(want, rel=1e-12)


@given(st.floats(-3, 3))
def test_translation_gives_identical_matrix(c):
    cell = chain_torus(6, origin_vacancy())
    m = defect_chain_model()
    u = np.full((cell.n_sites, 1), c)
    assert np.array_equal(assemble(cell, u, m).matrix, assemble(cell, None, m).matrix)


def test_matrix_exactly_symmetric_and_decays(rng):
    cell = chain_torus(10, origin_vacancy())
    m = defect_chain_model()
    u = 0.05 * rng.uniform(-1, 1, (cell.n_sites, 1))
    h = assemble(cell, u, m).matrix
    assert np.array_equal(h, h.T)
    h0, gamma = m.decay_envelope(gamma=m.gamma0 / 2)
    for i in range(cell.n_sites):
        for j in range(i + 1, cell.n_sites):
            r = torus_distance(cell, u, i, j)[0]
            assert abs(h[i, j]) <= h0 * math.exp(-gamma * r) * (1 + 1e-9)


def test_inadmissible_displacement_rejected():
    cell = chain_torus(4)
    u = np.zeros((8, 1))
    u[1] = -0.9
    with pytest.raises(AdmissibilityError):
        assemble(cell, u, defect_chain_model())


def test_isometry_invariance_of_spectrum(rng):
    # reflection x -> -x maps the vacancy torus onto itself
    cell = chain_torus(8, origin_vacancy())
    m = defect_chain_model()
    u = 0.05 * rng.uniform(-1, 1, (cell.n_sites, 1))
    x = cell.positions[:, 0]
    period = cell.period_matrix[0, 0]
    mirrored = np.mod(-x + period / 2, period) - period / 2
    perm = np.array([int(np.argmin(np.abs(x - y))) for y in mirrored])
    v = np.empty_like(u)
    v[perm] = -u
    a = eigendecompose(assemble(cell, u, m)).eigenvalues
    b = eigendecompose(assemble(cell, v, m)).eigenvalues
    assert np.max(np.abs(a - b)) < 1e-10


def test_bloch_nearest_neighbour_cosine():
    for xi in (0.0, 0.4, 2.1):
        hx = assemble_bloch(MONO, NN, [xi])
        assert hx.shape == (1, 1)
        assert hx[0, 0].real == pytest.approx(-2 * math.cos(xi), abs=1e-15)


def test_bloch_gamma_point_column_sum():
    cr, m = two_species_chain(), defect_chain_model()
    big = assemble(build_torus(cr, [[40.0]]), None, m).matrix
    h0 = assemble_bloch(cr, m, [0.0])
    # rows of the sites of one cell, summed over the periodic copies of each basis site
    cols = [np.sum(big[i, j::2]) for i in (0, 1) for j in (0, 1)]
    assert np.allclose(h0.real.ravel(), cols, atol=1e-14)


def test_bloch_conjugate_symmetry():
    cr, m = two_species_chain(), defect_chain_model()
    a = assemble_bloch(cr, m, [0.7])
    assert np.allclose(assemble_bloch(cr, m, [-0.7]), a.conj(), atol=1e-15)
    assert np.allclose(a, a.conj().T, atol=1e-15)


def test_torus_spectrum_equals_bloch_union():
    cr, m = two_species_chain(), defect_chain_model()
    for period in (12.0, 16.0):
        cell = build_torus(cr, [[period]])
        lam = eigendecompose(assemble(cell, None, m)).eigenvalues
        ref = torus_reference_spectrum(cr, m, [[period]])
        assert np.max(np.abs(lam - ref)) < 1e-10


def test_torus_wavevectors_count():
    sq = ReferenceCrystal(np.eye(2), [[0.0, 0.0]], ["A"])
    assert torus_wavevectors(sq, 3 * np.eye(2)).shape == (9, 2)


def test_derivative_zero_without_hopping():
    m = HoppingModel(t=0.0, onsite={"A": 1.0, "B": -1.0})
    cell = chain_torus(4)
    blk = hamiltonian_derivative(cell, None, m, 2, 0)
    assert np.all(blk.to_dense() == 0.0)


@pytest.mark.parametrize("nb", [1, 2])
def test_derivative_matches_fd(rng, nb):
    cell = chain_torus(5, origin_vacancy(), orbitals_per_site=nb)
    coupling = np.array([[1.0, 0.3], [0.3, 0.5]])[:nb, :nb]
    m = HoppingModel(t=0.8, gamma0=4.0, r0=1.0, r_cut=2.6, r_on=2.2, kappa=4.0,
                     onsite={"A": 1.0, "B": -1.0}, nb=nb, coupling=coupling)
    u = 0.05 * rng.uniform(-1, 1, (cell.n_sites, 1))
    h = 1e-6
    for site in (0, 4, 8):
        dense = hamiltonian_derivative(cell, u, m, site, 0).to_dense()
        assert np.array_equal(dense, dense.T)
        up, dn = u.copy(), u.copy()
        up[site] += h
        dn[site] -= h
        fd = (assemble(cell, up, m).matrix - assemble(cell, dn, m).matrix) / (2 * h)
        scale = np.max(np.abs(dense))
        assert np.max(np.abs(dense - fd)) <= 1e-6 * scale


def test_derivative_sums_to_zero_along_translation(rng):
    cell = chain_torus(6, origin_vacancy())
    m = defect_chain_model()
    u = 0.05 * rng.uniform(-1, 1, (cell.n_sites, 1))
    total = sum(hamiltonian_derivative(cell, u, m, s, 0).to_dense() for s in range(cell.n_sites))
    assert np.max(np.abs(total)) < 1e-12


def test_cluster_assembly_matches_pairwise():
    cl = build_configuration(two_species_chain(), None, [3])
    m = defect_chain_model()
    h = assemble(cl, None, m).matrix
    for i in range(cl.n_sites):
        for j in range(cl.n_sites):
            r = abs(cl.positions[i, 0] - cl.positions[j, 0])
            want = m.onsite_energies(cl.species[i])[0] if i == j else m.radial(r)[0]
            assert h[i, j] == pytest.approx(float(want), abs=1e-15)
