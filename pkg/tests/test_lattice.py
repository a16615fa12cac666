import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from tbdefect.errors import ValidationError
from tbdefect.lattice import (DefectSpec, ReferenceCrystal, SeminormConfig, build_configuration,
                              build_torus, check_admissible, configuration_from_dict,
                              configuration_to_dict, gram_matrix, stencil_seminorm, torus_distance,
                              truncate)

MONO = ReferenceCrystal([[1.0]], [[0.0]], ["A"])
SQUARE = ReferenceCrystal(np.eye(2), [[0.0, 0.0]], ["A"])


def ring(n):
    return build_torus(MONO, [[float(n)]])


# --- construction -----------------------------------------------------------

def test_cluster_identity_tiling():
    c = build_configuration(MONO, None, [4])
    assert c.positions.ravel().tolist() == [0.0, 1.0, 2.0, 3.0]
    assert c.kind == "cluster"


def test_cluster_vacancy_removes_site():
    c = build_configuration(MONO, DefectSpec([[1.0]], (), 1.5), [4])
    assert c.positions.ravel().tolist() == [0.0, 2.0, 3.0]


def test_two_site_basis_cluster():
    cr = ReferenceCrystal([[1.0]], [[0.0], [0.5]], ["A", "B"])
    c = build_configuration(cr, None, [2])
    assert c.positions.ravel().tolist() == [0.0, 0.5, 1.0, 1.5]
    assert list(c.species) == ["A", "B", "A", "B"]


def test_interstitial_appended_last():
    c = build_configuration(MONO, DefectSpec(np.zeros((0, 1)), [([0.5], "X")], 1.0), [3],
                            centered=True)
    assert c.positions.ravel().tolist() == [-1.0, 0.0, 1.0, 0.5]
    assert c.species[-1] == "X"
    assert c.added_mask.tolist() == [False, False, False, True]


def test_overlapping_interstitial_rejected():
    with pytest.raises(ValidationError):
        build_configuration(MONO, DefectSpec(np.zeros((0, 1)), [([1.0], "X")], 1.5), [3])


def test_defect_outside_radius_rejected():
    with pytest.raises(ValidationError):
        build_configuration(MONO, DefectSpec([[2.0]], (), 1.5), [4])


def test_ring_and_square_torus_sizes():
    assert ring(8).n_sites == 8
    assert build_torus(SQUARE, 4 * np.eye(2)).n_sites == 16


def test_torus_domain_radius():
    assert ring(8).domain_radius == pytest.approx(4.0)
    assert build_torus(SQUARE, 4 * np.eye(2)).domain_radius == pytest.approx(2.0)


def test_non_lattice_period_rejected():
    with pytest.raises(ValidationError):
        ring(8.5)


def test_singular_period_rejected():
    with pytest.raises(ValidationError):
        build_torus(SQUARE, [[2.0, 4.0], [1.0, 2.0]])


def test_defect_touching_boundary_rejected():
    with pytest.raises(ValidationError):
        build_torus(MONO, [[4.0]], DefectSpec([[-2.0]], (), 2.5))


def test_lattice_coordinates_round_trip():
    cr = ReferenceCrystal([[2.0, 0.5], [0.0, 1.5]], [[0.0, 0.0], [0.7, 0.3]], ["A", "B"])
    for g in [(0, 0), (-3, 2), (5, -1)]:
        for b in range(2):
            assert cr.lattice_coordinates(cr.position(g, b)) == (g, b)
    assert cr.lattice_coordinates(np.array([0.1, 0.1])) is None


def test_serialization_round_trip(vacancy_cell):
    doc = configuration_to_dict(vacancy_cell)
    again = configuration_from_dict(doc)
    assert np.array_equal(again.positions, vacancy_cell.positions)
    assert again.species == vacancy_cell.species


# --- torus metric -------------------------------------------------------------

def test_ring_minimal_image():
    r, vec, alpha = torus_distance(ring(8), None, 0, 7)
    assert r == pytest.approx(1.0)
    assert abs(alpha[0]) == 1


def test_ring_minimal_image_with_displacement():
    u = np.zeros((8, 1))
    u[7] = 0.25
    r, _, _ = torus_distance(ring(8), u, 0, 7)
    assert r == pytest.approx(0.75)


def test_self_distance_zero():
    assert torus_distance(ring(8), None, 3, 3)[0] == 0.0


@given(arrays(float, (12, 1), elements=st.floats(-0.3, 0.3)),
       st.integers(0, 11), st.integers(0, 11), st.integers(0, 11))
def test_torus_distance_metric(u, a, b, c):
    cell = ring(12)
    dab = torus_distance(cell, u, a, b)[0]
    assert dab == pytest.approx(torus_distance(cell, u, b, a)[0], abs=1e-12)
    assert dab <= torus_distance(cell, u, a, c)[0] + torus_distance(cell, u, c, b)[0] + 1e-12


def test_torus_distance_euclidean_when_alpha_zero():
    cell = build_torus(SQUARE, 6 * np.eye(2))
    r, vec, alpha = torus_distance(cell, None, 14, 15)
    assert np.all(alpha == 0)
    assert r == pytest.approx(np.linalg.norm(cell.positions[14] - cell.positions[15]))


# --- seminorm -----------------------------------------------------------------

def test_seminorm_two_site_cluster():
    c = build_configuration(MONO, None, [2])
    assert stencil_seminorm(c, [[0.0], [1.0]]) == pytest.approx(math.sqrt(2 * math.exp(-2)), rel=1e-14)


@given(arrays(float, (10, 1), elements=st.floats(-1, 1)), st.floats(-5, 5))
def test_seminorm_constant_and_homogeneity(u, c):
    cell = ring(10)
    assert stencil_seminorm(cell, np.full((10, 1), c)) == 0.0
    s = stencil_seminorm(cell, u)
    assert stencil_seminorm(cell, 2 * u) == pytest.approx(2 * s, rel=1e-12, abs=1e-300)
    g = gram_matrix(cell)
    assert u.ravel() @ g @ u.ravel() == pytest.approx(s ** 2, rel=1e-10, abs=1e-14)


@given(arrays(float, (12, 1), elements=st.floats(-1, 1)))
def test_seminorm_equivalence_for_doubled_weight(u):
    # |D_rho u|^2 <= |rho| sum of squared unit steps along the path, hence
    # ||Du||_1^2 <= e^4 sum_n n^2 e^{-2n} ||Du||_2^2 on the unit ring
    cell = ring(12)
    s1 = stencil_seminorm(cell, u, SeminormConfig(1.0))
    s2 = stencil_seminorm(cell, u, SeminormConfig(2.0))
    k2 = math.exp(4) * sum(n * n * math.exp(-2 * n) for n in range(1, 200))
    assert s2 <= s1 * (1 + 1e-12)
    assert s1 <= math.sqrt(k2) * s2 * (1 + 1e-12) + 1e-300


def test_cutoff_drops_negligible_tail(chain):
    cfg = SeminormConfig()
    r = cfg.cutoff(chain)
    tail = sum(2 * math.exp(-2 * n) for n in range(int(r) + 1, 400))
    assert tail < 1e-12 * math.exp(-2 * chain.nearest_neighbour_distance())


# --- admissibility -------------------------------------------------------------

def test_admissible_at_zero(vacancy_cell):
    assert check_admissible(vacancy_cell, None, 1.0).admissible


def test_admissibility_violation_reports_ratio():
    c = build_configuration(MONO, None, [2])
    rep = check_admissible(c, [[0.0], [-0.8]], 0.5)
    assert not rep.admissible
    assert rep.worst[3] == pytest.approx(0.2)


@given(st.floats(-10, 10))
def test_translation_admissible(c):
    cell = ring(8)
    assert check_admissible(cell, np.full((8, 1), c), 1.0).admissible


def test_admissibility_constant_range():
    with pytest.raises(ValidationError):
        check_admissible(ring(4), None, 0.0)


# --- truncation ----------------------------------------------------------------

@pytest.fixture(scope="module")
def square_cluster():
    return build_configuration(SQUARE, None, [21, 21], centered=True)


def test_truncate_zero(square_cluster):
    assert np.all(truncate(square_cluster, None, 8.0) == 0.0)


def test_truncate_preserves_inner_support(square_cluster):
    r = np.linalg.norm(square_cluster.positions, axis=1)
    u = np.where((r < 3.9)[:, None], np.sin(square_cluster.positions), 0.0)
    assert np.array_equal(truncate(square_cluster, u, 8.0), u)


def test_truncate_keeps_inner_stencils(square_cluster):
    x = square_cluster.positions
    r = np.linalg.norm(x, axis=1)
    u = np.zeros_like(x)
    u[:, 0] = (1.0 + r) ** -2
    t = truncate(square_cluster, u, 8.0)
    inner = r < 4.0
    du = u[inner][:, None, :] - u[inner][None, :, :]
    dt = t[inner][:, None, :] - t[inner][None, :, :]
    assert np.array_equal(du, dt)
    assert np.all(t[r >= 8.0] == 0.0)


def test_truncate_idempotent_off_annulus(square_cluster):
    rng = np.random.default_rng(3)
    u = rng.normal(size=square_cluster.positions.shape)
    t1 = truncate(square_cluster, u, 8.0)
    t2 = truncate(square_cluster, t1, 8.0)
    r = np.linalg.norm(square_cluster.positions, axis=1)
    outside = (r <= 4.0) | (r >= 8.0)
    assert np.array_equal(t1[outside], t2[outside])


def test_truncate_radius_too_small(square_cluster):
    with pytest.raises(ValidationError):
        truncate(square_cluster, None, 1.5)
