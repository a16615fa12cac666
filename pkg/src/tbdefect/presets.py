"""Ready-made crystals, models and defects used by the studies and tests."""

from __future__ import annotations

import numpy as np

from .hamiltonian import HoppingModel
from .lattice import DefectSpec, ReferenceCrystal, build_torus


def two_species_chain(orbitals_per_site=1):
    """1D chain with period 2: species ``A`` at 0 and ``B`` at 1."""
    return ReferenceCrystal([[2.0]], [[0.0], [1.0]], ("A", "B"), orbitals_per_site)


def gapped_chain_model(eps0=1.0, t=0.5, nb=1):
    """Nearest-neighbour ``+-eps0`` model: bands ``+-sqrt(eps0^2 + 2 t^2 (1 + cos k))``."""
    return HoppingModel(t=t, gamma0=1.0, r0=1.0, r_cut=1.6, r_on=1.3, kappa=0.0,
                        onsite={"A": eps0, "B": -eps0}, nb=nb)


def defect_chain_model(nb=1):
    """Longer-range model of the default defect studies.

    Hoppings peak at the neighbour distance (``kappa = gamma0 r0``), which
    makes the chain mechanically stable, and reach third neighbours so that
    a vacancy binds a state inside the gap.
    """
    return HoppingModel(t=0.8, gamma0=4.0, r0=1.0, r_cut=2.6, r_on=2.2, kappa=4.0,
                        onsite={"A": 1.0, "B": -1.0}, nb=nb)


def origin_vacancy(dim=1):
    """Vacancy removing the reference site at the origin."""
    return DefectSpec(np.zeros((1, dim)), (), 1.5)


def chain_torus(n_cells, defect=None, orbitals_per_site=1):
    """Torus of ``n_cells`` chain cells (length ``2 n_cells``)."""
    crystal = two_species_chain(orbitals_per_site)
    return build_torus(crystal, [[2.0 * n_cells]], defect)


# chemical potential of the default defect studies: inside the bulk gap,
# between the vacancy state and the conduction band
DEFAULT_MU = -0.2
