"""Tight-binding point-defect laboratory."""

from .errors import (AdmissibilityError, CollisionError, ConvergenceError, DomainError,
                     NumericalFailure, SpectrumError, TBDefectError, ValidationError)
from .hamiltonian import HoppingModel, assemble, assemble_bloch, hamiltonian_derivative
from .lattice import (Configuration, DefectSpec, ReferenceCrystal, SeminormConfig, TorusCell,
                      build_configuration, build_torus, check_admissible, stencil_seminorm,
                      torus_distance, truncate)
from .spectrum import band_structure, defect_state_count, eigendecompose, hausdorff_distance
from .thermo import (INF, Ensemble, fermi_dirac, grand_potential, helmholtz_energy,
                     particle_number, solve_fermi_level)

__version__ = "0.1.0"

__all__ = [
    "AdmissibilityError", "CollisionError", "Configuration", "ConvergenceError", "DefectSpec",
    "DomainError", "Ensemble", "HoppingModel", "INF", "NumericalFailure", "ReferenceCrystal",
    "SeminormConfig", "SpectrumError", "TBDefectError", "TorusCell", "ValidationError",
    "assemble", "assemble_bloch", "band_structure", "build_configuration", "build_torus",
    "check_admissible", "defect_state_count", "eigendecompose", "fermi_dirac",
    "grand_potential", "hamiltonian_derivative", "hausdorff_distance", "helmholtz_energy",
    "particle_number", "solve_fermi_level", "stencil_seminorm", "torus_distance", "truncate",
]
