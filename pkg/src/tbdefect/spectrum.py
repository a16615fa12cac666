"""Eigendecomposition, band structures, gap detection and spectral-set comparisons."""

from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import SpectrumError, ValidationError
from .hamiltonian import Hamiltonian, bloch_matrices, torus_wavevectors


@dataclass(frozen=True, eq=False)
class SpectralData:
    """Ascending eigenvalues with orthonormal eigenvector columns."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    fingerprint: str

    def __len__(self):
        return len(self.eigenvalues)


def eigenvalues_of(spec):
    """Eigenvalue array of ``SpectralData`` or of a plain sequence."""
    if isinstance(spec, SpectralData):
        return spec.eigenvalues
    lam = np.sort(np.asarray(spec, dtype=float).ravel())
    if lam.size == 0:
        raise ValidationError("spectrum is empty")
    return lam


def eigendecompose(h):
    """Full symmetric eigendecomposition with self-checks.

    Each eigenvector is normalised so that its first component of magnitude
    above ``1e-10`` is positive.

    Raises
    ------
    SpectrumError
        If LAPACK fails or the residual/orthonormality checks fail.
    """
    mat = h.matrix if isinstance(h, Hamiltonian) else np.asarray(h, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValidationError("matrix must be square")
    if not np.all(np.isfinite(mat)):
        raise ValidationError("matrix has non-finite entries")
    if not np.array_equal(mat, mat.T):
        raise ValidationError("matrix is not symmetric")
    try:
        lam, psi = scipy.linalg.eigh(mat)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise SpectrumError(f"eigensolver failed: {exc}") from exc
    first = np.argmax(np.abs(psi) > 1e-10, axis=0)
    signs = np.sign(psi[first, np.arange(psi.shape[1])])
    signs[signs == 0] = 1.0
    psi = psi * signs
    scale = max(np.linalg.norm(mat, 2), 1e-300) if mat.size else 1.0
    if mat.size:
        resid = np.linalg.norm(mat @ psi - psi * lam, axis=0).max()
        if resid > 1e-9 * scale:
            raise SpectrumError(f"eigen residual {resid:.3e} exceeds tolerance")
        ortho = np.abs(psi.T @ psi - np.eye(len(lam))).max()
        if ortho > 1e-10:
            raise SpectrumError(f"eigenvectors not orthonormal ({ortho:.3e})")
    lam.setflags(write=False)
    psi.setflags(write=False)
    fp = hashlib.sha256(np.ascontiguousarray(mat).tobytes()).hexdigest()[:16]
    return SpectralData(lam, psi, fp)


@dataclass(frozen=True)
class Gap:
    lower: float
    upper: float

    @property
    def midpoint(self):
        return 0.5 * (self.lower + self.upper)

    @property
    def width(self):
        return self.upper - self.lower


@dataclass(frozen=True, eq=False)
class BandStructure:
    """Bands on a uniform grid of the Brillouin zone.

    Attributes
    ----------
    k_grid : ndarray, shape (nk, d)
        Cartesian wave vectors.
    bands : ndarray, shape (nk, n_bands)
    intervals : ndarray, shape (m, 2)
        Disjoint band intervals (refined extrema, overlapping bands merged).
    gap : Gap or None
        Largest gap that passes the sampling threshold.
    """

    k_grid: np.ndarray
    bands: np.ndarray
    intervals: np.ndarray
    gap: Gap | None

    def gaps(self):
        """All gaps between consecutive band intervals."""
        return [Gap(float(a), float(b)) for a, b in zip(self.intervals[:-1, 1], self.intervals[1:, 0])]

    def gap_containing(self, energy):
        for g in self.gaps():
            if g.lower < energy < g.upper:
                return g
        return None

    def distance(self, energies):
        """Distance of each energy to the union of band intervals."""
        e = np.atleast_1d(np.asarray(energies, dtype=float))
        lo, hi = self.intervals[:, 0], self.intervals[:, 1]
        d = np.maximum(lo[None, :] - e[:, None], e[:, None] - hi[None, :])
        return np.maximum(d, 0.0).min(axis=1)


def _band_values(crystal, model, fracs, band):
    xis = 2.0 * np.pi * np.atleast_2d(fracs) @ np.linalg.inv(crystal.cell_matrix)
    return np.linalg.eigvalsh(bloch_matrices(crystal, model, xis))[:, band]


def _refine_extremum(crystal, model, band, frac0, n_k, sign, tol=1e-6):
    """Refine ``sign * max`` of one band by local grid doubling around ``frac0``."""
    d = crystal.dim
    best_q = np.array(frac0, dtype=float)
    best = sign * _band_values(crystal, model, best_q, band)[0]
    h = 1.0 / n_k
    offsets = np.array(list(itertools.product((-1.0, -0.5, 0.0, 0.5, 1.0), repeat=d)))
    while h > 1e-12:
        cand = best_q + h * offsets
        vals = sign * _band_values(crystal, model, cand, band)
        k = int(np.argmax(vals))
        moved = vals[k] - best
        if vals[k] > best:
            best, best_q = vals[k], cand[k]
        h *= 0.5
        if moved < tol and h < 1.0 / (8 * n_k):
            break
    return sign * best


def band_structure(crystal, model, n_k, *, require_gap=False, refine_tol=1e-6):
    """Sample bands on a uniform ``n_k^d`` grid and detect the largest gap.

    A gap is the largest separation in the sorted union of band samples that
    exceeds ten times the largest jump of any band between neighbouring grid
    points.  Band extrema are refined by local grid doubling.

    Raises
    ------
    ValidationError
        If ``n_k < 8`` or ``require_gap`` and no gap is found.
    """
    if n_k < 8:
        raise ValidationError("n_k must be at least 8")
    d = crystal.dim
    grid = np.array(list(itertools.product(range(n_k), repeat=d)), dtype=float) / n_k
    xis = 2.0 * np.pi * grid @ np.linalg.inv(crystal.cell_matrix)
    bands = np.linalg.eigvalsh(bloch_matrices(crystal, model, xis))
    nbands = bands.shape[1]

    shaped = bands.reshape((n_k,) * d + (nbands,))
    jump = 0.0
    for ax in range(d):
        jump = max(jump, float(np.max(np.abs(np.roll(shaped, 1, axis=ax) - shaped))))

    lo = np.empty(nbands)
    hi = np.empty(nbands)
    for n in range(nbands):
        kmin, kmax = np.argmin(bands[:, n]), np.argmax(bands[:, n])
        lo[n] = _refine_extremum(crystal, model, n, grid[kmin], n_k, -1.0, refine_tol)
        hi[n] = _refine_extremum(crystal, model, n, grid[kmax], n_k, 1.0, refine_tol)
    order = np.argsort(lo)
    merged = []
    for a, b in zip(lo[order], hi[order]):
        if merged and a <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], b)
        else:
            merged.append([a, b])
    intervals = np.array(merged)

    gap = None
    vals = np.sort(bands.ravel())
    if len(vals) > 1:
        steps = np.diff(vals)
        k = int(np.argmax(steps))
        if steps[k] > 10.0 * jump and len(intervals) > 1:
            widths = intervals[1:, 0] - intervals[:-1, 1]
            g = int(np.argmax(widths))
            gap = Gap(float(intervals[g, 1]), float(intervals[g + 1, 0]))
    if require_gap and gap is None:
        raise ValidationError("no spectral gap found in the reference band structure")
    return BandStructure(xis, bands, intervals, gap)


def torus_reference_spectrum(crystal, model, period_matrix):
    """Union of Bloch spectra over the wave vectors compatible with a torus."""
    xis = torus_wavevectors(crystal, period_matrix)
    return np.sort(np.linalg.eigvalsh(bloch_matrices(crystal, model, xis)).ravel())


def hausdorff_distance(a, b):
    """Hausdorff distance between two finite sets of reals."""
    a = np.sort(np.asarray(a, dtype=float).ravel())
    b = np.sort(np.asarray(b, dtype=float).ravel())
    if a.size == 0 or b.size == 0:
        raise ValidationError("hausdorff_distance needs nonempty sets")

    def directed(x, y):
        idx = np.clip(np.searchsorted(y, x), 1, len(y) - 1) if len(y) > 1 else np.zeros(len(x), int)
        d = np.abs(x - y[idx])
        if len(y) > 1:
            d = np.minimum(d, np.abs(x - y[idx - 1]))
        return d.max()

    return float(max(directed(a, b), directed(b, a)))


def defect_state_count(spec, reference_bands, delta):
    """Eigenvalues farther than ``delta`` from the reference band intervals.

    Returns
    -------
    count : int
    values : ndarray
    """
    if not delta > 0:
        raise ValidationError("delta must be positive")
    lam = eigenvalues_of(spec)
    far = lam[reference_bands.distance(lam) > delta]
    return int(len(far)), far
