"""Reference multilattices, point defects, torus cells and displacement geometry.

Positions are dimensionless.  A crystal is ``{A @ gamma + p_b}`` for integer
``gamma`` and basis offsets ``p_b``; the columns of ``A`` are the lattice
vectors.  Displacements are plain ``(n_sites, d)`` arrays ordered like the
sites of their host.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import ClassVar, NamedTuple

import numpy as np
from scipy.special import gamma as gamma_fn
from scipy.special import gammaincc

from .errors import ValidationError

POSITION_TOL = 1e-9


def _readonly(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


def _as_matrix(m, d=None):
    m = np.atleast_2d(np.asarray(m, dtype=float))
    if m.shape[0] != m.shape[1]:
        raise ValidationError(f"matrix must be square, got shape {m.shape}")
    if d is not None and m.shape[0] != d:
        raise ValidationError(f"matrix must be {d}x{d}, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValidationError("matrix has non-finite entries")
    return m


@dataclass(frozen=True, eq=False)
class ReferenceCrystal:
    """Multilattice ``A Z^d + {p_b}``.

    Parameters
    ----------
    cell_matrix : array_like, shape (d, d)
        Lattice vectors as columns.
    offsets : array_like, shape (n_basis, d)
        Basis offsets; fractional coordinates must lie in ``[0, 1)``.
    species : sequence of str
        Species tag per basis site.
    orbitals_per_site : int
        Number of orbitals ``N_b`` carried by every site.
    """

    cell_matrix: np.ndarray
    offsets: np.ndarray
    species: tuple
    orbitals_per_site: int = 1

    def __post_init__(self):
        a = _as_matrix(self.cell_matrix)
        d = a.shape[0]
        if d not in (1, 2, 3):
            raise ValidationError(f"dimension must be 1, 2 or 3, got {d}")
        if abs(np.linalg.det(a)) < 1e-12:
            raise ValidationError("cell matrix is singular")
        p = np.asarray(self.offsets, dtype=float).reshape(-1, d)
        species = tuple(str(s) for s in self.species)
        if len(species) != len(p) or len(p) == 0:
            raise ValidationError("need one species tag per basis offset (and at least one)")
        frac = np.linalg.solve(a, p.T).T
        if np.any(frac < -POSITION_TOL) or np.any(frac >= 1 - POSITION_TOL):
            raise ValidationError("basis offsets must lie in the unit cell A[0,1)^d")
        for i, j in itertools.combinations(range(len(p)), 2):
            if np.linalg.norm(p[i] - p[j]) < POSITION_TOL:
                raise ValidationError(f"basis offsets {i} and {j} coincide")
        if int(self.orbitals_per_site) < 1:
            raise ValidationError("orbitals_per_site must be >= 1")
        object.__setattr__(self, "cell_matrix", _readonly(a))
        object.__setattr__(self, "offsets", _readonly(p))
        object.__setattr__(self, "species", species)
        object.__setattr__(self, "orbitals_per_site", int(self.orbitals_per_site))

    @property
    def dim(self):
        return self.cell_matrix.shape[0]

    @property
    def n_basis(self):
        return len(self.offsets)

    def position(self, cell, basis):
        """Position of basis site ``basis`` in cell ``cell``."""
        return self.cell_matrix @ np.asarray(cell, dtype=float) + self.offsets[basis]

    def lattice_coordinates(self, x, tol=POSITION_TOL):
        """Return ``(cell, basis)`` of the reference site at ``x`` or ``None``."""
        x = np.asarray(x, dtype=float)
        for b in range(self.n_basis):
            s = np.linalg.solve(self.cell_matrix, x - self.offsets[b])
            g = np.round(s)
            if np.linalg.norm(self.cell_matrix @ (s - g)) < tol:
                return tuple(int(v) for v in g), b
        return None

    def nearest_neighbour_distance(self):
        """Smallest distance between two distinct reference sites."""
        d = self.dim
        best = math.inf
        span = range(-2, 3)
        for g in itertools.product(span, repeat=d):
            shift = self.cell_matrix @ np.array(g, dtype=float)
            for i in range(self.n_basis):
                for j in range(self.n_basis):
                    if i == j and not any(g):
                        continue
                    best = min(best, np.linalg.norm(self.offsets[i] + shift - self.offsets[j]))
        return best

    def density(self):
        """Number of sites per unit volume."""
        return self.n_basis / abs(np.linalg.det(self.cell_matrix))


@dataclass(frozen=True, eq=False)
class DefectSpec:
    """Vacancies and interstitials confined to the ball ``B_radius``.

    Parameters
    ----------
    removed : array_like, shape (k, d)
        Positions of removed reference sites.
    added : sequence of (position, species)
        Interstitial sites.
    radius : float
        Defect radius ``R_def``.
    """

    removed: np.ndarray
    added: tuple
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValidationError("defect radius must be positive")
        removed = np.asarray(self.removed, dtype=float)
        added = tuple((_readonly(np.atleast_1d(np.asarray(x, dtype=float))), str(s))
                      for x, s in self.added)
        object.__setattr__(self, "removed", _readonly(removed))
        object.__setattr__(self, "added", added)
        object.__setattr__(self, "radius", float(self.radius))

    def removed_positions(self, dim):
        return self.removed.reshape(-1, dim)

    def check(self, crystal):
        d = crystal.dim
        rem = self.removed_positions(crystal.dim)
        for x in rem:
            if np.linalg.norm(x) >= self.radius:
                raise ValidationError(f"removed site {x.tolist()} lies outside B_R_def")
            if crystal.lattice_coordinates(x) is None:
                raise ValidationError(f"removed position {x.tolist()} is not a reference site")
        for x, _ in self.added:
            if len(x) != d:
                raise ValidationError("added position has wrong dimension")
            if np.linalg.norm(x) >= self.radius:
                raise ValidationError(f"added site {x.tolist()} lies outside B_R_def")
        return rem


class Pairs(NamedTuple):
    """Ordered site pairs with periodic image shifts.

    ``vec[p] = r_{i j}(u) + M alpha`` with ``r_{ij}(u) = x_i + u_i - x_j - u_j``.
    """

    i: np.ndarray
    j: np.ndarray
    alpha: np.ndarray
    vec: np.ndarray


class AdmissibilityReport(NamedTuple):
    admissible: bool
    worst: tuple | None  # (i, j, alpha, ratio)


@dataclass(frozen=True, eq=False)
class Configuration:
    """Finite cluster of sites (reference crystal plus optional defect).

    ``cells[i]`` and ``basis_index[i]`` give the reference-lattice label of
    site ``i``; added (interstitial) sites carry ``basis_index == -1``.
    """

    crystal: ReferenceCrystal
    defect: DefectSpec | None
    positions: np.ndarray
    species: tuple
    cells: np.ndarray
    basis_index: np.ndarray
    extent: tuple | None = None

    kind: ClassVar[str] = "cluster"

    def __post_init__(self):
        object.__setattr__(self, "positions", _readonly(self.positions))
        object.__setattr__(self, "cells", _readonly(self.cells, dtype=int))
        object.__setattr__(self, "basis_index", _readonly(self.basis_index, dtype=int))

    @property
    def dim(self):
        return self.crystal.dim

    @property
    def n_sites(self):
        return len(self.positions)

    @property
    def n_orbitals(self):
        return self.n_sites * self.crystal.orbitals_per_site

    @property
    def added_mask(self):
        return self.basis_index < 0

    def zero_displacement(self):
        return np.zeros((self.n_sites, self.dim))

    def check_displacement(self, u):
        """Return ``u`` as a float array of shape ``(n_sites, d)``."""
        if u is None:
            return self.zero_displacement()
        u = np.asarray(u, dtype=float)
        if u.shape == (self.n_sites * self.dim,):
            u = u.reshape(self.n_sites, self.dim)
        if u.shape != (self.n_sites, self.dim):
            raise ValidationError(f"displacement must have shape {(self.n_sites, self.dim)}, got {u.shape}")
        if not np.all(np.isfinite(u)):
            raise ValidationError("displacement has non-finite entries")
        return u

    def pairs(self, u, radius, *, upper=False):
        """Ordered pairs whose deformed separation is shorter than ``radius``.

        ``u=None`` selects reference separations.  With ``upper=True`` only
        ``i < j`` (and, on tori, self-images ``i == j``) are returned.
        """
        u = self.check_displacement(u)
        ref = self.positions[:, None, :] - self.positions[None, :, :]
        du = u[:, None, :] - u[None, :, :]
        vec = ref + du
        r = np.linalg.norm(vec, axis=-1)
        mask = r < radius
        np.fill_diagonal(mask, False)
        if upper:
            mask &= np.triu(np.ones_like(mask), k=1)
        i, j = np.nonzero(mask)
        return Pairs(i, j, np.zeros((len(i), self.dim), dtype=int), vec[i, j])

    def reference_distances(self, site):
        """Reference distance from ``site`` to every site."""
        return np.linalg.norm(self.positions - self.positions[site], axis=1)

    def nearest_neighbour_distance(self):
        p = self.pairs(None, np.inf)
        return float(np.min(np.linalg.norm(p.vec, axis=1))) if len(p.i) else math.inf


@dataclass(frozen=True, eq=False)
class TorusCell(Configuration):
    """Periodic supercell ``Lambda_R`` with period matrix ``M`` (columns).

    The fundamental domain is the parallelepiped ``M [-1/2, 1/2)^d`` and
    ``domain_radius`` is its inradius.
    """

    period_matrix: np.ndarray = None
    domain_radius: float = 0.0

    kind: ClassVar[str] = "torus"

    def __post_init__(self):
        super().__post_init__()
        object.__setattr__(self, "period_matrix", _readonly(self.period_matrix))

    @property
    def period_inverse(self):
        return np.linalg.inv(self.period_matrix)

    def _alpha_window(self, frac_lo, frac_hi, radius):
        rows = np.linalg.norm(self.period_inverse, axis=1)
        c = rows * radius
        lo = np.floor(-frac_hi - c).astype(int)
        hi = np.ceil(-frac_lo + c).astype(int)
        return itertools.product(*(range(a, b + 1) for a, b in zip(lo, hi)))

    def pairs(self, u, radius, *, upper=False):
        u = self.check_displacement(u)
        m = self.period_matrix
        ref = self.positions[:, None, :] - self.positions[None, :, :]
        du = u[:, None, :] - u[None, :, :]
        vec0 = ref + du
        frac = vec0 @ self.period_inverse.T
        n = self.n_sites
        tri = np.triu(np.ones((n, n), dtype=bool), k=0 if upper else -n)
        out_i, out_j, out_a, out_v = [], [], [], []
        for alpha in self._alpha_window(frac.reshape(-1, self.dim).min(axis=0),
                                        frac.reshape(-1, self.dim).max(axis=0), radius):
            alpha = np.array(alpha, dtype=int)
            vec = vec0 + m @ alpha if alpha.any() else vec0
            mask = np.linalg.norm(vec, axis=-1) < radius
            if not alpha.any():
                np.fill_diagonal(mask, False)
            mask &= tri
            i, j = np.nonzero(mask)
            if len(i):
                out_i.append(i)
                out_j.append(j)
                out_a.append(np.broadcast_to(alpha, (len(i), self.dim)))
                out_v.append(vec[i, j])
        if not out_i:
            z = np.zeros(0, dtype=int)
            return Pairs(z, z, np.zeros((0, self.dim), dtype=int), np.zeros((0, self.dim)))
        i = np.concatenate(out_i)
        j = np.concatenate(out_j)
        alpha = np.concatenate(out_a)
        vec = np.concatenate(out_v)
        order = np.lexsort((*alpha.T[::-1], j, i))
        return Pairs(i[order], j[order], alpha[order], vec[order])

    def minimal_image(self, vecs):
        """Minimal-image representatives of reference separation vectors."""
        vecs = np.atleast_2d(vecs)
        frac = vecs @ self.period_inverse.T
        best = vecs - (np.round(frac)) @ self.period_matrix.T
        best_r = np.linalg.norm(best, axis=1)
        for beta in itertools.product((-1, 0, 1), repeat=self.dim):
            if not any(beta):
                continue
            cand = best + self.period_matrix @ np.array(beta, dtype=float)
            r = np.linalg.norm(cand, axis=1)
            better = r < best_r
            best[better] = cand[better]
            best_r[better] = r[better]
        return best

    def reference_distances(self, site):
        d = self.positions - self.positions[site]
        return np.linalg.norm(self.minimal_image(d), axis=1)


# ---------------------------------------------------------------------------
# construction


def _defect_sites(crystal, defect):
    if defect is None:
        return np.zeros((0, crystal.dim)), ()
    return defect.check(crystal), defect.added


def _assemble_sites(crystal, defect, labels):
    """Apply a defect to sorted reference labels and return site arrays."""
    removed, added = _defect_sites(crystal, defect)
    removed_labels = {crystal.lattice_coordinates(x) for x in removed}
    pos, spc, cells, basis = [], [], [], []
    for g, b in labels:
        if (g, b) in removed_labels:
            removed_labels.discard((g, b))
            continue
        pos.append(crystal.position(g, b))
        spc.append(crystal.species[b])
        cells.append(g)
        basis.append(b)
    if removed_labels:
        raise ValidationError(f"removed sites {sorted(removed_labels)} are not part of the host")
    for x, s in added:
        for p in pos:
            if np.linalg.norm(p - x) < POSITION_TOL:
                raise ValidationError(f"added site {x.tolist()} overlaps a surviving site")
        pos.append(np.array(x, dtype=float))
        spc.append(s)
        cells.append((0,) * crystal.dim)
        basis.append(-1)
    pos = np.array(pos, dtype=float).reshape(-1, crystal.dim)
    for i, j in itertools.combinations(range(len(pos)), 2):
        if np.linalg.norm(pos[i] - pos[j]) < POSITION_TOL:
            raise ValidationError(f"sites {i} and {j} overlap after defect insertion")
    return pos, tuple(spc), np.array(cells, dtype=int).reshape(-1, crystal.dim), np.array(basis, dtype=int)


def build_configuration(crystal, defect=None, extent=(1,), *, centered=False):
    """Build a finite cluster of ``prod(extent)`` unit cells.

    Parameters
    ----------
    crystal : ReferenceCrystal
    defect : DefectSpec, optional
    extent : sequence of int
        Cell repeats per dimension.  Cells run over ``0..n-1``, or over
        ``-n//2 .. n - n//2 - 1`` when ``centered`` is true.

    Returns
    -------
    Configuration
        Sites sorted lexicographically by cell, then basis index; added
        sites follow in input order.
    """
    extent = tuple(int(n) for n in np.atleast_1d(extent))
    if len(extent) != crystal.dim or min(extent) < 1:
        raise ValidationError("extent must be positive in every dimension")
    ranges = [range(-(n // 2), n - n // 2) if centered else range(n) for n in extent]
    labels = [(g, b) for g in itertools.product(*ranges) for b in range(crystal.n_basis)]
    pos, spc, cells, basis = _assemble_sites(crystal, defect, labels)
    return Configuration(crystal, defect, pos, spc, cells, basis, extent=extent)


def build_torus(config, period_matrix, defect=None):
    """Build the periodic cell with fundamental domain ``M [-1/2, 1/2)^d``.

    Parameters
    ----------
    config : Configuration or ReferenceCrystal
        Supplies the crystal and the defect; the sites of the torus are the
        reference sites in the fundamental domain with the defect applied.
    period_matrix : array_like, shape (d, d)
        Periods as columns; each must be a reference lattice vector.

    Returns
    -------
    TorusCell
    """
    if isinstance(config, ReferenceCrystal):
        crystal = config
    else:
        crystal, defect = config.crystal, config.defect
    d = crystal.dim
    m = _as_matrix(period_matrix, d)
    if abs(np.linalg.det(m)) < 1e-12:
        raise ValidationError("period matrix is singular")
    s = np.linalg.solve(crystal.cell_matrix, m)
    if np.max(np.abs(s - np.round(s))) > 1e-9:
        raise ValidationError("period matrix columns must be reference lattice vectors")
    m_inv = np.linalg.inv(m)
    radius = 0.5 / np.max(np.linalg.norm(m_inv, axis=1))

    corners = np.array(list(itertools.product((-0.5, 0.5), repeat=d))) @ m.T
    cell_frac = np.linalg.solve(crystal.cell_matrix, corners.T).T
    lo = np.floor(cell_frac.min(axis=0)).astype(int) - 1
    hi = np.ceil(cell_frac.max(axis=0)).astype(int) + 1
    labels = []
    for g in itertools.product(*(range(a, b + 1) for a, b in zip(lo, hi))):
        for b in range(crystal.n_basis):
            f = m_inv @ crystal.position(g, b)
            if np.all(f >= -0.5 - POSITION_TOL) and np.all(f < 0.5 - POSITION_TOL):
                labels.append((tuple(int(v) for v in g), b))
    labels.sort()

    if defect is not None:
        removed, added = _defect_sites(crystal, defect)
        for x in list(removed) + [x for x, _ in added]:
            if np.linalg.norm(x) >= radius - POSITION_TOL:
                raise ValidationError(f"defect site {np.asarray(x).tolist()} touches the torus boundary")
    pos, spc, cells, basis = _assemble_sites(crystal, defect, labels)
    return TorusCell(crystal, defect, pos, spc, cells, basis, extent=None,
                     period_matrix=m, domain_radius=float(radius))


# ---------------------------------------------------------------------------
# displacement geometry


def torus_distance(cell, u, l, k):
    """Minimal-image deformed distance between sites ``l`` and ``k``.

    Returns
    -------
    r : float
    vec : ndarray
        ``r_{lk}(u) + M alpha*``.
    alpha : ndarray of int
    """
    u = cell.check_displacement(u)
    n = cell.n_sites
    if not (0 <= l < n and 0 <= k < n):
        raise IndexError("site index out of range")
    r0 = (cell.positions[l] - cell.positions[k]) + (u[l] - u[k])
    if not isinstance(cell, TorusCell):
        return float(np.linalg.norm(r0)), r0, np.zeros(cell.dim, dtype=int)
    m = cell.period_matrix
    base = -np.round(cell.period_inverse @ r0).astype(int)
    smin = np.linalg.svd(m, compute_uv=False).min()
    size = 2
    while True:
        best = (math.inf, None, None)
        for b in itertools.product(range(-size, size + 1), repeat=cell.dim):
            alpha = base + np.array(b, dtype=int)
            v = r0 + m @ alpha
            rv = np.linalg.norm(v)
            if rv < best[0]:
                best = (rv, v, alpha)
        # anything outside the window is at least smin*(size + 1/2) away
        if smin * (size + 0.5) > best[0]:
            return float(best[0]), best[1], best[2]
        size += 1


@dataclass(frozen=True)
class SeminormConfig:
    """Weights ``exp(-2 upsilon |rho|)`` of the stencil seminorm.

    Parameters
    ----------
    upsilon : float
        Decay weight ``Upsilon > 0``.
    tolerance : float
        Dropped tail weight relative to the retained weight.
    """

    upsilon: float = 1.0
    tolerance: float = 1e-12

    def __post_init__(self):
        if not self.upsilon > 0:
            raise ValidationError("upsilon must be positive")
        if not 0 < self.tolerance < 1:
            raise ValidationError("tolerance must lie in (0, 1)")

    def cutoff(self, crystal):
        """Stencil radius beyond which weights are dropped.

        The lattice tail sum is bounded by the integral of the weight over
        the exterior of the ball shrunk by one neighbour spacing.
        """
        d = crystal.dim
        a = crystal.nearest_neighbour_distance()
        c = 2.0 * self.upsilon
        area = 2.0 * math.pi ** (d / 2) / gamma_fn(d / 2)
        retained = math.exp(-c * a)
        r = 2.0 * a
        while True:
            x = max(r - a, 0.0)
            tail = crystal.density() * area * gamma_fn(d) * gammaincc(d, c * x) / c ** d
            if tail <= self.tolerance * retained:
                return r
            r += 0.25 * a


def stencil_weights(host, cfg=SeminormConfig()):
    """Weight matrix ``W[i, j] = exp(-2 upsilon |rho_ij|)`` (minimal image on tori)."""
    radius = cfg.cutoff(host.crystal)
    n = host.n_sites
    ref = host.positions[None, :, :] - host.positions[:, None, :]
    if isinstance(host, TorusCell):
        ref = host.minimal_image(ref.reshape(-1, host.dim)).reshape(n, n, host.dim)
    r = np.linalg.norm(ref, axis=-1)
    w = np.where(r <= radius, np.exp(-2.0 * cfg.upsilon * r), 0.0)
    np.fill_diagonal(w, 0.0)
    return w


def stencil_seminorm(host, u, cfg=SeminormConfig()):
    """Return ``(sum_l sum_rho exp(-2 upsilon |rho|) |D_rho u(l)|^2)^(1/2)``."""
    u = host.check_displacement(u)
    w = stencil_weights(host, cfg)
    diff = u[None, :, :] - u[:, None, :]
    return float(np.sqrt(np.sum(w * np.sum(diff ** 2, axis=-1))))


def gram_matrix(host, cfg=SeminormConfig()):
    """Matrix ``G`` with ``v @ G @ v == stencil_seminorm(host, v)**2`` (``v`` flattened)."""
    w = stencil_weights(host, cfg)
    lap = 2.0 * (np.diag(w.sum(axis=1)) - w)
    return np.kron(lap, np.eye(host.dim))


def check_admissible(host, u, m):
    """Check ``r_lk(u) >= m |l - k|`` for all (image) pairs.

    Returns
    -------
    AdmissibilityReport
        ``worst`` is ``(i, j, alpha, ratio)`` for the pair with the smallest
        ratio among those inspected.
    """
    if not 0 < m <= 1:
        raise ValidationError("admissibility constant must lie in (0, 1]")
    u = host.check_displacement(u)
    spread = 2.0 * float(np.max(np.linalg.norm(u - u.mean(axis=0), axis=1))) if len(u) else 0.0
    nn = host.crystal.nearest_neighbour_distance()
    if isinstance(host, TorusCell):
        cap = 2.0 * float(np.max(np.linalg.norm(host.period_matrix, axis=0)))
    else:
        cap = math.inf
    # beyond this reference distance the ratio is provably >= m
    radius = spread / (1.0 - m) if m < 1 else cap
    radius = max(min(radius, cap), 1.5 * nn)
    if not math.isfinite(radius):
        radius = np.max(np.ptp(host.positions, axis=0)) + 1.0 if host.n_sites > 1 else 1.0
    p = host.pairs(None, radius)
    if len(p.i) == 0:
        return AdmissibilityReport(True, None)
    ref_r = np.linalg.norm(p.vec, axis=1)
    deformed = np.linalg.norm(p.vec + (u[p.i] - u[p.j]), axis=1)
    ratio = deformed / ref_r
    w = int(np.argmin(ratio))
    worst = (int(p.i[w]), int(p.j[w]), tuple(int(a) for a in p.alpha[w]), float(ratio[w]))
    return AdmissibilityReport(bool(ratio[w] >= m), worst)


def quintic_smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x ** 3 * (10.0 - 15.0 * x + 6.0 * x ** 2)


def truncate(host, u, radius):
    """Radially truncated displacement ``T_R u``.

    Equal to ``u`` on ``B_{R/2}``, zero outside ``B_R`` and tapered by a
    quintic (C^2) smoothstep in between.
    """
    u = host.check_displacement(u)
    nn = host.nearest_neighbour_distance()
    if radius < 2 * nn:
        raise ValidationError("truncation radius must be at least twice the neighbour spacing")
    if isinstance(host, TorusCell) and radius > host.domain_radius:
        raise ValidationError("truncation ball must lie inside the torus domain")
    r = np.linalg.norm(host.positions, axis=1)
    eta = 1.0 - quintic_smoothstep((r - radius / 2) / (radius / 2))
    eta[r >= radius] = 0.0
    return eta[:, None] * u


# ---------------------------------------------------------------------------
# serialization


def crystal_to_dict(crystal):
    return {
        "dim": crystal.dim,
        "cell_matrix": crystal.cell_matrix.tolist(),
        "basis": [{"offset": p.tolist(), "species": s} for p, s in zip(crystal.offsets, crystal.species)],
        "orbitals_per_site": crystal.orbitals_per_site,
    }


def crystal_from_dict(doc, orbitals_per_site=None):
    d = int(doc["dim"])
    a = _as_matrix(doc["cell_matrix"], d)
    offsets = [b["offset"] for b in doc["basis"]]
    species = [b["species"] for b in doc["basis"]]
    nb = orbitals_per_site if orbitals_per_site is not None else doc.get("orbitals_per_site", 1)
    return ReferenceCrystal(a, np.array(offsets, dtype=float).reshape(-1, d), species, nb)


def defect_to_dict(defect, dim):
    if defect is None:
        return None
    return {
        "removed": defect.removed_positions(dim).tolist(),
        "added": [{"position": x.tolist(), "species": s} for x, s in defect.added],
        "radius": defect.radius,
    }


def defect_from_dict(doc, dim):
    if doc is None:
        return None
    removed = np.array(doc.get("removed", []), dtype=float).reshape(-1, dim)
    added = [(a["position"], a["species"]) for a in doc.get("added", [])]
    return DefectSpec(removed, added, doc["radius"])


def configuration_to_dict(config):
    doc = crystal_to_dict(config.crystal)
    doc["defect"] = defect_to_dict(config.defect, config.dim)
    if isinstance(config, TorusCell):
        doc["period_matrix"] = config.period_matrix.tolist()
    else:
        doc["extent"] = list(config.extent)
    return doc


def configuration_from_dict(doc):
    crystal = crystal_from_dict(doc)
    defect = defect_from_dict(doc.get("defect"), crystal.dim)
    if "period_matrix" in doc:
        return build_torus(crystal, doc["period_matrix"], defect)
    return build_configuration(crystal, defect, doc["extent"])
