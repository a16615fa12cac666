"""Hopping models and Hamiltonian assembly (cluster, torus, Bloch, derivatives).

Orbital rows are ordered site-major: row ``site * N_b + a``.
"""

from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import AdmissibilityError, NumericalFailure, ValidationError
from .lattice import TorusCell, check_admissible

FAMILY = "exp-hop"


def septic_taper(x):
    """C^3 step from 1 (x <= 0) to 0 (x >= 1) and its derivative."""
    inside = (x > 0) & (x < 1)
    x = np.clip(x, 0.0, 1.0)
    s = x ** 4 * (35.0 - 84.0 * x + 70.0 * x ** 2 - 20.0 * x ** 3)
    ds = 140.0 * x ** 3 * (1.0 - x) ** 3
    return 1.0 - s, np.where(inside, -ds, 0.0)


@dataclass(frozen=True, eq=False)
class HoppingModel:
    """Radial hopping ``h(r) = -t (r/r0)^kappa exp(-gamma0 (r - r0)) taper(r)``.

    The taper falls from 1 at ``r_on`` to 0 at ``r_cut`` (C^3, so the
    hoppings are three times continuously differentiable everywhere).  The
    orbital block of a hopping is ``coupling * h(r)``.

    Parameters
    ----------
    t, gamma0, r0, kappa : float
        Amplitude, decay rate, normalization distance and power prefactor.
    r_cut : float
        Cutoff; ``h`` vanishes for ``r >= r_cut``.
    r_on : float, optional
        Start of the taper (default: midway between ``r0`` and ``r_cut``).
    onsite : dict
        Species -> onsite energy (scalar, or one value per orbital).
    nb : int
        Orbitals per site.
    coupling : array_like, optional
        Symmetric ``nb x nb`` orbital coupling; identity by default.
    admissibility : float
        Declared non-interpenetration constant ``m`` used by :func:`assemble`.
    """

    t: float = 0.5
    gamma0: float = 1.0
    r0: float = 1.0
    r_cut: float = 1.6
    r_on: float | None = None
    kappa: float = 0.0
    onsite: dict = field(default_factory=dict)
    nb: int = 1
    coupling: np.ndarray | None = None
    admissibility: float = 0.5

    def __post_init__(self):
        for name in ("t", "gamma0", "r0", "r_cut", "kappa"):
            if not np.isfinite(getattr(self, name)):
                raise ValidationError(f"model parameter {name} must be finite")
        if not self.r_cut > 0 or self.r0 < 0 or self.kappa < 0:
            raise ValidationError("need r_cut > 0, r0 >= 0 and kappa >= 0")
        if self.kappa > 0 and not self.r0 > 0:
            raise ValidationError("kappa > 0 requires r0 > 0")
        r_on = 0.5 * (self.r0 + self.r_cut) if self.r_on is None else float(self.r_on)
        if not 0 <= r_on < self.r_cut:
            raise ValidationError("need 0 <= r_on < r_cut")
        object.__setattr__(self, "r_on", r_on)
        nb = int(self.nb)
        if nb < 1:
            raise ValidationError("nb must be >= 1")
        object.__setattr__(self, "nb", nb)
        c = np.eye(nb) if self.coupling is None else np.asarray(self.coupling, dtype=float)
        if c.shape != (nb, nb) or not np.array_equal(c, c.T):
            raise ValidationError("coupling must be a symmetric nb x nb matrix")
        c.setflags(write=False)
        object.__setattr__(self, "coupling", c)
        onsite = {}
        for s, v in dict(self.onsite).items():
            v = np.broadcast_to(np.asarray(v, dtype=float), (nb,)).copy()
            v.setflags(write=False)
            onsite[str(s)] = v
        object.__setattr__(self, "onsite", onsite)
        if not 0 < self.admissibility <= 1:
            raise ValidationError("admissibility must lie in (0, 1]")

    def radial(self, r):
        """Return ``h(r)`` and ``h'(r)`` (arrays); zero for ``r >= r_cut``."""
        r = np.asarray(r, dtype=float)
        inside = r < self.r_cut
        rr = np.where(inside, r, self.r0 if self.r0 > 0 else 1.0)
        base = -self.t * np.exp(-self.gamma0 * (rr - self.r0))
        dlog = -self.gamma0 * np.ones_like(rr)
        if self.kappa:
            safe = np.where(rr > 0, rr, 1.0)
            base = base * (rr / self.r0) ** self.kappa
            dlog = dlog + np.where(rr > 0, self.kappa / safe, 0.0)
        tap, dtap = septic_taper((rr - self.r_on) / (self.r_cut - self.r_on))
        dtap = dtap / (self.r_cut - self.r_on)
        h = base * tap
        dh = base * (dlog * tap + dtap)
        return np.where(inside, h, 0.0), np.where(inside, dh, 0.0)

    def onsite_energies(self, species):
        try:
            return self.onsite[species]
        except KeyError:
            raise ValidationError(f"no onsite energy for species {species!r}") from None

    def decay_envelope(self, gamma=None, r_max=None, n=4001):
        """Smallest ``h0`` with ``|h^(j)(r)| <= h0 exp(-gamma r)``, ``j <= 1``, on a grid.

        The default rate is ``gamma0 / 2``; finite support makes any rate
        admissible with a large enough prefactor.
        """
        gamma = 0.5 * self.gamma0 if gamma is None else gamma
        r = np.linspace(1e-6, self.r_cut if r_max is None else r_max, n)
        h, dh = self.radial(r)
        c = np.max(np.abs(self.coupling))
        return float(c * np.max(np.maximum(np.abs(h), np.abs(dh)) * np.exp(gamma * r))), gamma

    def to_dict(self):
        return {
            "family": FAMILY, "t": self.t, "gamma0": self.gamma0, "r0": self.r0,
            "r_cut": self.r_cut, "r_on": self.r_on, "kappa": self.kappa,
            "onsite": {s: (v.tolist() if self.nb > 1 else float(v[0])) for s, v in self.onsite.items()},
            "Nb": self.nb, "coupling": self.coupling.tolist(), "admissibility": self.admissibility,
        }

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        family = doc.pop("family", FAMILY)
        if family != FAMILY:
            raise ValidationError(f"unknown model family {family!r}")
        nb = doc.pop("Nb", 1)
        return cls(nb=nb, **doc)


def eval_hopping(model, species_pair, orbital_pair, xi):
    """Hopping ``h^{ab}(xi)`` and its gradient with respect to ``xi``.

    Hoppings are species independent in the built-in family; the species
    pair is accepted for interface uniformity.
    """
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    a, b = orbital_pair
    c = model.coupling[a, b]
    r = float(np.linalg.norm(xi))
    h, dh = model.radial(r)
    if r == 0.0:
        return float(c * h), np.zeros_like(xi)
    return float(c * h), c * float(dh) * xi / r


@dataclass(frozen=True, eq=False)
class Hamiltonian:
    """Assembled real symmetric Hamiltonian with its host and displacement."""

    matrix: np.ndarray
    host: object
    displacement: np.ndarray
    model: HoppingModel

    @property
    def nb(self):
        return self.model.nb

    @property
    def size(self):
        return self.matrix.shape[0]

    def index(self, site, orbital=0):
        return site * self.nb + orbital

    def site_rows(self, site):
        return np.arange(site * self.nb, (site + 1) * self.nb)

    def fingerprint(self):
        return hashlib.sha256(np.ascontiguousarray(self.matrix).tobytes()).hexdigest()[:16]


def _orbital_rows(i, j, nb):
    """Row/col index arrays and orbital pairs for site pairs ``(i, j)``."""
    a, b = np.meshgrid(np.arange(nb), np.arange(nb), indexing="ij")
    a, b = a.ravel(), b.ravel()
    rows = (i[:, None] * nb + a[None, :]).ravel()
    cols = (j[:, None] * nb + b[None, :]).ravel()
    return rows, cols, a, b


def _check_inputs(host, u, model, check):
    u = host.check_displacement(u)
    if host.crystal.orbitals_per_site != model.nb:
        raise ValidationError("model Nb differs from the crystal's orbitals_per_site")
    if check:
        rep = check_admissible(host, u, model.admissibility)
        if not rep.admissible:
            raise AdmissibilityError(f"displacement is not admissible (worst pair {rep.worst})",
                                     worst=rep.worst)
    return u


def assemble(host, u, model, *, check=True):
    """Assemble ``H(u)`` on a cluster or torus.

    Torus entries sum over all periodic images within ``r_cut``.  Only pairs
    ``i < j`` and self-images are evaluated; the lower triangle is mirrored,
    so the result is exactly symmetric.

    Returns
    -------
    Hamiltonian
    """
    u = _check_inputs(host, u, model, check)
    nb = model.nb
    n = host.n_sites * nb
    p = host.pairs(u, model.r_cut, upper=True)
    h, _ = model.radial(np.linalg.norm(p.vec, axis=1))
    rows, cols, a, b = _orbital_rows(p.i, p.j, nb)
    vals = (h[:, None] * model.coupling[a, b][None, :].reshape(1, -1)).ravel()
    off = np.zeros((n, n))
    diag = np.zeros((n, n))
    same = np.repeat(p.i == p.j, nb * nb)
    np.add.at(off, (rows[~same], cols[~same]), vals[~same])
    np.add.at(diag, (rows[same], cols[same]), vals[same])
    # self-image blocks are symmetric only up to summation order
    diag = 0.5 * (diag + diag.T)
    for s, spc in enumerate(host.species):
        sl = slice(s * nb, (s + 1) * nb)
        diag[sl, sl] += np.diag(model.onsite_energies(spc))
    mat = off + off.T + diag
    if not np.all(np.isfinite(mat)):
        raise NumericalFailure("non-finite Hamiltonian entry")
    mat.setflags(write=False)
    u = u.copy()
    u.setflags(write=False)
    return Hamiltonian(mat, host, u, model)


@dataclass(frozen=True)
class DerivativeBlock:
    """Sparse ``dH/du(m)_i`` as coalesced ``(row, col, value)`` triplets."""

    site: int
    direction: int
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray
    shape: tuple

    def to_dense(self):
        out = np.zeros(self.shape)
        out[self.rows, self.cols] = self.values
        return out


def hamiltonian_derivative(host, u, model, m, i, *, check=True):
    """Analytic ``dH/d[u(m)]_i`` by the chain rule on ``r_lk(u)``."""
    u = _check_inputs(host, u, model, check)
    if not 0 <= m < host.n_sites or not 0 <= i < host.dim:
        raise IndexError("site or direction out of range")
    nb = model.nb
    p = host.pairs(u, model.r_cut)
    keep = (p.i == m) != (p.j == m)
    pi, pj, vec = p.i[keep], p.j[keep], p.vec[keep]
    r = np.linalg.norm(vec, axis=1)
    _, dh = model.radial(r)
    sign = np.where(pi == m, 1.0, -1.0)
    g = sign * dh * vec[:, i] / r
    rows, cols, a, b = _orbital_rows(pi, pj, nb)
    vals = (g[:, None] * model.coupling[a, b][None, :]).ravel()
    n = host.n_sites * nb
    flat = rows * n + cols
    uniq, inv = np.unique(flat, return_inverse=True)
    summed = np.zeros(len(uniq))
    np.add.at(summed, inv, vals)
    nz = summed != 0.0
    return DerivativeBlock(m, i, uniq[nz] // n, uniq[nz] % n, summed[nz], (n, n))


def derivative_contraction(host, u, model, rho):
    """Return ``g[m, i] = sum_{l,k} rho_{kl} dH_{lk}/d[u(m)]_i`` for symmetric ``rho``.

    With ``rho`` the (spin-summed) density matrix this is the energy
    gradient.
    """
    u = host.check_displacement(u)
    nb = model.nb
    p = host.pairs(u, model.r_cut, upper=True)
    off = p.i != p.j
    pi, pj, vec = p.i[off], p.j[off], p.vec[off]
    r = np.linalg.norm(vec, axis=1)
    _, dh = model.radial(r)
    rows, cols, a, b = _orbital_rows(pi, pj, nb)
    blk = (rho[rows, cols].reshape(len(pi), nb * nb) * model.coupling[a, b][None, :]).sum(axis=1)
    contrib = (2.0 * blk * dh / r)[:, None] * vec
    g = np.zeros((host.n_sites, host.dim))
    np.add.at(g, pi, contrib)
    np.add.at(g, pj, -contrib)
    return g


# ---------------------------------------------------------------------------
# reference crystal in reciprocal space


def _bloch_terms(crystal, model):
    """All hopping terms ``(row, col, vector, value)`` of one unit cell."""
    a_mat = crystal.cell_matrix
    nb = model.nb
    rows_inv = np.linalg.norm(np.linalg.inv(a_mat), axis=1)
    span = np.max(np.linalg.norm(crystal.offsets[:, None] - crystal.offsets[None], axis=-1))
    reach = np.ceil(rows_inv * (model.r_cut + span)).astype(int) + 1
    out_r, out_c, out_v, out_h = [], [], [], []
    for g in itertools.product(*(range(-k, k + 1) for k in reach)):
        shift = a_mat @ np.array(g, dtype=float)
        for i in range(crystal.n_basis):
            for j in range(crystal.n_basis):
                if i == j and not any(g):
                    continue
                v = crystal.offsets[i] - crystal.offsets[j] - shift
                h, _ = model.radial(np.linalg.norm(v))
                if h == 0.0:
                    continue
                for a in range(nb):
                    for b in range(nb):
                        out_r.append(i * nb + a)
                        out_c.append(j * nb + b)
                        out_v.append(v)
                        out_h.append(float(h) * model.coupling[a, b])
    d = crystal.dim
    return (np.array(out_r, dtype=int), np.array(out_c, dtype=int),
            np.array(out_v, dtype=float).reshape(-1, d), np.array(out_h, dtype=float))


def bloch_matrices(crystal, model, xis):
    """Bloch matrices for a stack of wave vectors ``xis`` of shape ``(nk, d)``."""
    xis = np.atleast_2d(np.asarray(xis, dtype=float))
    nb = model.nb
    n = crystal.n_basis * nb
    rows, cols, vecs, vals = _bloch_terms(crystal, model)
    out = np.zeros((len(xis), n, n), dtype=complex)
    for k, xi in enumerate(xis):
        mat = np.zeros((n, n), dtype=complex)
        np.add.at(mat, (rows, cols), vals * np.exp(-1j * (vecs @ xi)))
        out[k] = 0.5 * (mat + mat.conj().T)
    for b, spc in enumerate(crystal.species):
        idx = np.arange(b * nb, (b + 1) * nb)
        out[:, idx, idx] += model.onsite_energies(spc)
    return out


def assemble_bloch(crystal, model, xi):
    """Hermitian Bloch matrix ``sum_gamma h(l - k + A gamma) exp(-i (l - k + A gamma) . xi)``."""
    return bloch_matrices(crystal, model, np.atleast_1d(np.asarray(xi, dtype=float))[None, :])[0]


def torus_wavevectors(crystal, period_matrix):
    """Wave vectors ``xi`` compatible with the periods (one per reduced class)."""
    a_mat = crystal.cell_matrix
    s = np.round(np.linalg.solve(a_mat, np.asarray(period_matrix, dtype=float))).astype(int)
    count = int(round(abs(np.linalg.det(s))))
    st_inv = np.linalg.inv(s.T)
    corners = np.array(list(itertools.product((0, 1), repeat=crystal.dim))) @ s  # rows = S^T c
    lo, hi = corners.min(axis=0), corners.max(axis=0)
    found = {}
    for nvec in itertools.product(*(range(a, b + 1) for a, b in zip(lo, hi))):
        q = st_inv @ np.array(nvec, dtype=float)
        q = q - np.floor(q + 1e-12)
        key = tuple(np.round(q * count).astype(int) % count)
        found.setdefault(key, q)
        if len(found) == count:
            break
    qs = np.array([found[k] for k in sorted(found)])
    return 2.0 * np.pi * qs @ np.linalg.inv(a_mat)  # xi = 2 pi A^{-T} q, stored as rows


def is_torus(host):
    return isinstance(host, TorusCell)
