"""Site energies by eigenvector weights and by resolvent contour integrals.

The resolvent representation of the grand-potential site energy is

    G_l = -(1/2 pi i) sum_a  oint g^beta(z; mu) [(H - z)^{-1}]_{la,la} dz

over two positively oriented rectangles, one around the spectrum below
``mu`` and one around the spectrum above it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import CollisionError, ConvergenceError, DomainError, NumericalFailure
from .hamiltonian import assemble
from .spectrum import eigendecompose, eigenvalues_of
from .thermo import check_beta, grand_potential_terms, is_zero_temperature

GAUSS_ORDER = 8
MAX_NODES = 2 ** 14
CONTOUR_TOL = 1e-9
COLLISION_TOL = 1e-8


def _clog1p(e):
    """Complex ``log(1 + e)`` accurate for small ``|e|`` (numpy's forms ``1 + e`` first)."""
    a, b = e.real, e.imag
    return 0.5 * np.log1p(a * (2.0 + a) + b * b) + 1j * np.arctan2(b, 1.0 + a)


def gbeta_analytic(z, beta, mu):
    """Analytic continuation of ``g^beta(z; mu) = (2/beta) log(1 - f_beta(z - mu))``.

    Right of ``mu`` this is ``-(2/beta) log(1 + exp(-beta w))`` with
    ``w = z - mu``; left of ``mu`` the branch-corrected value
    ``log(1 - f) + 2 k pi i`` equals ``beta w - log(1 + exp(beta w))``.
    At zero temperature: ``2 w`` left of ``mu`` and 0 right of it.

    Raises
    ------
    DomainError
        On the cut ``mu + i r`` with ``|r| >= pi/beta`` (finite beta) or on
        ``Re z = mu`` (zero temperature).
    """
    beta = check_beta(beta)
    z = np.asarray(z, dtype=complex)
    w = z - mu
    if is_zero_temperature(beta):
        if np.any(w.real == 0):
            raise DomainError("g^inf is undefined on Re z = mu")
        out = np.where(w.real < 0, 2.0 * w, 0.0 + 0.0j)
    else:
        if np.any((w.real == 0) & (np.abs(w.imag) >= math.pi / beta)):
            raise DomainError("z lies on the branch cut of g^beta")
        left = w.real < 0
        x = beta * w
        xr = np.where(left, x, -x)
        # both branches need log(1 + exp(y)) with Re y <= 0
        soft = _clog1p(np.exp(xr))
        out = (2.0 / beta) * np.where(left, x - soft, -soft)
    return complex(out) if out.ndim == 0 else out


@dataclass(frozen=True, eq=False)
class Contour:
    """Gauss-Legendre panels on a positively oriented axis-aligned rectangle.

    ``weights`` already include ``dz`` and the ``-1/(2 pi i)`` prefactor.
    """

    side: str
    re_min: float
    re_max: float
    half_height: float
    panels: tuple
    nodes: np.ndarray
    weights: np.ndarray
    clearance: float

    @property
    def size(self):
        return len(self.nodes)

    def refined(self, spectrum, mu):
        return _rectangle(self.side, self.re_min, self.re_max, self.half_height,
                          tuple(2 * p for p in self.panels), spectrum, mu)


def _rectangle(side, a, b, h, panels, spectrum, mu):
    x, wx = np.polynomial.legendre.leggauss(GAUSS_ORDER)
    corners = [complex(a, -h), complex(b, -h), complex(b, h), complex(a, h)]
    nodes, weights = [], []
    for e in range(4):
        z0, z1 = corners[e], corners[(e + 1) % 4]
        n = panels[e]
        edges = np.linspace(0.0, 1.0, n + 1)
        for p in range(n):
            s0, s1 = edges[p], edges[p + 1]
            s = 0.5 * (s0 + s1) + 0.5 * (s1 - s0) * x
            nodes.append(z0 + (z1 - z0) * s)
            weights.append((z1 - z0) * 0.5 * (s1 - s0) * wx)
    nodes = np.concatenate(nodes)
    weights = np.concatenate(weights) * (-1.0 / (2j * math.pi))
    lam = eigenvalues_of(spectrum)
    dist = np.min(np.abs(nodes[:, None] - lam[None, :]), axis=1)
    clearance = float(min(dist.min(), np.abs(nodes.real - mu).min()))
    return Contour(side, a, b, h, panels, nodes, weights, clearance)


def build_contours(spec, mu, beta, *, margin=1.0):
    """Rectangles around the spectrum below and above ``mu``.

    With ``d = dist(mu, sigma)`` the lower rectangle spans real parts
    ``[lambda_min - margin, mu - d/2]``, the upper one
    ``[mu + d/2, lambda_max + margin]``; both have half-height ``d/2``.
    Every node therefore keeps distance ``>= d/2`` from the spectrum and from
    the line ``Re z = mu``.

    Raises
    ------
    CollisionError
        If ``d < 1e-8``.
    """
    check_beta(beta)
    lam = eigenvalues_of(spec)
    d = float(np.min(np.abs(lam - mu)))
    if d < COLLISION_TOL:
        raise CollisionError(level=mu, eigenvalue=float(lam[np.argmin(np.abs(lam - mu))]))
    h = 0.5 * d
    out = []
    for side, a, b in (("minus", min(lam[0], mu) - margin, mu - h),
                       ("plus", mu + h, max(lam[-1], mu) + margin)):
        panels = (max(1, math.ceil((b - a) / h)), 2, max(1, math.ceil((b - a) / h)), 2)
        out.append(_rectangle(side, a, b, h, panels, lam, mu))
    return tuple(out)


@dataclass(frozen=True, eq=False)
class SiteEnergyTable:
    """Per-site grand-potential contributions."""

    values: np.ndarray
    method: str
    beta: float
    mu: float
    nodes: int = 0

    @property
    def total(self):
        return float(np.sum(self.values))


def _site_weights(spec, nb):
    psi = spec.eigenvectors
    n_sites = psi.shape[0] // nb
    return (psi ** 2).reshape(n_sites, nb, -1).sum(axis=1)


def site_energies_eigen(spec, beta, mu, nb=1):
    """All site energies ``G_l = sum_s g(lambda_s) sum_a psi_s[la]^2``."""
    g = grand_potential_terms(spec.eigenvalues, beta, mu)
    return SiteEnergyTable(_site_weights(spec, nb) @ g, "eigen", beta, mu)


def site_energy_eigen(spec, beta, mu, site, nb=1):
    return float(site_energies_eigen(spec, beta, mu, nb).values[site])


def _contour_sum(mat, contour, beta, mu, rows, nb):
    n = mat.shape[0]
    rhs = np.zeros((n, len(rows)), dtype=complex)
    rhs[rows, np.arange(len(rows))] = 1.0
    g = gbeta_analytic(contour.nodes, beta, mu)
    acc = np.zeros(len(rows), dtype=complex)
    eye = np.eye(n)
    for z, w, gz in zip(contour.nodes, contour.weights, g):
        if gz == 0:
            continue
        try:
            lu = scipy.linalg.lu_factor(mat - z * eye, check_finite=False)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise NumericalFailure(f"singular resolvent solve at z={z}") from exc
        x = scipy.linalg.lu_solve(lu, rhs, check_finite=False)
        acc += w * gz * x[rows, np.arange(len(rows))]
    return acc.reshape(-1, nb).sum(axis=1)


def site_energies_contour(h, contours, beta, mu, sites=None, *, tol=CONTOUR_TOL):
    """Site energies from the contour integral of the diagonal resolvent.

    Panel counts are doubled until two successive results differ by less
    than ``tol`` (scaled by ``max(1, |G|)``).

    Raises
    ------
    ConvergenceError
        If more than ``2**14`` nodes would be needed.
    """
    beta = check_beta(beta)
    mat = h.matrix
    nb = h.nb
    sites = np.arange(h.host.n_sites) if sites is None else np.atleast_1d(sites)
    rows = (sites[:, None] * nb + np.arange(nb)[None, :]).ravel()
    lam = np.linalg.eigvalsh(mat)
    active = [c for c in contours if not (is_zero_temperature(beta) and c.side == "plus")]

    def total_nodes(cs):
        return sum(c.size for c in cs)

    prev = sum(_contour_sum(mat, c, beta, mu, rows, nb) for c in active)
    while True:
        if total_nodes(active) * 2 > MAX_NODES:
            raise ConvergenceError("contour quadrature did not converge within 2^14 nodes")
        active = [c.refined(lam, mu) for c in active]
        cur = sum(_contour_sum(mat, c, beta, mu, rows, nb) for c in active)
        if np.max(np.abs(cur - prev)) < tol * max(1.0, float(np.max(np.abs(cur)))):
            break
        prev = cur
    return SiteEnergyTable(cur.real, "contour", beta, mu, nodes=total_nodes(active))


def site_energy_contour(h, contours, beta, mu, site, *, tol=CONTOUR_TOL):
    return float(site_energies_contour(h, contours, beta, mu, [site], tol=tol).values[0])


def grand_potential_difference(cell, u, model, beta, mu):
    """``sum_l [G_l(u) - G_l(0)]`` on a torus (equal to ``G(u) - G(0)``)."""
    u = cell.check_displacement(u)
    nb = model.nb
    tabs = []
    for v in (u, cell.zero_displacement()):
        spec = eigendecompose(assemble(cell, v, model))
        tabs.append(site_energies_eigen(spec, beta, mu, nb).values)
    return float(np.sum(tabs[0] - tabs[1]))


@dataclass(frozen=True, eq=False)
class LocalityProfile:
    """Resolvent column magnitudes against distance with an exponential fit."""

    site: int
    z: complex
    distances: np.ndarray
    magnitudes: np.ndarray
    gamma_fit: float
    prefactor: float
    r2: float


def locality_profile(h, z, site):
    """Decay of ``|[(H - z)^{-1}]_{k, site}|`` with the (torus) distance ``|k - site|``.

    The magnitude per site ``k`` is the largest entry of the orbital block.
    The rate is fitted by least squares on ``log`` magnitude over entries
    above ``1e-14``.
    """
    mat = h.matrix
    nb = h.nb
    lam = np.linalg.eigvalsh(mat)
    if np.min(np.abs(lam - z)) == 0:
        raise NumericalFailure("z lies on the spectrum")
    n = mat.shape[0]
    rhs = np.zeros((n, nb), dtype=complex)
    rhs[site * nb + np.arange(nb), np.arange(nb)] = 1.0
    try:
        col = scipy.linalg.solve(mat - z * np.eye(n), rhs)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericalFailure(f"singular resolvent solve at z={z}") from exc
    mags = np.abs(col).reshape(-1, nb, nb).max(axis=(1, 2))
    dist = h.host.reference_distances(site)
    keep = mags > 1e-14
    gamma, pref, r2 = math.nan, math.nan, math.nan
    if np.count_nonzero(keep) >= 2 and np.ptp(dist[keep]) > 0:
        slope, icept = np.polyfit(dist[keep], np.log(mags[keep]), 1)
        fit = icept + slope * dist[keep]
        y = np.log(mags[keep])
        ss = np.sum((y - y.mean()) ** 2)
        r2 = float(1.0 - np.sum((y - fit) ** 2) / ss) if ss > 0 else 1.0
        gamma, pref = float(-slope), float(np.exp(icept))
    return LocalityProfile(site, complex(z), dist, mags, gamma, pref, r2)
