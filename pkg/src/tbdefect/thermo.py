"""Fermi-Dirac statistics, Fermi levels, free energies and grand potentials.

Zero temperature is ``beta = math.inf`` and always takes its own branch
(step functions), never a large-but-finite evaluation.  Electron counts
include the spin factor 2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import CollisionError, ConvergenceError, ValidationError
from .spectrum import eigenvalues_of

INF = math.inf
EIG_TOL = 1e-8
MAX_BISECTION = 200


def is_zero_temperature(beta):
    return beta == INF


def check_beta(beta):
    beta = float(beta)
    if not (beta > 0):
        raise ValidationError("beta must be positive or inf")
    return beta


def _equal(lam, tau):
    """Zero-temperature equality test ``|lam - tau| <= 1e-8 max(1, |lam|)``."""
    return np.abs(lam - tau) <= EIG_TOL * np.maximum(1.0, np.abs(lam))


def _softplus(x):
    """``log(1 + exp(x))`` without overflow."""
    return np.logaddexp(0.0, x)


def fermi_dirac(beta, eps):
    """Occupation ``f = 1/(1 + exp(beta eps))`` and entropy ``f log f + (1-f) log(1-f)``.

    Returns
    -------
    f, s : ndarray or float
    """
    beta = check_beta(beta)
    eps = np.asarray(eps, dtype=float)
    if is_zero_temperature(beta):
        f = np.where(eps < 0, 1.0, np.where(eps > 0, 0.0, 0.5))
        s = np.where(eps == 0, -math.log(2.0), 0.0)
    else:
        x = beta * eps
        f = expit(-x)
        # log f = -softplus(x), log(1-f) = -softplus(-x); 1-f = expit(x) avoids cancellation
        s = -(f * _softplus(x) + expit(x) * _softplus(-x))
    if f.ndim == 0:
        return float(f), float(s)
    return f, s


def occupations(eigs, beta, level):
    """Occupations ``f_beta(lambda - level)``; ties count 1/2 at zero temperature."""
    lam = np.asarray(eigs, dtype=float)
    if is_zero_temperature(check_beta(beta)):
        return np.where(_equal(lam, level), 0.5, np.where(lam < level, 1.0, 0.0))
    return expit(-beta * (lam - level))


def particle_number(spec, beta, tau):
    """``N = 2 sum f_beta(lambda - tau)``; at zero temperature ``2#{lambda<tau} + #{lambda=tau}``."""
    lam = eigenvalues_of(spec)
    return float(2.0 * np.sum(occupations(lam, beta, tau)))


@dataclass(frozen=True)
class FermiSolution:
    """Fermi level with its zero-temperature case tag and particle-number residual."""

    level: float
    case: str | None
    residual: float
    lower: float | None = None
    upper: float | None = None


def _distinct(lam):
    """Representative eigenvalues of zero-temperature equality classes."""
    reps = [lam[0]]
    for x in lam[1:]:
        if not _equal(reps[-1], x):
            reps.append(x)
    return np.array(reps)


def solve_fermi_level(spec, n_electrons, beta):
    """Solve ``N(eps_F) = N_e``.

    Finite temperature: bisection to machine resolution on the monotone
    particle-number residual.  Zero
    temperature: with ``lo = max{eps in sigma : N(eps) <= N_e}`` and
    ``hi = min{eps in sigma : N(eps) >= N_e}`` the level is ``lo``, the
    midpoint or ``hi`` according to whether ``N`` at the midpoint exceeds,
    equals or falls short of ``N_e``.

    Returns
    -------
    FermiSolution
    """
    lam = eigenvalues_of(spec)
    beta = check_beta(beta)
    n_e = float(n_electrons)
    if not 0 < n_e < 2 * len(lam):
        raise ValidationError(f"electron number {n_e} outside (0, {2 * len(lam)})")

    if is_zero_temperature(beta):
        reps = _distinct(lam)
        counts = np.array([particle_number(lam, INF, e) for e in reps])
        below = reps[counts <= n_e + 1e-9]
        above = reps[counts >= n_e - 1e-9]
        hi = float(above.min()) if above.size else float(reps[-1])
        lo = float(below.max()) if below.size else hi
        if not above.size:
            hi = lo
        mid = 0.5 * (lo + hi)
        n_mid = particle_number(lam, INF, mid)
        if n_mid > n_e + 1e-9:
            level, case = lo, "lower-edge"
        elif n_mid < n_e - 1e-9:
            level, case = hi, "upper-edge"
        else:
            level, case = mid, "midpoint"
        res = abs(particle_number(lam, INF, level) - n_e)
        return FermiSolution(level, case, res, lo, hi)

    # N(tau) - N_e = 2 [sum_{s>=k} f_s - sum_{s<k} (1 - f_s)] - frac keeps full
    # relative accuracy deep inside a gap, where N(tau) is flat
    k = min(int(n_e // 2), len(lam))
    frac = n_e - 2 * k

    def resid(tau):
        x = beta * (lam - tau)
        return 2.0 * (np.sum(expit(-x[k:])) - np.sum(expit(x[:k]))) - frac

    a, b = float(lam[0]) - 1.0, float(lam[-1]) + 1.0
    step = 1.0
    while resid(a) > 0:
        step *= 2.0
        a = float(lam[0]) - step
    step = 1.0
    while resid(b) < 0:
        step *= 2.0
        b = float(lam[-1]) + step
    for _ in range(MAX_BISECTION):
        m = 0.5 * (a + b)
        if m == a or m == b:
            break
        if resid(m) < 0:
            a = m
        else:
            b = m
    level = 0.5 * (a + b)
    res = abs(resid(level))
    if res > 1e-10:
        raise ConvergenceError(f"Fermi-level bisection residual {res:.3e} above 1e-10")
    return FermiSolution(level, None, res)


def helmholtz_terms(eigs, beta, eps_f):
    """Per-eigenvalue ``2 eps_F f + (2/beta) log(1 - f)`` (zero T: ``2 lambda`` below, ``lambda`` at eps_F)."""
    lam = np.asarray(eigs, dtype=float)
    if is_zero_temperature(check_beta(beta)):
        return np.where(_equal(lam, eps_f), lam, np.where(lam < eps_f, 2.0 * lam, 0.0))
    x = beta * (lam - eps_f)
    return 2.0 * eps_f * expit(-x) - (2.0 / beta) * _softplus(-x)


def helmholtz_energy(spec, beta, eps_f):
    """Free energy ``sum_s e^beta(lambda_s; eps_F)``."""
    return float(np.sum(helmholtz_terms(eigenvalues_of(spec), beta, eps_f)))


def check_no_collision(eigs, level):
    lam = np.asarray(eigs, dtype=float)
    hit = _equal(lam, level)
    if np.any(hit):
        raise CollisionError(level=level, eigenvalue=float(lam[hit][0]))


def grand_potential_terms(eigs, beta, mu):
    """Per-eigenvalue ``(2/beta) log(1 - f_beta(lambda - mu))``; zero T: ``2 (lambda - mu)`` below mu.

    Raises
    ------
    CollisionError
        At zero temperature when ``mu`` is within tolerance of an eigenvalue.
    """
    lam = np.asarray(eigs, dtype=float)
    if is_zero_temperature(check_beta(beta)):
        check_no_collision(lam, mu)
        return np.where(lam < mu, 2.0 * (lam - mu), 0.0)
    return -(2.0 / beta) * _softplus(-beta * (lam - mu))


def grand_potential(spec, beta, mu):
    """Grand potential ``sum_s g^beta(lambda_s; mu)``."""
    return float(np.sum(grand_potential_terms(eigenvalues_of(spec), beta, mu)))


def gap_distance(eigs, level):
    """``dist(level, sigma)``."""
    return float(np.min(np.abs(np.asarray(eigs, dtype=float) - level)))


@dataclass(frozen=True)
class Ensemble:
    """Canonical (fixed ``n_electrons``) or grand-canonical (fixed ``mu``) ensemble."""

    kind: str
    beta: float
    n_electrons: float | None = None
    mu: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "beta", check_beta(self.beta))
        if self.kind == "CE":
            if self.n_electrons is None or not self.n_electrons > 0:
                raise ValidationError("canonical ensemble needs a positive electron number")
        elif self.kind == "GCE":
            if self.mu is None or not math.isfinite(self.mu):
                raise ValidationError("grand-canonical ensemble needs a finite mu")
        else:
            raise ValidationError(f"ensemble kind must be 'CE' or 'GCE', got {self.kind!r}")

    @classmethod
    def canonical(cls, n_electrons, beta=INF):
        return cls("CE", beta, n_electrons=float(n_electrons))

    @classmethod
    def grand_canonical(cls, mu, beta=INF):
        return cls("GCE", beta, mu=float(mu))

    def with_beta(self, beta):
        return Ensemble(self.kind, beta, self.n_electrons, self.mu)

    def to_dict(self):
        out = {"kind": self.kind, "beta": "inf" if is_zero_temperature(self.beta) else self.beta}
        if self.kind == "CE":
            out["n_electrons"] = self.n_electrons
        else:
            out["mu"] = self.mu
        return out
