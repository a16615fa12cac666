"""Energies, analytic forces, geometry relaxation and stability constants.

Both ensembles share one gradient formula: with the spin-summed density
matrix ``F = 2 f_beta(H - level)`` the energy gradient is ``tr(F dH/du)``.
In the grand-canonical case ``level = mu``; in the canonical case
``level = eps_F(u)``, whose variation drops out because the particle
number is fixed (the entropy and Fermi-level terms cancel).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import (AdmissibilityError, CollisionError, ConvergenceError, NumericalFailure,
                     ValidationError)
from .hamiltonian import assemble, derivative_contraction
from .lattice import SeminormConfig, check_admissible, gram_matrix
from .spectrum import eigendecompose
from .thermo import (INF, check_no_collision, gap_distance, grand_potential, helmholtz_energy,
                     is_zero_temperature, occupations, solve_fermi_level)

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Evaluation:
    """Energy, gradient and spectral data at one displacement."""

    energy: float
    gradient: np.ndarray
    level: float
    gap: float
    eigenvalues: np.ndarray
    fermi: object = None

    @property
    def forces(self):
        return -self.gradient


def evaluate(cell, u, model, ensemble, *, gradient=True):
    """Ensemble energy (and gradient) at ``u``.

    GCE: ``G = sum_s g^beta(lambda_s; mu)``.  CE: ``E = sum_s e^beta(lambda_s; eps_F(u))``.

    Raises
    ------
    CollisionError
        At zero temperature when the level lies on the spectrum (gradient
        requested) or, in the GCE, always.
    """
    u = cell.check_displacement(u)
    spec = eigendecompose(assemble(cell, u, model))
    lam = spec.eigenvalues
    beta = ensemble.beta
    fermi = None
    if ensemble.kind == "GCE":
        level = ensemble.mu
        energy = grand_potential(spec, beta, level)
    else:
        fermi = solve_fermi_level(spec, ensemble.n_electrons, beta)
        level = fermi.level
        energy = helmholtz_energy(spec, beta, level)
    grad = None
    if gradient:
        if is_zero_temperature(beta):
            check_no_collision(lam, level)
        occ = 2.0 * occupations(lam, beta, level)
        psi = spec.eigenvectors
        rho = (psi * occ) @ psi.T
        grad = derivative_contraction(cell, u, model, rho)
    return Evaluation(energy, grad, level, gap_distance(lam, level), lam, fermi)


def energy(cell, u, model, ensemble):
    return evaluate(cell, u, model, ensemble, gradient=False).energy


def forces(cell, u, model, ensemble):
    """Per-site forces ``F_m = -d(energy)/du(m)``, shape ``(n_sites, d)``."""
    return evaluate(cell, u, model, ensemble).forces


@dataclass(frozen=True, eq=False)
class RelaxProblem:
    """Local minimisation of the ensemble energy on a torus."""

    cell: object
    model: object
    ensemble: object
    u0: np.ndarray | None = None
    admissibility: float = 0.5
    tolerance: float = 1e-8
    max_iterations: int = 2000
    memory: int = 10
    max_step: float = 0.1

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValidationError("force tolerance must be positive")
        if not 0 < self.admissibility <= 1:
            raise ValidationError("admissibility must lie in (0, 1]")
        object.__setattr__(self, "u0", self.cell.check_displacement(self.u0))

    def replace(self, **kw):
        fields = dict(cell=self.cell, model=self.model, ensemble=self.ensemble, u0=self.u0,
                      admissibility=self.admissibility, tolerance=self.tolerance,
                      max_iterations=self.max_iterations, memory=self.memory,
                      max_step=self.max_step)
        fields.update(kw)
        return RelaxProblem(**fields)


@dataclass(frozen=True)
class TrajectoryPoint:
    iteration: int
    energy: float
    force_norm: float
    gap: float
    level: float


@dataclass(frozen=True, eq=False)
class RelaxResult:
    displacement: np.ndarray
    energy: float
    level: float
    iterations: int
    force_norm: float
    gap: float
    eigenvalues: np.ndarray
    trajectory: list = field(default_factory=list)
    stability: float | None = None


def _noise(e):
    return 64.0 * np.finfo(float).eps * max(1.0, abs(e))


def relax_geometry(problem):
    """L-BFGS with backtracking; steps leaving the admissible set are shortened.

    A trial step is accepted on sufficient decrease (Armijo), or, once energy
    differences reach rounding level, when the energy does not rise beyond
    rounding and the force norm decreases.

    Raises
    ------
    AdmissibilityError
        If ``u0`` is not admissible.
    ConvergenceError
        On the iteration cap or a failed line search.
    CollisionError
        If the zero-temperature level collides with the spectrum at an
        accepted iterate.
    """
    cell, model, ens = problem.cell, problem.model, problem.ensemble
    shape = (cell.n_sites, cell.dim)
    x = problem.u0.ravel().copy()
    rep = check_admissible(cell, x.reshape(shape), problem.admissibility)
    if not rep.admissible:
        raise AdmissibilityError("initial displacement is not admissible", worst=rep.worst)

    def ev(v):
        try:
            return evaluate(cell, v.reshape(shape), model, ens)
        except CollisionError as exc:
            exc.iterate = v.reshape(shape).copy()
            raise

    cur = ev(x)
    g = cur.gradient.ravel()
    s_hist, y_hist = [], []
    traj = [TrajectoryPoint(0, cur.energy, float(np.abs(g).max()), cur.gap, cur.level)]
    it = 0
    while np.abs(g).max() > problem.tolerance:
        if it >= problem.max_iterations:
            raise ConvergenceError(f"relaxation hit the iteration cap ({problem.max_iterations})",
                                   iterate=x.reshape(shape).copy())
        it += 1
        # two-loop recursion
        q = g.copy()
        alphas = []
        for s, y in zip(reversed(s_hist), reversed(y_hist)):
            a = (s @ q) / (y @ s)
            alphas.append(a)
            q -= a * y
        if s_hist:
            q *= (s_hist[-1] @ y_hist[-1]) / (y_hist[-1] @ y_hist[-1])
        for (s, y), a in zip(zip(s_hist, y_hist), reversed(alphas)):
            q += s * (a - (y @ q) / (y @ s))
        p = -q
        if p @ g >= 0:
            s_hist.clear()
            y_hist.clear()
            p = -g
        big = np.abs(p).max()
        step = min(1.0, problem.max_step / big) if big > 0 else 1.0
        slope = p @ g
        accepted = None
        for _ in range(60):
            trial = x + step * p
            if not check_admissible(cell, trial.reshape(shape), problem.admissibility).admissible:
                step *= 0.5
                continue
            try:
                new = ev(trial)
            except CollisionError:
                step *= 0.5
                continue
            g_new = new.gradient.ravel()
            armijo = new.energy <= cur.energy + 1e-4 * step * slope
            flat = (new.energy <= cur.energy + _noise(cur.energy)
                    and np.abs(g_new).max() < np.abs(g).max())
            if armijo or flat:
                accepted = (trial, new, g_new)
                break
            step *= 0.5
        if accepted is None:
            raise ConvergenceError("line search failed", iterate=x.reshape(shape).copy())
        trial, new, g_new = accepted
        s, y = trial - x, g_new - g
        if s @ y > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            s_hist.append(s)
            y_hist.append(y)
            if len(s_hist) > problem.memory:
                s_hist.pop(0)
                y_hist.pop(0)
        x, cur, g = trial, new, g_new
        traj.append(TrajectoryPoint(it, cur.energy, float(np.abs(g).max()), cur.gap, cur.level))
        log.debug("iter %d energy %.16g |F| %.3e", it, cur.energy, np.abs(g).max())
    return RelaxResult(x.reshape(shape), cur.energy, cur.level, it, float(np.abs(g).max()),
                       cur.gap, cur.eigenvalues, traj)


def hessian(cell, u, model, ensemble, step=1e-5):
    """Symmetrised central-difference Hessian of the analytic gradient."""
    u = cell.check_displacement(u)
    n = u.size
    hess = np.zeros((n, n))
    flat = u.ravel()
    for k in range(n):
        e = np.zeros(n)
        e[k] = step
        gp = evaluate(cell, (flat + e).reshape(u.shape), model, ensemble).gradient.ravel()
        gm = evaluate(cell, (flat - e).reshape(u.shape), model, ensemble).gradient.ravel()
        hess[:, k] = (gp - gm) / (2.0 * step)
    return 0.5 * (hess + hess.T)


def translation_complement(n_sites, dim):
    """Orthonormal basis of the complement of the uniform translations."""
    t = np.kron(np.ones((n_sites, 1)), np.eye(dim)) / math.sqrt(n_sites)
    return scipy.linalg.null_space(t.T)


def stability_constant(cell, u, model, ensemble, cfg=SeminormConfig(), *, step=1e-5,
                       stationarity_tol=1e-6, return_hessian=False):
    """Smallest generalised eigenvalue of (Hessian, stencil Gram matrix) off translations.

    Raises
    ------
    ValidationError
        If ``u`` is not stationary.
    NumericalFailure
        If the projected Gram matrix is not positive definite.
    """
    u = cell.check_displacement(u)
    f = evaluate(cell, u, model, ensemble).gradient
    if np.abs(f).max() > stationarity_tol:
        raise ValidationError(f"displacement is not stationary (|F| = {np.abs(f).max():.3e})")
    hess = hessian(cell, u, model, ensemble, step)
    gram = gram_matrix(cell, cfg)
    q = translation_complement(cell.n_sites, cell.dim)
    hq = q.T @ hess @ q
    gq = q.T @ gram @ q
    gq = 0.5 * (gq + gq.T)
    if np.linalg.eigvalsh(gq).min() <= 0:
        raise NumericalFailure("projected Gram matrix is not positive definite")
    c0 = float(scipy.linalg.eigh(hq, gq, eigvals_only=True)[0])
    return (c0, hess) if return_hessian else c0


__all__ = ["Evaluation", "RelaxProblem", "RelaxResult", "TrajectoryPoint", "energy", "evaluate",
           "forces", "hessian", "relax_geometry", "stability_constant", "translation_complement",
           "INF"]
