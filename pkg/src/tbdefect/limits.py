"""Zero-temperature and large-cell convergence studies.

Every study returns plain result objects; :mod:`tbdefect.report` turns them
into CSV/JSON.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalFailure, ValidationError
from .hamiltonian import assemble
from .lattice import Configuration, SeminormConfig, build_torus, stencil_seminorm
from .relax import RelaxProblem, evaluate, relax_geometry
from .sitegreen import grand_potential_difference
from .spectrum import (band_structure, defect_state_count, eigendecompose,
                       torus_reference_spectrum)
from .thermo import (EIG_TOL, INF, Ensemble, helmholtz_energy, is_zero_temperature,
                     particle_number, solve_fermi_level)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RateFit:
    rate: float
    prefactor: float
    r2: float
    n_points: int


def fit_rate(values, errors, model="exponential", floor=0.0):
    """Least-squares fit of ``log err`` against ``x`` (exponential) or ``log x`` (algebraic).

    Fits ``err = C exp(-rate x)`` or ``err = C x^(-rate)`` over errors above
    ``floor`` (and strictly positive).

    Raises
    ------
    ValidationError
        With fewer than three usable points.
    """
    x = np.asarray(values, dtype=float)
    e = np.asarray(errors, dtype=float)
    keep = np.isfinite(x) & np.isfinite(e) & (e > max(floor, 0.0))
    if np.count_nonzero(keep) < 3:
        raise ValidationError("fit_rate needs at least 3 positive errors")
    if model == "exponential":
        xs = x[keep]
    elif model == "algebraic":
        xs = np.log(x[keep])
    else:
        raise ValidationError(f"unknown rate model {model!r}")
    y = np.log(e[keep])
    slope, icept = np.polyfit(xs, y, 1)
    resid = y - (icept + slope * xs)
    ss = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum(resid ** 2) / ss if ss > 0 else 1.0
    return RateFit(float(-slope), float(math.exp(icept)), float(r2), int(np.count_nonzero(keep)))


def _try_fit(values, errors, model, floor):
    try:
        return fit_rate(values, errors, model, floor)
    except ValidationError:
        return None


@dataclass(frozen=True, eq=False)
class StudySetup:
    """Crystal, model and (optional) defect shared by the sweeps."""

    crystal: object
    model: object
    defect: object = None

    def cell(self, n_cells):
        """Torus of ``n_cells`` repeats along every lattice vector."""
        reps = np.broadcast_to(np.atleast_1d(n_cells), (self.crystal.dim,))
        return build_torus(self.crystal, self.crystal.cell_matrix @ np.diag(reps.astype(float)),
                           self.defect)


@dataclass(frozen=True, eq=False)
class SweepPlan:
    """Parameter sweep around a relaxation template.

    For ``axis == "radius"`` the values are cell counts and ``setup`` builds
    the tori; the template cell is then ignored.
    """

    axis: str
    values: tuple
    template: RelaxProblem
    setup: StudySetup | None = None
    reference: object = None

    def __post_init__(self):
        vals = tuple(float(v) if self.axis == "beta" else int(v) for v in self.values)
        if self.axis not in ("beta", "radius"):
            raise ValidationError("sweep axis must be 'beta' or 'radius'")
        if len(vals) < 4:
            raise ValidationError("a sweep needs at least 4 values")
        if any(b <= a for a, b in zip(vals, vals[1:])):
            raise ValidationError("sweep values must be strictly ascending")
        if self.axis == "radius" and self.setup is None:
            raise ValidationError("radius sweeps need a StudySetup")
        object.__setattr__(self, "values", vals)


@dataclass(eq=False)
class ConvergenceSeries:
    """Errors along a sweep with fitted rates and pass/fail gates."""

    axis: str
    values: list
    errors: dict
    fits: dict = field(default_factory=dict)
    gates: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    complete: bool = True
    failure: str | None = None


def _strictly_decreasing(x):
    x = np.asarray(x, dtype=float)
    return bool(len(x) >= 2 and np.all(np.diff(x) < 0))


def _nonincreasing(x):
    x = np.asarray(x, dtype=float)
    return bool(len(x) >= 2 and np.all(np.diff(x) <= 0))


def sweep_beta(plan, cfg=SeminormConfig(), *, floor=1e-12):
    """Relax at each ``beta`` (warm start from ``beta = inf``) and compare with ``beta = inf``.

    Errors: ``disp = ||D(u_beta - u_inf)||``, ``energy`` (grand-potential
    difference functional for the GCE, free energy for the CE) and, for the
    CE, ``fermi = |eps_F^beta - eps_F^inf|``.  Each is fitted by an
    exponential over errors above ``floor``; the displacement rate is gated
    against ``d/12`` with ``d = dist(level, sigma(H(u_inf)))``.
    """
    tmpl = plan.template
    cell, model = tmpl.cell, tmpl.model
    ens_inf = tmpl.ensemble.with_beta(INF)
    ref = plan.reference or relax_geometry(tmpl.replace(ensemble=ens_inf))
    d = float(ref.gap)
    names = ["disp", "energy"] + (["fermi"] if tmpl.ensemble.kind == "CE" else [])
    series = ConvergenceSeries("beta", [], {k: [] for k in names})
    series.meta.update(gap_distance=d, rate_threshold=d / 12.0, reference_level=ref.level,
                       ensemble=tmpl.ensemble.kind)

    def energy_of(u, ens):
        if ens.kind == "GCE":
            return grand_potential_difference(cell, u, model, ens.beta, ens.mu)
        spec = eigendecompose(assemble(cell, u, model))
        fermi = solve_fermi_level(spec, ens.n_electrons, ens.beta)
        return helmholtz_energy(spec, ens.beta, fermi.level)

    e_ref = energy_of(ref.displacement, ens_inf)
    for beta in plan.values:
        ens = tmpl.ensemble.with_beta(beta)
        try:
            res = ref if is_zero_temperature(beta) else relax_geometry(
                tmpl.replace(ensemble=ens, u0=ref.displacement))
        except NumericalFailure as exc:
            series.complete, series.failure = False, f"beta={beta}: {exc}"
            break
        series.values.append(beta)
        series.errors["disp"].append(stencil_seminorm(cell, res.displacement - ref.displacement, cfg))
        series.errors["energy"].append(abs(energy_of(res.displacement, ens) - e_ref))
        if "fermi" in series.errors:
            series.errors["fermi"].append(abs(res.level - ref.level))
        log.info("beta=%g disp=%.3e", beta, series.errors["disp"][-1])

    vals = [v for v in series.values if math.isfinite(v)]
    for k, errs in series.errors.items():
        errs = errs[:len(vals)]
        series.fits[k] = _try_fit(vals, errs, "exponential", floor)
        series.gates[f"{k}_decreasing"] = _strictly_decreasing([e for e in errs if e > floor])
    fit = series.fits["disp"]
    series.gates["disp_rate"] = bool(fit is not None and fit.rate >= d / 12.0)
    e = series.errors["disp"]
    series.gates["disp_drop_100"] = bool(len(e) >= 2 and e[-1] <= e[0] / 100.0)
    series.meta["reference"] = ref
    return series


def _core_mapping(small, large):
    """Index pairs of sites of ``small`` in ``B_{R/2}`` and their copies in ``large``."""
    key = {tuple(np.round(p, 6)): i for i, p in enumerate(large.positions)}
    core = np.linalg.norm(small.positions, axis=1) < 0.5 * small.domain_radius
    idx_s = np.nonzero(core)[0]
    idx_l = np.array([key[tuple(np.round(small.positions[i], 6))] for i in idx_s], dtype=int)
    return idx_s, idx_l


def core_error(small, u_small, large, u_large, cfg=SeminormConfig()):
    """Stencil seminorm of ``u_small - u_large`` over the core ``B_{R/2}`` of ``small``."""
    idx_s, idx_l = _core_mapping(small, large)
    sub = Configuration(small.crystal, None, small.positions[idx_s],
                        tuple(small.species[i] for i in idx_s), small.cells[idx_s],
                        small.basis_index[idx_s])
    return stencil_seminorm(sub, u_small[idx_s] - u_large[idx_l], cfg)


def _gap_states(eigs, bands, mu, delta):
    gap = bands.gap_containing(mu)
    if gap is None:
        return np.zeros(0)
    lam = np.asarray(eigs)
    inside = (lam > gap.lower + delta) & (lam < gap.upper - delta)
    return lam[inside]


def sweep_radius(plan, mu, cfg=SeminormConfig(), *, n_k=64, delta=0.05):
    """Relax the grand-canonical problem on growing tori.

    Errors: ``disp_next`` compares consecutive sizes on the core of the
    smaller torus, ``disp_largest`` compares with the largest torus, and
    ``drift`` is the largest change of the gap-state eigenvalues (farther
    than ``delta`` from the reference bands) between consecutive sizes.  ``disp_largest`` is fitted algebraically in the
    cell count.
    """
    setup = plan.setup
    bands = band_structure(setup.crystal, setup.model, n_k)
    if bands.gap_containing(mu) is None:
        raise ValidationError("mu does not lie in a reference band gap")
    beta = plan.template.ensemble.beta
    ens = Ensemble.grand_canonical(mu, beta)
    series = ConvergenceSeries("radius", [], {"disp_next": [], "disp_largest": [], "drift": []})
    cells, sols, states = [], [], []
    for n in plan.values:
        cell = setup.cell(n)
        try:
            res = relax_geometry(plan.template.replace(cell=cell, ensemble=ens, u0=None))
        except NumericalFailure as exc:
            series.complete, series.failure = False, f"cells={n}: {exc}"
            break
        cells.append(cell)
        sols.append(res)
        states.append(np.sort(_gap_states(res.eigenvalues, bands, mu, delta)))
        series.values.append(n)
    k = len(sols)
    for i in range(k):
        nxt = core_error(cells[i], sols[i].displacement, cells[i + 1], sols[i + 1].displacement, cfg) \
            if i + 1 < k else math.nan
        big = core_error(cells[i], sols[i].displacement, cells[-1], sols[-1].displacement, cfg)
        if i + 1 < k and len(states[i]) == len(states[i + 1]) and len(states[i]):
            drift = float(np.max(np.abs(states[i] - states[i + 1])))
        else:
            drift = math.nan
        series.errors["disp_next"].append(nxt)
        series.errors["disp_largest"].append(big)
        series.errors["drift"].append(drift)
    series.meta["gap_states"] = [s.tolist() for s in states]
    series.meta["solutions"] = sols
    nxt = [e for e in series.errors["disp_next"] if math.isfinite(e)]
    drift = [e for e in series.errors["drift"] if math.isfinite(e)]
    series.fits["disp_largest"] = _try_fit(series.values[:-1], series.errors["disp_largest"][:-1],
                                           "algebraic", 0.0)
    series.fits["disp_next"] = _try_fit(series.values[:len(nxt)], nxt, "algebraic", 0.0)
    series.gates["disp_next_decreasing"] = _strictly_decreasing(nxt)
    series.gates["drift_decreasing"] = (_strictly_decreasing(drift)
                                        if any(e > 0 for e in drift) else bool(drift))
    series.gates["disp_largest_decreasing"] = _strictly_decreasing(series.errors["disp_largest"][:-1])
    return series


@dataclass(eq=False)
class CELimitRow:
    cells: int
    n_electrons: float
    lower: float
    upper: float
    fermi_level: float
    case: str
    distance_to_limit: float
    ce_force: float
    shifted: dict


@dataclass(eq=False)
class CELimitStudy:
    rows: list
    limit_lower: float
    limit_upper: float
    gates: dict
    complete: bool = True
    failure: str | None = None

    @property
    def limit_midpoint(self):
        return 0.5 * (self.limit_lower + self.limit_upper)


def _same(a, b):
    return abs(a - b) <= EIG_TOL * max(1.0, abs(a))


def _aitken(seq):
    """Aitken delta-squared limit of the last three terms (last term if not contracting)."""
    if len(seq) < 3:
        return float(seq[-1])
    x0, x1, x2 = seq[-3:]
    d1, d2 = x1 - x0, x2 - x1
    if d1 == 0 or not 0 < d2 / d1 < 1:
        return float(x2)
    return float(x2 - d2 * d2 / (d2 - d1))


def ce_limit_study(setup, radii, mu, *, shifts=(-2, -1, 1, 2), beta=INF, tolerance=1e-10,
                   n_k=64, edge_delta=1e-3):
    """Canonical zero-temperature Fermi levels under the ``N_e = N(midpoint)`` policy.

    For each torus: relax the grand-canonical problem at ``mu``, take the
    eigenvalues ``lo < mu < hi`` adjacent to ``mu``, set
    ``N_e = N^inf((lo + hi)/2)`` and solve the canonical Fermi level, also
    for the shifted counts ``N_e + s``.  The limiting gap ``(nu_lo, nu_hi)``
    is estimated from the sequence of adjacent eigenvalues: an adjacent
    eigenvalue of the largest torus within ``edge_delta`` of the reference
    bands is replaced by the exact band edge; a gap state is extrapolated by
    Aitken's delta-squared process over the last three sizes (the torus
    strain shifts it like ``1/R``).
    """
    bands = band_structure(setup.crystal, setup.model, n_k)
    rows, lowers, uppers = [], [], []
    study = CELimitStudy(rows, math.nan, math.nan, {})
    for n in radii:
        cell = setup.cell(n)
        try:
            res = relax_geometry(RelaxProblem(cell, setup.model, Ensemble.grand_canonical(mu, beta),
                                              tolerance=tolerance))
        except NumericalFailure as exc:
            study.complete, study.failure = False, f"cells={n}: {exc}"
            break
        lam = res.eigenvalues
        below, above = lam[lam < mu], lam[lam > mu]
        if not below.size or not above.size:
            raise ValidationError("no eigenvalues bracket mu")
        lo, hi = float(below.max()), float(above.min())
        n_e = particle_number(lam, INF, 0.5 * (lo + hi))
        sol = solve_fermi_level(lam, n_e, INF)
        ce = evaluate(cell, res.displacement, setup.model, Ensemble.canonical(n_e, INF))
        shifted = {}
        for s in shifts:
            if 0 < n_e + s < 2 * len(lam):
                f = solve_fermi_level(lam, n_e + s, INF)
                shifted[int(s)] = (f.level, f.case)
        rows.append(CELimitRow(int(n), n_e, lo, hi, sol.level, sol.case, math.nan,
                               float(np.abs(ce.gradient).max()), shifted))
        lowers.append(lo)
        uppers.append(hi)
    if rows:
        edges = bands.gap_containing(mu)
        limits = []
        for side, seq in ((0, lowers), (1, uppers)):
            if edges is not None and bands.distance([seq[-1]])[0] <= edge_delta:
                limits.append(edges.upper if side else edges.lower)
            else:
                limits.append(_aitken(seq))
        study.limit_lower, study.limit_upper = limits
        nu = study.limit_midpoint
        for r in rows:
            r.distance_to_limit = abs(r.fermi_level - nu)
    dists = [r.distance_to_limit for r in rows]
    study.gates["distance_decreasing"] = _strictly_decreasing(dists)
    study.gates["midpoint_policy"] = all(
        r.case == "midpoint" and _same(r.fermi_level, 0.5 * (r.lower + r.upper)) for r in rows)
    tags = {r.case for r in rows} | {c for r in rows for _, c in r.shifted.values()}
    study.gates["all_case_tags"] = tags >= {"lower-edge", "midpoint", "upper-edge"}
    study.gates["shift_to_edges"] = bool(rows) and all(
        2 in r.shifted and _same(r.shifted[2][0], r.upper)
        and -2 in r.shifted and _same(r.shifted[-2][0], r.lower) for r in rows)
    return study


@dataclass(eq=False)
class PollutionStudy:
    cells: list
    counts: list
    outside: list
    bloch_mismatch: list
    gates: dict


def pollution_study(setup, radii, delta, *, policy="relaxed", mu=None, beta=INF, n_k=64,
                    tolerance=1e-10):
    """Count eigenvalues farther than ``delta`` from the reference bands on growing tori.

    ``policy`` selects the displacement family: ``"zero"`` or ``"relaxed"``
    (grand-canonical minimisers at ``mu``).  For defect-free setups the
    torus spectrum is also compared with the Bloch spectrum at the
    compatible wave vectors (``bloch_mismatch``).
    """
    if policy not in ("zero", "relaxed"):
        raise ValidationError("policy must be 'zero' or 'relaxed'")
    if policy == "relaxed" and mu is None:
        raise ValidationError("relaxed policy needs mu")
    bands = band_structure(setup.crystal, setup.model, n_k)
    out = PollutionStudy([], [], [], [], {})
    for n in radii:
        cell = setup.cell(n)
        u = cell.zero_displacement()
        if policy == "relaxed":
            u = relax_geometry(RelaxProblem(cell, setup.model, Ensemble.grand_canonical(mu, beta),
                                            tolerance=tolerance)).displacement
        spec = eigendecompose(assemble(cell, u, setup.model))
        count, far = defect_state_count(spec, bands, delta)
        out.cells.append(int(n))
        out.counts.append(count)
        out.outside.append(far.tolist())
        if setup.defect is None:
            ref = torus_reference_spectrum(setup.crystal, setup.model, cell.period_matrix)
            out.bloch_mismatch.append(float(np.max(np.abs(np.sort(spec.eigenvalues) - ref))))
        else:
            out.bloch_mismatch.append(math.nan)
    c = out.counts
    out.gates["bounded"] = bool(c) and max(c) <= max(c[0], 1) * 4
    out.gates["eventually_constant"] = len(c) >= 2 and len(set(c[1:])) == 1
    return out
