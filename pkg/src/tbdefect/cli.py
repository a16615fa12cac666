"""Command-line front end: ``tb-defect run <config.json>``.

The config is a JSON document validated against a strict schema (unknown
keys are errors).  Exit status: 0 success, 2 invalid input, 3 numerical
failure (collision, non-convergence, incomplete sweep).
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import jsonschema
import numpy as np
from threadpoolctl import threadpool_limits

from . import report
from .errors import NumericalFailure, TBDefectError, ValidationError
from .hamiltonian import HoppingModel, assemble
from .lattice import crystal_from_dict, defect_from_dict
from .limits import (SweepPlan, StudySetup, ce_limit_study, pollution_study, sweep_beta,
                     sweep_radius)
from .relax import RelaxProblem, relax_geometry, stability_constant
from .sitegreen import build_contours, locality_profile, site_energies_contour, site_energies_eigen
from .spectrum import band_structure, eigendecompose
from .thermo import INF, Ensemble, grand_potential, particle_number

log = logging.getLogger("tbdefect")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_vec = {"type": "array", "items": _num, "minItems": 1, "maxItems": 3}
_mat = {"type": "array", "items": _vec, "minItems": 1, "maxItems": 3}
_ints = {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "required": list(required),
            "additionalProperties": False}


COMMANDS = {
    "bands": _obj({"n_k": {"type": "integer", "minimum": 8}}),
    "relax": _obj({"initial": {"enum": ["zero", "random"]}, "amplitude": {"type": "number", "minimum": 0},
                   "stability": {"type": "boolean"}}),
    "site-energies": _obj({"relax": {"type": "boolean"}}),
    "locality": _obj({"site": {"type": ["integer", "null"], "minimum": 0},
                      "z": {"type": "array", "items": {"type": "array", "items": _num,
                                                        "minItems": 2, "maxItems": 2},
                            "minItems": 1},
                      "relax": {"type": "boolean"}}),
    "sweep-beta": _obj({"betas": {"type": "array", "items": _pos, "minItems": 4},
                        "floor": {"type": "number", "minimum": 0}}),
    "sweep-radius": _obj({"cells": {**_ints, "minItems": 4}, "delta": _pos,
                          "n_k": {"type": "integer", "minimum": 8}}),
    "ce-limit": _obj({"cells": _ints, "shifts": {"type": "array", "items": {"type": "integer"}},
                      "n_k": {"type": "integer", "minimum": 8}}),
    "pollution": _obj({"cells": _ints, "delta": _pos, "policy": {"enum": ["zero", "relaxed"]},
                       "n_k": {"type": "integer", "minimum": 8}}),
}

SCHEMA = _obj({
    "crystal": _obj({
        "dim": {"type": "integer", "minimum": 1, "maximum": 3},
        "cell_matrix": _mat,
        "basis": {"type": "array", "minItems": 1, "items": _obj(
            {"offset": _vec, "species": {"type": "string"}}, ["offset", "species"])},
        "orbitals_per_site": {"type": "integer", "minimum": 1},
    }, ["dim", "cell_matrix", "basis"]),
    "model": _obj({
        "family": {"const": "exp-hop"}, "t": _num, "gamma0": _num, "r0": _num, "r_cut": _pos,
        "r_on": _num, "kappa": _num,
        "onsite": {"type": "object", "additionalProperties": {"oneOf": [_num, {"type": "array", "items": _num}]}},
        "Nb": {"type": "integer", "minimum": 1},
        "coupling": {"type": "array", "items": {"type": "array", "items": _num}},
        "admissibility": _pos,
    }, ["family", "t", "gamma0", "r0", "r_cut", "onsite"]),
    "defect": {"oneOf": [{"type": "null"}, _obj({
        "removed": {"type": "array", "items": _vec},
        "added": {"type": "array", "items": _obj({"position": _vec, "species": {"type": "string"}},
                                                 ["position", "species"])},
        "radius": _pos,
    }, ["radius"])]},
    "cell": {"oneOf": [_obj({"cells": {"oneOf": [{"type": "integer", "minimum": 1}, _ints]}}, ["cells"]),
                       _obj({"period_matrix": _mat}, ["period_matrix"])]},
    "ensemble": _obj({
        "kind": {"enum": ["CE", "GCE"]},
        "beta": {"oneOf": [_pos, {"const": "inf"}]},
        "mu": _num, "n_electrons": _pos,
    }, ["kind", "beta"]),
    "tolerances": _obj({"force": _pos, "contour": _pos, "max_iterations": {"type": "integer", "minimum": 1},
                        "admissibility": _pos}),
    "command": {"type": "object", "minProperties": 1, "maxProperties": 1,
                "properties": COMMANDS, "additionalProperties": False},
    "output": {"type": "string", "minLength": 1},
    "seed": {"type": "integer", "minimum": 0, "maximum": 2 ** 64 - 1},
    "threads": {"type": "integer", "minimum": 1},
}, ["crystal", "model", "ensemble", "command"])

DEFAULTS = {
    "bands": {"n_k": 64},
    "relax": {"initial": "zero", "amplitude": 0.02, "stability": False},
    "site-energies": {"relax": True},
    "locality": {"site": None, "z": None, "relax": False},
    "sweep-beta": {"betas": [5.0, 10.0, 20.0, 40.0, 80.0], "floor": 1e-12},
    "sweep-radius": {"cells": [8, 16, 32, 64], "delta": 0.05, "n_k": 64},
    "ce-limit": {"cells": [8, 16, 32, 64], "shifts": [-2, -1, 1, 2], "n_k": 64},
    "pollution": {"cells": [8, 16, 32, 64], "delta": 0.05, "policy": "relaxed", "n_k": 64},
}
TOLERANCES = {"force": 1e-10, "contour": 1e-9, "max_iterations": 2000, "admissibility": 0.5}


# ---------------------------------------------------------------------------
# config handling


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(config, overrides):
    """Apply ``key.sub=value`` overrides; values are parsed as JSON when possible."""
    config = copy.deepcopy(config)
    for item in overrides or ():
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ValidationError(f"override {item!r} is not key=value")
        node = config
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                node[p] = {}
            node = node[p]
        node[parts[-1]] = _parse_value(value)
    return config


def validate_config(config):
    """Validate against :data:`SCHEMA`; the error message names the offending path."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(config), key=lambda e: list(e.absolute_path))
    if errors:
        err = jsonschema.exceptions.best_match(errors)
        path = "$" + "".join(f"[{p}]" if isinstance(p, int) else f".{p}" for p in err.absolute_path)
        raise ValidationError(f"{path}: {err.message}")
    return config


def resolve_config(config, *, out=None, threads=None, seed=None):
    """Fill defaults so that the echoed config alone reproduces the run."""
    cfg = copy.deepcopy(config)
    if out is not None:
        cfg["output"] = str(out)
    cfg.setdefault("output", "tb-defect-out")
    if seed is not None:
        cfg["seed"] = int(seed)
    cfg.setdefault("seed", 0)
    if threads is not None:
        cfg["threads"] = int(threads)
    if "threads" not in cfg:
        env = os.environ.get("TB_DEFECT_THREADS")
        try:
            cfg["threads"] = int(env) if env else 1
        except ValueError:
            raise ValidationError(f"TB_DEFECT_THREADS={env!r} is not an integer") from None
    cfg.setdefault("defect", None)
    cfg["tolerances"] = {**TOLERANCES, **cfg.get("tolerances", {})}
    cfg["crystal"].setdefault("orbitals_per_site", cfg["model"].get("Nb", 1))
    name = next(iter(cfg["command"]))
    cfg["command"] = {name: {**DEFAULTS[name], **cfg["command"][name]}}
    return validate_config(cfg)


class Context:
    """Objects built from a resolved config."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.crystal = crystal_from_dict(cfg["crystal"])
        self.model = HoppingModel.from_dict(cfg["model"])
        if self.model.nb != self.crystal.orbitals_per_site:
            raise ValidationError("$.model.Nb: differs from $.crystal.orbitals_per_site")
        self.defect = defect_from_dict(cfg["defect"], self.crystal.dim)
        self.setup = StudySetup(self.crystal, self.model, self.defect)
        e = cfg["ensemble"]
        self.beta = INF if e["beta"] == "inf" else float(e["beta"])
        self.kind = e["kind"]
        self.mu = e.get("mu")
        self.n_electrons = e.get("n_electrons")
        if self.kind == "GCE" and self.mu is None:
            raise ValidationError("$.ensemble: 'mu' is required for GCE")
        if self.kind == "CE" and self.n_electrons is None and self.mu is None:
            raise ValidationError("$.ensemble: CE needs 'n_electrons' or 'mu'")
        self.tol = cfg["tolerances"]
        self.rng = np.random.default_rng(cfg["seed"])

    def cell(self):
        c = self.cfg.get("cell")
        if c is None:
            raise ValidationError("$.cell: required for this command")
        if "cells" in c:
            return self.setup.cell(c["cells"])
        from .lattice import build_torus
        return build_torus(self.crystal, c["period_matrix"], self.defect)

    def problem(self, cell, ensemble, u0=None):
        return RelaxProblem(cell, self.model, ensemble, u0, admissibility=self.tol["admissibility"],
                            tolerance=self.tol["force"], max_iterations=self.tol["max_iterations"])

    def ensemble(self, cell, beta=None):
        """The configured ensemble; a CE without ``n_electrons`` takes ``N(mu)`` at the relaxed GCE state."""
        beta = self.beta if beta is None else beta
        if self.kind == "GCE":
            return Ensemble.grand_canonical(self.mu, beta)
        if self.n_electrons is None:
            ref = relax_geometry(self.problem(cell, Ensemble.grand_canonical(self.mu, INF)))
            self.n_electrons = particle_number(ref.eigenvalues, INF, self.mu)
            log.info("canonical electron number from mu=%g: %g", self.mu, self.n_electrons)
        return Ensemble.canonical(self.n_electrons, beta)

    def defect_centre(self, cell):
        if self.defect is None:
            return np.zeros(self.crystal.dim)
        pts = list(self.defect.removed_positions(self.crystal.dim))
        pts += [np.asarray(x, dtype=float) for x, _ in self.defect.added]
        return np.mean(pts, axis=0) if pts else np.zeros(self.crystal.dim)

    def defect_distance(self, cell):
        d = cell.positions - self.defect_centre(cell)
        if hasattr(cell, "minimal_image"):
            d = cell.minimal_image(d)
        return np.linalg.norm(d, axis=1)


def _sites_header(dim):
    return ["site", "species"] + [f"x{i + 1}" for i in range(dim)]


def _site_cols(cell, s):
    return [s, cell.species[s]] + [float(v) for v in cell.positions[s]]


# ---------------------------------------------------------------------------
# commands; each returns (results, gates, tables, complete)


def cmd_bands(ctx, opts):
    bs = band_structure(ctx.crystal, ctx.model, opts["n_k"])
    d = ctx.crystal.dim
    header = [f"xi{i + 1}" for i in range(d)] + [f"lambda{n + 1}" for n in range(bs.bands.shape[1])]
    rows = [list(k) + list(b) for k, b in zip(bs.k_grid, bs.bands)]
    gap = None if bs.gap is None else {"lower": bs.gap.lower, "upper": bs.gap.upper,
                                       "width": bs.gap.width, "midpoint": bs.gap.midpoint}
    res = {"gap": gap, "intervals": bs.intervals, "n_k": opts["n_k"]}
    gates = {"gap_found": bs.gap is not None}
    return res, gates, {"bands.csv": (header, rows)}, True


def _relaxed(ctx, cell, ens, u0=None):
    return relax_geometry(ctx.problem(cell, ens, u0))


def cmd_relax(ctx, opts):
    cell = ctx.cell()
    ens = ctx.ensemble(cell)
    u0 = None
    if opts["initial"] == "random":
        u0 = opts["amplitude"] * ctx.rng.uniform(-1.0, 1.0, (cell.n_sites, cell.dim))
    res = _relaxed(ctx, cell, ens, u0)
    out = {"energy": res.energy, "level": res.level, "gap_distance": res.gap,
           "iterations": res.iterations, "force_norm": res.force_norm, "n_sites": cell.n_sites}
    gates = {"converged": res.force_norm <= ctx.tol["force"]}
    if opts["stability"]:
        c0 = stability_constant(cell, res.displacement, ctx.model, ens,
                                stationarity_tol=max(1e-6, 10 * ctx.tol["force"]))
        out["stability_constant"] = c0
        gates["stable"] = c0 > 0
    d = cell.dim
    tables = {
        "displacement.csv": (_sites_header(d) + [f"u{i + 1}" for i in range(d)],
                             [_site_cols(cell, s) + list(res.displacement[s]) for s in range(cell.n_sites)]),
        "trajectory.csv": (["iteration", "energy", "force_norm", "gap_distance", "level"],
                           [[p.iteration, p.energy, p.force_norm, p.gap, p.level] for p in res.trajectory]),
        "spectrum.csv": (["index", "eigenvalue"], [[i, v] for i, v in enumerate(res.eigenvalues)]),
    }
    return out, gates, tables, True


def _gce_state(ctx, cell, relax):
    if ctx.mu is None:
        raise ValidationError("$.ensemble.mu: required for site energies and locality")
    u = cell.zero_displacement()
    if relax:
        u = _relaxed(ctx, cell, Ensemble.grand_canonical(ctx.mu, ctx.beta)).displacement
    return u


def cmd_site_energies(ctx, opts):
    cell = ctx.cell()
    u = _gce_state(ctx, cell, opts["relax"])
    h = assemble(cell, u, ctx.model)
    spec = eigendecompose(h)
    eig = site_energies_eigen(spec, ctx.beta, ctx.mu, ctx.model.nb)
    con = site_energies_contour(h, build_contours(spec, ctx.mu, ctx.beta), ctx.beta, ctx.mu,
                                tol=ctx.tol["contour"])
    diff = np.abs(eig.values - con.values)
    total = grand_potential(spec, ctx.beta, ctx.mu)
    dist = ctx.defect_distance(cell)
    rows = [_site_cols(cell, s) + [dist[s], eig.values[s], con.values[s], diff[s]]
            for s in range(cell.n_sites)]
    header = _sites_header(cell.dim) + ["distance_to_defect", "eigen", "contour", "abs_difference"]
    out = {"max_site_difference": float(diff.max()), "eigen_total": eig.total,
           "contour_total": con.total, "grand_potential": total, "contour_nodes": con.nodes}
    gates = {"site_agreement": bool(diff.max() <= 1e-8),
             "total_agreement": bool(abs(eig.total - total) <= 1e-10 * max(1.0, abs(total)))}
    return out, gates, {"site_energies.csv": (header, rows)}, True


def cmd_locality(ctx, opts):
    cell = ctx.cell()
    u = _gce_state(ctx, cell, opts["relax"])
    h = assemble(cell, u, ctx.model)
    site = opts["site"]
    if site is None:
        site = int(np.argmin(ctx.defect_distance(cell)))
    if not 0 <= site < cell.n_sites:
        raise ValidationError(f"$.command.locality.site: {site} out of range")
    zs = opts["z"] or [[ctx.mu, 0.0]]
    lam = np.linalg.eigvalsh(h.matrix)
    rows, fits = [], []
    for k, (re, im) in enumerate(zs):
        z = complex(re, im)
        prof = locality_profile(h, z, site)
        fits.append({"z": [re, im], "distance_to_spectrum": float(np.min(np.abs(lam - z))),
                     "gamma_fit": prof.gamma_fit, "prefactor": prof.prefactor, "r2": prof.r2})
        rows += [[k, re, im, j, prof.distances[j], prof.magnitudes[j]] for j in range(cell.n_sites)]
    gam = [f["gamma_fit"] for f in fits]
    gates = {"positive_rate": all(g > 0 for g in gam)}
    order = np.argsort([f["distance_to_spectrum"] for f in fits])
    gates["rate_nondecreasing"] = bool(all(gam[b] >= gam[a] for a, b in zip(order, order[1:])))
    header = ["z_index", "z_re", "z_im", "site", "distance", "magnitude"]
    return {"site": site, "profiles": fits}, gates, {"locality.csv": (header, rows)}, True


def _series_out(series):
    out = {"axis": series.axis, "values": series.values,
           "errors": series.errors, "fits": {k: report.fit_dict(v) for k, v in series.fits.items()},
           "failure": series.failure}
    out.update({k: v for k, v in series.meta.items() if k not in ("reference", "solutions")})
    return out


def cmd_sweep_beta(ctx, opts):
    cell = ctx.cell()
    ens = ctx.ensemble(cell)
    plan = SweepPlan("beta", sorted(opts["betas"]), ctx.problem(cell, ens))
    series = sweep_beta(plan, floor=opts["floor"])
    names = list(series.errors)
    rows = [[b] + [series.errors[k][i] for k in names] for i, b in enumerate(series.values)]
    return (_series_out(series), series.gates, {"sweep_beta.csv": (["beta"] + names, rows)},
            series.complete)


def cmd_sweep_radius(ctx, opts):
    if ctx.mu is None:
        raise ValidationError("$.ensemble.mu: required for sweep-radius")
    cells = sorted(opts["cells"])
    plan = SweepPlan("radius", cells, ctx.problem(ctx.setup.cell(cells[0]),
                                                   Ensemble.grand_canonical(ctx.mu, ctx.beta)),
                     ctx.setup)
    series = sweep_radius(plan, ctx.mu, n_k=opts["n_k"], delta=opts["delta"])
    names = list(series.errors)
    rows = [[n] + [series.errors[k][i] for k in names] + [series.meta["gap_states"][i]]
            for i, n in enumerate(series.values)]
    return (_series_out(series), series.gates,
            {"sweep_radius.csv": (["cells"] + names + ["gap_states"], rows)}, series.complete)


def cmd_ce_limit(ctx, opts):
    if ctx.mu is None:
        raise ValidationError("$.ensemble.mu: required for ce-limit")
    shifts = sorted(opts["shifts"])
    st = ce_limit_study(ctx.setup, sorted(opts["cells"]), ctx.mu, shifts=shifts, beta=ctx.beta,
                        tolerance=ctx.tol["force"], n_k=opts["n_k"])
    header = ["cells", "n_electrons", "lower", "upper", "fermi_level", "case", "distance_to_limit",
              "ce_force"]
    for s in shifts:
        header += [f"shift{s:+d}_level", f"shift{s:+d}_case"]
    rows = []
    for r in st.rows:
        row = [r.cells, r.n_electrons, r.lower, r.upper, r.fermi_level, r.case, r.distance_to_limit,
               r.ce_force]
        for s in shifts:
            row += list(r.shifted.get(s, (math.nan, "")))
        rows.append(row)
    tags = sorted({r.case for r in st.rows} | {c for r in st.rows for _, c in r.shifted.values()})
    out = {"limit_lower": st.limit_lower, "limit_upper": st.limit_upper,
           "limit_midpoint": st.limit_midpoint, "case_tags": tags, "failure": st.failure}
    return out, st.gates, {"ce_limit.csv": (header, rows)}, st.complete


def cmd_pollution(ctx, opts):
    st = pollution_study(ctx.setup, sorted(opts["cells"]), opts["delta"], policy=opts["policy"],
                         mu=ctx.mu, beta=ctx.beta, n_k=opts["n_k"], tolerance=ctx.tol["force"])
    rows = [[n, c, m, o] for n, c, m, o in zip(st.cells, st.counts, st.bloch_mismatch, st.outside)]
    out = {"cells": st.cells, "counts": st.counts, "bloch_mismatch": st.bloch_mismatch}
    return out, st.gates, {"pollution.csv": (["cells", "count", "bloch_mismatch", "outside"], rows)}, True


DISPATCH = {
    "bands": cmd_bands, "relax": cmd_relax, "site-energies": cmd_site_energies,
    "locality": cmd_locality, "sweep-beta": cmd_sweep_beta, "sweep-radius": cmd_sweep_radius,
    "ce-limit": cmd_ce_limit, "pollution": cmd_pollution,
}


# ---------------------------------------------------------------------------
# entry points


def load_config(path):
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"config file {path} does not exist")
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from exc


def _attach_log(out_dir):
    out_dir.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out_dir / "run.log", mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO)
    return handler


def run(config_path, overrides=(), *, out=None, threads=None, seed=None):
    """Execute one configured study and write its artifacts; returns the exit status."""
    handler = None
    try:
        raw = apply_overrides(load_config(config_path), overrides)
        validate_config(raw)
        cfg = resolve_config(raw, out=out, threads=threads, seed=seed)
        out_dir = Path(cfg["output"])
        try:
            handler = _attach_log(out_dir)
        except OSError as exc:
            raise ValidationError(f"cannot create output directory {out_dir}: {exc}") from exc
        name = next(iter(cfg["command"]))
        log.info("command %s, threads %d, seed %d", name, cfg["threads"], cfg["seed"])
        summary = {"command": name, "config": cfg, "versions": report.versions()}
        t0 = time.perf_counter()
        status = EXIT_OK
        try:
            with threadpool_limits(limits=cfg["threads"]):
                ctx = Context(cfg)
                results, gates, tables, complete = DISPATCH[name](ctx, cfg["command"][name])
        except NumericalFailure as exc:
            log.error("numerical failure: %s", exc)
            results, gates, tables, complete = {"error": str(exc)}, {}, {}, False
        if not complete:
            status = EXIT_NUMERICAL
        summary.update(results=results, gates=gates, incomplete=not complete,
                       timings={"total_seconds": time.perf_counter() - t0})
        report.emit_report(out_dir, summary, tables)
        log.info("wrote %s (exit %d)", out_dir / "summary.json", status)
        return status
    except ValidationError as exc:
        print(f"tb-defect: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except TBDefectError as exc:
        print(f"tb-defect: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    finally:
        if handler is not None:
            log.removeHandler(handler)
            handler.close()


def build_parser():
    parser = argparse.ArgumentParser(prog="tb-defect",
                                     description="Tight-binding point-defect studies on periodic cells.")
    sub = parser.add_subparsers(dest="action", required=True)
    p = sub.add_parser("run", help="run the study described by a JSON config")
    p.add_argument("config", help="path to the JSON config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dot-path override, e.g. ensemble.beta=20 (value parsed as JSON)")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--threads", type=int, help="BLAS threads (fallback: TB_DEFECT_THREADS)")
    p.add_argument("--seed", type=int, help="seed for random initial displacements")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    return run(args.config, args.overrides, out=args.out, threads=args.threads, seed=args.seed)


if __name__ == "__main__":
    sys.exit(main())
