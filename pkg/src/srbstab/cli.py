"""Command-line experiments.

Each subcommand reads one JSON config, fills in defaults, writes the resolved
config to ``<out>/config.json`` and its results as CSV/JSON next to it.
Exit codes: 0 ok, 1 nothing completed, 2 convergence failure, 3 inequality
violated, 4 infeasible parameters.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import flows as fl
from . import maps as mp
from .bv import BVParams, GridFunction, random_grid_function
from .errors import (
    BadParameters,
    FoliationAmbiguous,
    InvalidMap,
    NoContractingK,
    NoConvergence,
    NotConverged,
    SrbStabError,
)
from .harness import SweepConfig, stability_sweep
from .transfer import certified_distance, ly_constants, operator_dictionary, operator_distance, solve_invariant_density, verify_ly

log = logging.getLogger("srbstab")

EXIT_OK, EXIT_EMPTY, EXIT_CONVERGENCE, EXIT_VIOLATION, EXIT_INFEASIBLE = 0, 1, 2, 3, 4

DEFAULTS: dict[str, dict] = {
    "density": {"map": {"family": "lorenz_theta", "params": {"theta": 0.75}}, "n_cells": 4096,
                "tol": 1e-10, "max_iter": 100000},
    "ly-check": {"map": {"family": "doubling", "params": {}}, "alpha": None, "eps0": 0.05, "k": 1,
                 "n_cells": 1024, "n_max": 20, "n_random": 100},
    "op-distance": {"family": "perturbed_doubling", "eps_list": [0.04, 0.02, 0.01], "theta0": 0.75,
                    "n_cells": 2048},
    "flow-sim": {"system": {"kind": "lorenz63"}, "section": None, "n_returns": 1000, "transient": 50.0,
                 "z0": [1.0, 1.0, 1.0]},
    "quotient": {"system": {"kind": "geometric_lorenz"}, "n_grid": 4096, "n_returns": 2000, "n_samples": 10000,
                 "n_directions": 32, "max_residual": 0.05},
    "stability": {"family": "perturbed_doubling", "eps_list": [0.04, 0.02, 0.01, 0.005],
                  **{f.name: f.default for f in fields(SweepConfig) if f.name != "seed"}},
    "passage-time": {"eigenvalues": [2.0, -1.0, -3.0], "x1": None, "n_points": 25, "tolerance": 1e-8},
}


def resolve_config(experiment: str, doc: dict, seed: int | None) -> dict:
    if experiment not in DEFAULTS:
        raise BadParameters(f"unknown experiment {experiment!r}")
    cfg = {**DEFAULTS[experiment]}
    unknown = set(doc) - set(cfg) - {"experiment", "seed"}
    if unknown:
        raise BadParameters(f"unknown config keys for {experiment}: {sorted(unknown)}")
    cfg.update({k: v for k, v in doc.items() if k != "experiment"})
    cfg["experiment"] = experiment
    cfg["seed"] = int(seed if seed is not None else doc.get("seed", 0))
    return cfg


# ---------------------------------------------------------------------------
# output helpers


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, float) and not math.isfinite(v):
        return None
    raise TypeError(f"not serializable: {type(v)}")


def _write_csv(path: Path, header: list[str], rows) -> None:
    def fmt(v):
        if isinstance(v, (bool, np.bool_)):
            return str(int(v))
        if isinstance(v, (int, np.integer)):
            return str(int(v))
        if isinstance(v, (float, np.floating)):
            return f"{float(v):.17g}"
        return str(v)

    lines = [",".join(header)] + [",".join(fmt(v) for v in r) for r in rows]
    path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# experiments


def run_density(cfg: dict, out: Path) -> int:
    fmap = mp.map_from_json(cfg["map"])
    try:
        res = solve_invariant_density(fmap, int(cfg["n_cells"]), tol=cfg["tol"], max_iter=int(cfg["max_iter"]))
    except NoConvergence as exc:
        _dump_json(out / "diagnostic.json", {"error": str(exc), "map": fmap.descriptor()})
        return EXIT_CONVERGENCE
    h = res.density
    (out / "density.csv").write_text(h.to_csv())
    _dump_json(out / "summary.json", {"map": fmap.descriptor(), "n_cells": h.n_cells, "residual": res.residual,
                                      "iterations": res.iterations, "integral": h.integral()})
    return EXIT_OK


def run_ly_check(cfg: dict, out: Path) -> int:
    fmap = mp.map_from_json(cfg["map"])
    try:
        C = ly_constants(fmap, alpha=cfg["alpha"], eps0=cfg["eps0"], k=int(cfg["k"]))
    except NoContractingK as exc:
        _dump_json(out / "diagnostic.json", {"error": str(exc)})
        return EXIT_INFEASIBLE
    (out / "ly_constants.json").write_text(C.to_json() + "\n")
    rng = np.random.default_rng(cfg["seed"])
    n = int(cfg["n_cells"])
    params = BVParams.for_grid(fmap.a, fmap.b, n, C.alpha, C.eps0)
    rows, ok = [], True
    tests = [random_grid_function(rng, fmap.a, fmap.b, n) for _ in range(int(cfg["n_random"]))]
    tests.insert(0, GridFunction.constant(0.0, fmap.a, fmap.b, n))
    for gi, g in enumerate(tests):
        rep = verify_ly(fmap, C, g, int(cfg["n_max"]), params)
        ok &= rep.holds
        rows += [(gi, "n", m, lhs, rhs, holds) for m, lhs, rhs, holds in rep.rows]
        rows.append((gi, "k_step", C.k, *rep.k_step))
        log.info("g %d: %s", gi, "ok" if rep.holds else "VIOLATION")
    _write_csv(out / "ly_rows.csv", ["g_index", "kind", "n", "lhs", "rhs", "holds"], rows)
    _dump_json(out / "summary.json", {"n_functions": len(tests), "violations": sum(1 for r in rows if not r[5]),
                                      "holds": bool(ok)})
    return EXIT_OK if ok else EXIT_VIOLATION


def _family_pair(family: str, eps: float, theta0: float):
    if family == "perturbed_doubling":
        return mp.perturbed_doubling(0.0), mp.perturbed_doubling(eps)
    if family == "lorenz_theta":
        return mp.lorenz_theta(theta0), mp.lorenz_theta(theta0 + eps)
    raise BadParameters(f"no perturbation family {family!r}")


def run_op_distance(cfg: dict, out: Path) -> int:
    rows, ok = [], True
    dictionary = None
    for eps in cfg["eps_list"]:
        m0, me = _family_pair(cfg["family"], float(eps), cfg["theta0"])
        if dictionary is None:
            dictionary = operator_dictionary(m0.a, m0.b, int(cfg["n_cells"]))
        est = operator_distance(m0, me, dictionary, eps=float(eps), map_distance=certified_distance(m0, me))
        ok &= est.consistent
        rows.append((eps, est.map_distance, est.op_distance_lower, est.op_distance_upper, est.C, est.argmax,
                     est.consistent))
    _write_csv(out / "op_distance.csv",
               ["eps", "map_distance_bound", "op_distance_lower", "op_distance_upper", "C", "argmax", "consistent"], rows)
    return EXIT_OK if ok else EXIT_VIOLATION


def _section_for(system: fl.FlowSystem, doc) -> fl.CrossSection:
    return fl.default_section(system) if doc is None else fl.CrossSection.from_json(doc)


def run_flow_sim(cfg: dict, out: Path) -> int:
    system = fl.FlowSystem.from_json(cfg["system"])
    section = _section_for(system, cfg["section"])
    n = int(cfg["n_returns"])
    summary = {"system": json.loads(system.to_json()), "section": json.loads(section.to_json())}
    if system.kind == "lorenz63":
        data = fl.return_dataset(system, section, n, z0=cfg["z0"], transient=cfg["transient"])
        data.to_csv(out / "returns.csv")
        dist = section.boundary_distance(data.hit)
        summary.update(n_returns=len(data.tau), failures=0, max_plane_residual=float(np.abs(data.plane_residual).max()),
                       min_boundary_distance=float(dist.min()),
                       delta_violations=int(np.sum(dist < section.delta)))
    else:
        rng = np.random.default_rng(cfg["seed"])
        ul, uh, vl, vh = section.bounds
        starts = np.column_stack([rng.uniform(ul, uh, n), rng.uniform(vl, vh, n)])
        rows, fails = [], 0
        for uv in starts:
            try:
                r = fl.poincare_return(system, section, uv)
            except (fl.NoReturn, fl.HitSingularLeaf) as exc:
                fails += 1
                log.info("no return from %s: %s", uv, exc)
                continue
            rows.append((*r.start, r.tau, *r.hit))
        _write_csv(out / "returns.csv", ["x_start", "y_start", "tau", "x_hit", "y_hit"], rows)
        summary.update(n_returns=len(rows), failures=fails)
        if not rows:
            _dump_json(out / "summary.json", summary)
            return EXIT_EMPTY
    _dump_json(out / "summary.json", summary)
    return EXIT_OK


def run_quotient(cfg: dict, out: Path) -> int:
    system = fl.FlowSystem.from_json(cfg["system"])
    if system.kind == "geometric_lorenz":
        P = fl.GeometricReturnMap.from_system(system)
        f = fl.collapse_foliation(P)
        grid = np.linspace(-1, 1, int(cfg["n_grid"]) + 1)[:-1] + 1.0 / int(cfg["n_grid"])
        vals = f(grid)
        _write_csv(out / "quotient.csv", ["leaf_in", "leaf_out"], zip(grid, vals))
        ref = mp.lorenz_theta(P.theta)
        _dump_json(out / "semiconjugacy.json", {
            "residual": fl.semiconjugacy_residual(P, f, int(cfg["n_samples"]), cfg["seed"]),
            "max_deviation_from_lorenz_theta": float(np.max(np.abs(vals - ref(grid)))),
            "cuts": list(f.cuts), "n_samples": int(cfg["n_samples"])})
        return EXIT_OK
    if system.kind != "lorenz63":
        raise BadParameters("quotient needs a geometric_lorenz or lorenz63 system")
    section = fl.default_section(system)
    data = fl.return_dataset(system, section, int(cfg["n_returns"]))
    data.to_csv(out / "returns.csv")
    table = fl.collapse_lorenz63(system, section, data, int(cfg["n_directions"]), max_residual=cfg["max_residual"])
    table.to_csv(out / "quotient.csv")
    _dump_json(out / "semiconjugacy.json", {"residual": table.residual, "cut": table.cut,
                                            "leaf_direction": table.direction.tolist(), "n_returns": len(data.tau)})
    return EXIT_OK


def run_stability(cfg: dict, out: Path) -> int:
    sweep = SweepConfig(**{f.name: cfg[f.name] for f in fields(SweepConfig) if f.name != "seed"}, seed=cfg["seed"])
    rep = stability_sweep(cfg["family"], cfg["eps_list"], sweep)
    (out / "report.csv").write_text(rep.to_csv())
    (out / "report.json").write_text(rep.to_json() + "\n")
    (out / "density_gap.dat").write_text(rep.to_plot_data())
    return EXIT_OK if rep.n_ok else EXIT_EMPTY


def run_passage_time(cfg: dict, out: Path) -> int:
    system = fl.linear_saddle(*cfg["eigenvalues"])
    xs = cfg["x1"] if cfg["x1"] is not None else np.geomspace(1e-6, 0.9, int(cfg["n_points"])).tolist()
    rows = []
    for x in xs:
        p = fl.passage_time(system, float(x))
        rows.append((p.x1, p.formula, p.integrated, p.discrepancy))
    worst = max(r[3] for r in rows)
    _write_csv(out / "passage.csv", ["x1", "formula", "integrated", "discrepancy"], rows)
    ok = worst <= cfg["tolerance"]
    _dump_json(out / "summary.json", {"max_discrepancy": worst, "tolerance": cfg["tolerance"], "within": ok})
    return EXIT_OK if ok else EXIT_VIOLATION


RUNNERS = {
    "density": run_density,
    "ly-check": run_ly_check,
    "op-distance": run_op_distance,
    "flow-sim": run_flow_sim,
    "quotient": run_quotient,
    "stability": run_stability,
    "passage-time": run_passage_time,
}


def _validate(cfg: dict) -> None:
    """Build every referenced map or system once so bad parameters fail before any work."""
    if "map" in cfg:
        mp.map_from_json(cfg["map"]).validate()
    if "system" in cfg:
        fl.FlowSystem.from_json(cfg["system"])
    if cfg["experiment"] in ("stability", "op-distance"):
        eps = [float(e) for e in cfg["eps_list"]]
        if not eps or any(e < 0 for e in eps):
            raise BadParameters("eps_list must hold nonnegative values")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="srbstab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="experiment", required=True)
    for name in RUNNERS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="JSON config; omitted keys take defaults")
        p.add_argument("--out", type=Path, default=None, help="output directory (default out/<experiment>)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=1, help="worker threads for numerical libraries")
        p.add_argument("--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(message)s")
    os.environ.setdefault("OMP_NUM_THREADS", str(args.threads))
    doc = json.loads(args.config.read_text()) if args.config else {}
    if doc.get("experiment", args.experiment) != args.experiment:
        log.error("config is for %r, not %r", doc["experiment"], args.experiment)
        return EXIT_INFEASIBLE
    out = args.out if args.out is not None else Path("out") / args.experiment
    try:
        cfg = resolve_config(args.experiment, doc, args.seed)
        _validate(cfg)
    except (BadParameters, InvalidMap, KeyError, TypeError, ValueError) as exc:
        log.error("invalid config: %s", exc)
        return EXIT_INFEASIBLE
    out.mkdir(parents=True, exist_ok=True)
    _dump_json(out / "config.json", cfg)
    try:
        code = RUNNERS[args.experiment](cfg, out)
    except (NoConvergence, NotConverged) as exc:
        _dump_json(out / "diagnostic.json", {"error": f"{type(exc).__name__}: {exc}"})
        code = EXIT_CONVERGENCE
    except (BadParameters, InvalidMap, NoContractingK, FoliationAmbiguous) as exc:
        _dump_json(out / "diagnostic.json", {"error": f"{type(exc).__name__}: {exc}"})
        code = EXIT_INFEASIBLE
    except SrbStabError as exc:
        _dump_json(out / "diagnostic.json", {"error": f"{type(exc).__name__}: {exc}"})
        code = EXIT_EMPTY
    log.info("%s finished with exit code %d", args.experiment, code)
    return code


if __name__ == "__main__":
    sys.exit(main())
