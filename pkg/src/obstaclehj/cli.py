"""Batch experiment driver.

Usage: ``obstaclehj <subcommand> [--config FILE] [--out DIR] [--jobs N] [--seed S] [--problem KEY]``.
The output directory defaults to ``$OBSTACLEHJ_OUT`` (else ``./runs``); each subcommand writes
into ``<out>/<subcommand>/``: ``report.json``, ``config.ini`` (the full echo, re-runnable with
``--config``) and CSV series described in ``csv_schema.json``.

Exit codes: 0 when every verdict is PASS or INFO, 1 on any FAIL, 2 on a configuration error
(with a JSON error record on stderr and in ``<out>/error.json``).
"""
from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import os
import shutil
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from importlib import resources
from pathlib import Path

import numpy as np

from .adjoint import (
    adjoint_mass_report,
    energy_audit,
    energy_refinement,
    key_estimate_sweep,
    key_stability_measure,
    select_x0,
    solve_adjoint,
)
from .catalog import CATALOG, KNOWN_ERGODIC_CONSTANTS, get_problem
from .cauchy import export_trajectory, solve_free, solve_obstacle, solve_penalized, stability_gap_details
from .domain import ProblemSpec, build_grid, load_problem_text
from .ergodic import (
    discounted_schedule,
    dichotomy_experiment,
    ergodic_constant_discounted,
    ergodic_constant_longtime,
    approx_constant_trend,
    solve_approx_ergodic,
)
from .report import ExperimentReport, loglog_slope
from .schemes import default_params, discretize
from .stopping_mc import PDEValue, verify_value_bounds

SUBCOMMANDS = ("solve", "ergodic", "dichotomy", "rate-study", "adjoint-audit", "key-stability",
               "mc-verify", "suite")
OUT_ENV = "OBSTACLEHJ_OUT"

DEFAULTS = {
    "general": {"seed": "0", "cfl_safety": "0.5", "problem_file": ""},
    "solve": {"problem": "obstacle-bump-1d", "N": "128", "mode": "obstacle", "T": "1.0",
              "epsilon": "0.2", "snapshots": "5"},
    "ergodic": {"problem": "eikonal-cos-1d", "N": "512", "alphas": "0.1, 0.05, 0.025", "T_longtime": "10.0",
                "oracle_N": "2048", "oracle_alpha": "0.001", "epsilons": "0.4, 0.2, 0.1", "cell_N": "256",
                "tolerance": "0.02"},
    "dichotomy": {"problem": "subcritical-obstacle-1d", "N": "256", "T_max": "20.0"},
    "rate-study": {"problem": "subcritical-obstacle-1d", "N": "1024", "epsilons": "0.4, 0.2, 0.1, 0.05",
                   "min_slope": "0.3"},
    "adjoint-audit": {"problem": "obstacle-bump-1d", "N": "128", "epsilon": "0.2", "duality_probes": "1",
                      "energy_N": "64", "energy_epsilon": "0.2", "key_N": "64",
                      "key_epsilons": "0.4, 0.2, 0.1, 0.05", "hessian_problem": "viscous-cos-1d"},
    "key-stability": {"problem": "subcritical-obstacle-1d", "N": "128", "epsilons": "0.4, 0.2, 0.1, 0.05",
                      "min_slope": "0.15"},
    "mc-verify": {"problem": "obstacle-bump-1d", "N": "512", "t": "2.0", "M": "10000", "n_nodes": "16"},
    "suite": {"subcommands": "solve, ergodic, dichotomy, rate-study, adjoint-audit, key-stability, mc-verify"},
}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration

def load_config(path: str | Path | None) -> configparser.ConfigParser:
    cfg = configparser.ConfigParser()
    cfg.optionxform = str  # keep key case (N vs n)
    cfg.read_dict(DEFAULTS)
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            cfg.read_string(path.read_text(), source=str(path))
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
    unknown = [s for s in cfg.sections() if s not in DEFAULTS]
    if unknown:
        raise ConfigError(f"unknown config sections: {unknown}")
    for section in DEFAULTS:
        extra = set(cfg[section]) - set(DEFAULTS[section])
        if extra:
            raise ConfigError(f"unknown keys in [{section}]: {sorted(extra)}")
    return cfg


def _get(cfg, section, key, kind=float):
    raw = cfg[section][key]
    try:
        if kind is list:
            return [float(v) for v in raw.replace(",", " ").split()]
        if kind is int:
            return int(raw)
        if kind is str:
            return raw.strip()
        return float(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from exc


def _problem(cfg, section) -> ProblemSpec:
    pfile = _get(cfg, "general", "problem_file", str)
    if pfile:
        try:
            return load_problem_text(Path(pfile).read_text())
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"problem file {pfile}: {exc}") from exc
    key = _get(cfg, section, "problem", str)
    if key not in CATALOG:
        raise ConfigError(f"unknown catalog problem {key!r}; known: {sorted(CATALOG)}")
    return get_problem(key)


def _grid(cfg, section, problem, key="N"):
    n = _get(cfg, section, key, int)
    try:
        return build_grid(problem.dim, n)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: {exc}") from exc


def _echo(cfg, section) -> dict:
    return {"general": dict(cfg["general"]), section: dict(cfg[section])}


def _map(fn, cells, jobs: int):
    """Run ``fn`` over ``cells``; results come back in cell order whatever the pool does."""
    if jobs <= 1 or len(cells) <= 1:
        return [fn(c) for c in cells]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, cells))


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


# ---------------------------------------------------------------------------
# subcommands; each returns a report and writes its artefacts into ``out``

def cmd_solve(cfg, out: Path, jobs: int) -> ExperimentReport:
    problem = _problem(cfg, "solve")
    grid = _grid(cfg, "solve", problem)
    mode = _get(cfg, "solve", "mode", str)
    T = _get(cfg, "solve", "T")
    n_snap = _get(cfg, "solve", "snapshots", int)
    params = default_params(problem, grid, cfl_safety=_get(cfg, "general", "cfl_safety"))
    rep = ExperimentReport("solve", config=_echo(cfg, "solve"))
    rep.config["problem_name"] = problem.name
    if mode == "obstacle":
        traj = solve_obstacle(problem, T, grid, params, max_snapshots=n_snap)
        psi = discretize(problem, grid).obstacle
        rep.check("obstacle-feasibility", float(np.max(traj.snapshots - psi)), 0.0, "<=")
    elif mode == "free":
        traj = solve_free(problem, T, grid, params, max_snapshots=n_snap)
    elif mode == "penalized":
        eps = _get(cfg, "solve", "epsilon")
        traj = solve_penalized(problem, eps, eps**2, grid, params, keep_log=False, max_snapshots=n_snap)
    else:
        raise ConfigError(f"[solve] mode must be obstacle | free | penalized, got {mode!r}")
    manifest = export_trajectory(traj, out, prefix="u")
    rep.checksums.update({e["file"]: e["sha256"] for e in json.loads(manifest.read_text())["snapshots"]})
    rep.measured.update(n_steps=traj.n_steps, dt=traj.dt, final_min=float(traj.final.min()),
                        final_max=float(traj.final.max()))
    rep.check("finite", bool(np.all(np.isfinite(traj.snapshots))), True, "==")
    return rep


def cmd_ergodic(cfg, out: Path, jobs: int) -> ExperimentReport:
    problem = _problem(cfg, "ergodic")
    grid = _grid(cfg, "ergodic", problem)
    tol = _get(cfg, "ergodic", "tolerance")
    rep = ExperimentReport("ergodic", config=_echo(cfg, "ergodic"))
    rep.config["problem_name"] = problem.name
    rows = []
    sched = discounted_schedule(problem, grid, _get(cfg, "ergodic", "alphas", list))
    rows += [("discounted", a, c) for a, c in zip(sched["alphas"], sched["estimates"])]
    rows.append(("discounted-extrapolated", 0.0, sched["extrapolated"]))
    T = _get(cfg, "ergodic", "T_longtime")
    c_long = ergodic_constant_longtime(problem, T, grid)
    rows.append(("longtime", T, c_long))
    rep.measured.update(discounted=sched, longtime=c_long)
    rep.check("estimators-agree", abs(sched["extrapolated"] - c_long), tol)
    oracle_N = _get(cfg, "ergodic", "oracle_N", int)
    if oracle_N > 0:
        alpha = _get(cfg, "ergodic", "oracle_alpha")
        c_or, _ = ergodic_constant_discounted(problem, alpha, alpha**2, build_grid(problem.dim, oracle_N))
        rows.append(("oracle", alpha, c_or))
        rep.measured["oracle"] = c_or
        rep.check("oracle-agreement", abs(sched["extrapolated"] - c_or), tol)
    known = KNOWN_ERGODIC_CONSTANTS.get(problem.name)
    if known is not None:
        rep.check("analytic-agreement", abs(sched["extrapolated"] - known), tol, note=f"closed form {known:g}")
    cell_grid = _grid(cfg, "ergodic", problem, "cell_N")
    eps_list = _get(cfg, "ergodic", "epsilons", list)
    if known is not None and known > 0:
        trend = approx_constant_trend(problem, eps_list, cell_grid, known)
        rep.measured["approx_trend"] = trend
        rep.require("approx-constant-error-shrinks", trend["shrinking"],
                    np.array2string(np.array(trend["errors"]), precision=4))
        rep.check("approx-constant-at-smallest-eps", trend["errors"][-1], 0.05)
    for eps in eps_list:
        res = solve_approx_ergodic(problem, eps, cell_grid)
        c_h = res.diagnostics["c_H_eps"]
        rows += [("approx-cell", eps, c_h), ("approx-cell-clipped", eps, res.c_estimate)]
        rep.require(f"clipping-exact(eps={eps:g})", res.c_estimate == max(0.0, c_h), res.c_estimate)
        rep.check(f"corrector-normalized(eps={eps:g})", abs(float(res.corrector.flat[0])), 0.0, "==")
    _write_csv(out / "ergodic_constants.csv", ["estimator", "parameter", "value"], rows)
    return rep


def cmd_dichotomy(cfg, out: Path, jobs: int) -> ExperimentReport:
    problem = _problem(cfg, "dichotomy")
    grid = _grid(cfg, "dichotomy", problem)
    rep = dichotomy_experiment(problem, grid, _get(cfg, "dichotomy", "T_max"))
    rep.config.update(_echo(cfg, "dichotomy"))
    return rep


def _gap_cell(cell):
    problem, eps, n, safety = cell
    grid = build_grid(problem.dim, n)
    params = default_params(problem, grid, cfl_safety=safety)
    return stability_gap_details(problem, eps, grid, params)


def cmd_rate_study(cfg, out: Path, jobs: int) -> ExperimentReport:
    problem = _problem(cfg, "rate-study")
    n = _get(cfg, "rate-study", "N", int)
    build_grid(problem.dim, n)
    eps_list = _get(cfg, "rate-study", "epsilons", list)
    safety = _get(cfg, "general", "cfl_safety")
    results = _map(_gap_cell, [(problem, e, n, safety) for e in eps_list], jobs)
    rep = ExperimentReport("rate-study", config=_echo(cfg, "rate-study"))
    rep.config["problem_name"] = problem.name
    _write_csv(out / "rate_study.csv", ["epsilon", "gap", "dt", "n_steps", "h"],
               [(r.epsilon, r.gap, r.dt, r.n_steps, r.h) for r in results])
    order = np.argsort(eps_list)[::-1]
    gaps = [results[i].gap for i in order]
    slope = loglog_slope([eps_list[i] for i in order], gaps)
    rep.measured.update(epsilons=eps_list, gaps=[r.gap for r in results], slope=slope,
                        dt=[r.dt for r in results], n_steps=[r.n_steps for r in results])
    rep.require("gap-monotone-decreasing", all(b < a for a, b in zip(gaps, gaps[1:])),
                np.array2string(np.array(gaps), precision=5))
    rep.check("fitted-slope", slope, _get(cfg, "rate-study", "min_slope"), ">=")
    return rep


def cmd_adjoint_audit(cfg, out: Path, jobs: int) -> ExperimentReport:
    sec = "adjoint-audit"
    problem = _problem(cfg, sec)
    grid = _grid(cfg, sec, problem)
    eps = _get(cfg, sec, "epsilon")
    rep = ExperimentReport("adjoint-audit", config=_echo(cfg, sec))
    rep.config["problem_name"] = problem.name
    fwd = solve_penalized(problem, eps, eps**2, grid, store="endpoints")
    x0s = select_x0(fwd, 3)
    adj = solve_adjoint(fwd, x0s[0], duality_probes=_get(cfg, sec, "duality_probes", int),
                        seed=_get(cfg, "general", "seed", int))
    rep.merge(adjoint_mass_report(adj, fwd))
    rep.merge(energy_audit(fwd, adj))
    _write_csv(out / "adjoint_mass.csv", ["t", "mass"], zip(adj.times, adj.mass))
    # sensitivity of the audit to the choice among the top-3 candidate nodes
    sens = []
    for x0 in x0s[1:]:
        alt = solve_adjoint(fwd, x0)
        sens.append(float(alt.mass[0]))
    rep.info("x0-candidates", x0s, note=f"initial mass for candidates 2-3: {sens}")
    rep.merge(energy_refinement(problem, _get(cfg, sec, "energy_epsilon"), _get(cfg, sec, "energy_N", int),
                                dim=problem.dim))
    key_grid = _grid(cfg, sec, problem, "key_N")
    key_eps = _get(cfg, sec, "key_epsilons", list)
    key = key_estimate_sweep(problem, key_eps, key_grid)
    # the weighted Hessian bound is checked on a case without contact, where sigma keeps its mass
    hess_key = _get(cfg, sec, "hessian_problem", str)
    if hess_key:
        if hess_key not in CATALOG:
            raise ConfigError(f"unknown catalog problem {hess_key!r}")
        hess = key_estimate_sweep(get_problem(hess_key), key_eps, build_grid(get_problem(hess_key).dim,
                                                                             key_grid.points_per_axis))
        for v in key.verdicts:
            if v.check_id == "hessian-integral-max/min":
                v.status = "INFO"
                v.note = "contact absorbs sigma within rescaled time ~eps; checked on " + hess_key
        rep.merge(key, prefix="key-estimates")
        rep.merge(ExperimentReport("h", verdicts=[v for v in hess.verdicts
                                                  if v.check_id == "hessian-integral-max/min"],
                                   measured=hess.measured), prefix=f"key-estimates[{hess_key}]")
    else:
        rep.merge(key, prefix="key-estimates")
    _write_csv(out / "key_estimates.csv", ["epsilon", "x0", "hessian", "dW2", "penalty", "eps7_D2W2", "aD2W2"],
               [(r["epsilon"], r["x0"], r["hessian"], r["dW2"], r["penalty"], r["eps7_D2W2"], r["aD2W2"])
                for r in key.measured["rows"]])
    return rep


def cmd_key_stability(cfg, out: Path, jobs: int) -> ExperimentReport:
    sec = "key-stability"
    problem = _problem(cfg, sec)
    grid = _grid(cfg, sec, problem)
    eps_list = _get(cfg, sec, "epsilons", list)
    rep = key_stability_measure(problem, eps_list, grid, _get(cfg, sec, "min_slope"))
    rep.config.update(_echo(cfg, sec))
    _write_csv(out / "key_stability.csv", ["epsilon", "eps_wt_max"], zip(eps_list, rep.measured["values"]))
    return rep


def cmd_mc_verify(cfg, out: Path, jobs: int) -> ExperimentReport:
    sec = "mc-verify"
    problem = _problem(cfg, sec)
    grid = _grid(cfg, sec, problem)
    t = _get(cfg, sec, "t")
    n_nodes = _get(cfg, sec, "n_nodes", int)
    nodes = np.linspace(0, grid.size, n_nodes, endpoint=False).astype(int).tolist()
    pde = PDEValue.solve(problem, grid, t)
    rep = verify_value_bounds(problem, grid, t, nodes, _get(cfg, sec, "M", int),
                              seed=_get(cfg, "general", "seed", int), pde=pde)
    rep.config.update(_echo(cfg, sec))
    _write_csv(out / "mc_verify.csv",
               ["node", "x", "policy", "stop", "u_pde", "estimate", "half_width", "dominated", "tight"],
               [(r["node"], r["x"][0], r["policy"], r["stop"], r["u_pde"], r["estimate"], r["half_width"],
                 r["dominated"], r.get("tight", "")) for r in rep.measured["rows"]])
    return rep


COMMANDS = {
    "solve": cmd_solve,
    "ergodic": cmd_ergodic,
    "dichotomy": cmd_dichotomy,
    "rate-study": cmd_rate_study,
    "adjoint-audit": cmd_adjoint_audit,
    "key-stability": cmd_key_stability,
    "mc-verify": cmd_mc_verify,
}


def _run_one(sub: str, cfg, out: Path, jobs: int) -> ExperimentReport:
    target = out / sub
    target.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    rep = COMMANDS[sub](cfg, target, jobs)
    rep.wall_clock = time.perf_counter() - t0
    for f in sorted(target.glob("*.csv")):
        if f.name not in rep.checksums:
            rep.checksums[f.name] = hashlib.sha256(f.read_bytes()).hexdigest()
    with open(target / "config.ini", "w") as fh:
        cfg.write(fh)
    shutil.copy(resources.files("obstaclehj") / "csv_schema.json", target / "csv_schema.json")
    rep.write(target / "report.json")
    return rep


def run(subcommand: str, config_path=None, out_dir=None, jobs: int = 1, seed: int | None = None,
        problem: str | None = None) -> int:
    out = Path(out_dir or os.environ.get(OUT_ENV) or "runs")
    try:
        if subcommand not in SUBCOMMANDS:
            raise ConfigError(f"unknown subcommand {subcommand!r}; choose from {SUBCOMMANDS}")
        if jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        cfg = load_config(config_path)
        if seed is not None:
            cfg["general"]["seed"] = str(seed)
        if problem is not None:
            if problem not in CATALOG:
                raise ConfigError(f"unknown catalog problem {problem!r}; known: {sorted(CATALOG)}")
            for section in DEFAULTS:
                if "problem" in DEFAULTS[section]:
                    cfg[section]["problem"] = problem
        out.mkdir(parents=True, exist_ok=True)
        if subcommand == "suite":
            subs = [s.strip() for s in cfg["suite"]["subcommands"].split(",") if s.strip()]
            bad = [s for s in subs if s not in COMMANDS]
            if bad:
                raise ConfigError(f"[suite] unknown subcommands {bad}")
            suite = ExperimentReport("suite", config={"subcommands": subs})
            t0 = time.perf_counter()
            for s in subs:
                rep = _run_one(s, cfg, out, jobs)
                suite.merge(rep, prefix=s)
                for line in rep.lines():
                    print(f"{s}: {line}")
            suite.wall_clock = time.perf_counter() - t0
            suite.write(out / "suite_report.json")
            final = suite
        else:
            final = _run_one(subcommand, cfg, out, jobs)
            for line in final.lines():
                print(line)
    except ConfigError as exc:
        err = {"error": "config", "subcommand": subcommand, "message": str(exc)}
        print(json.dumps(err), file=sys.stderr)
        try:
            out.mkdir(parents=True, exist_ok=True)
            (out / "error.json").write_text(json.dumps(err, indent=2) + "\n")
        except OSError:
            pass
        return 2
    return 0 if final.passed else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="obstaclehj", description=__doc__.split("\n")[0])
    parser.add_argument("subcommand", help=" | ".join(SUBCOMMANDS))
    parser.add_argument("--config", help="INI file overriding the built-in defaults")
    parser.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./runs)")
    parser.add_argument("--jobs", type=int, default=1, help="worker processes for sweeps")
    parser.add_argument("--seed", type=int, help="master seed (overrides [general] seed)")
    parser.add_argument("--problem", help="catalog key overriding every section's problem")
    args = parser.parse_args(argv)
    return run(args.subcommand, args.config, args.out, args.jobs, args.seed, args.problem)


if __name__ == "__main__":
    sys.exit(main())
