"""Acceptance criteria at full resolution; each test prints one PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s`` to see the lines inline; they are also
collected into the terminal summary.
"""
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import record_criterion, smooth_field
from obstaclehj import build_grid, get_problem
from obstaclehj.adjoint import (
    adjoint_mass_report,
    energy_refinement,
    key_estimate_sweep,
    key_stability_measure,
    select_x0,
    solve_adjoint,
)
from obstaclehj.catalog import CATALOG, catalog_keys
from obstaclehj.cauchy import (
    penalized_params,
    penalty_bound_constant,
    penalty_excess,
    solve_obstacle,
    solve_penalized,
    stability_gap,
)
from obstaclehj.ergodic import (
    discounted_schedule,
    ergodic_constant_discounted,
    ergodic_constant_longtime,
    solve_ergodic_obstacle,
)
from obstaclehj.report import loglog_slope
from obstaclehj.schemes import cfl_dt, default_params, discretize, step_penalized, step_projected
from obstaclehj.stopping_mc import verify_value_bounds

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT / "scripts"))

EPS_SCHEDULE = [0.4, 0.2, 0.1, 0.05]
PENALTY_ROUNDOFF = 1e-12
# discounted estimate on eikonal-cos-1d at N = 2048, alpha = 1e-3, delta = alpha^2 (computed once, frozen)
EIKONAL_ORACLE = 0.9965363670603611


def _failed(rep):
    return [v.line() for v in rep.verdicts if v.status == "FAIL"]


def test_c01_exact_decay_supercritical():
    t0 = time.perf_counter()
    traj = solve_obstacle(get_problem("supercritical-1d"), 2.0, build_grid(1, 128), store="endpoints")
    err = float(np.max(np.abs(traj.final + 2.0)))
    wall = time.perf_counter() - t0
    assert record_criterion("C1 exact decay", err <= 1e-3 and wall <= 5, f"sup|u+2| = {err:.2e}, {wall:.1f} s")


def test_c02_subcritical_obstacle_limit():
    t0 = time.perf_counter()
    p = get_problem("subcritical-obstacle-1d")
    g = build_grid(1, 256)
    traj = solve_obstacle(p, 10.0, g, store="endpoints")
    err = float(np.max(np.abs(traj.final)))
    a = solve_ergodic_obstacle(p, g, c_estimate=-1.0)
    b = solve_ergodic_obstacle(p, g, u0=discretize(p, g).obstacle - 1.0, c_estimate=-1.0)
    probe = float(np.max(np.abs(a.diagnostics["field"] - b.diagnostics["field"])))
    wall = time.perf_counter() - t0
    ok = err <= 5e-3 and probe <= 1e-6 and wall <= 30
    assert record_criterion("C2 obstacle limit", ok, f"sup|u(10)| = {err:.2e}, probe {probe:.1e}, {wall:.1f} s")


@pytest.mark.parametrize("recompute", [False, pytest.param(True, marks=pytest.mark.slow)])
def test_c03_ergodic_constant(recompute):
    t0 = time.perf_counter()
    p = get_problem("eikonal-cos-1d")
    c = discounted_schedule(p, build_grid(1, 512))["extrapolated"]
    oracle = EIKONAL_ORACLE
    if recompute:
        oracle, _ = ergodic_constant_discounted(p, 1e-3, 1e-6, build_grid(1, 2048))
    gaps = {}
    for key in catalog_keys(dim=1):
        q = get_problem(key)
        g = build_grid(1, 512)
        gaps[key] = abs(discounted_schedule(q, g)["extrapolated"] - ergodic_constant_longtime(q, 10.0, g))
    wall = time.perf_counter() - t0
    worst = max(gaps, key=gaps.get)
    ok = abs(c - oracle) <= 0.02 and abs(c - 1.0) <= 0.02 and gaps[worst] <= 0.02 and wall <= 120
    detail = (f"c = {c:.4f}, oracle {oracle:.4f}, worst estimator gap {gaps[worst]:.1e} ({worst}), "
              f"{wall:.0f} s")
    assert record_criterion("C3 ergodic constant" + (" (oracle recomputed)" if recompute else ""), ok, detail)


def test_c04_penalty_bound():
    violations, worst = [], -np.inf
    for key in sorted(CATALOG):
        p = get_problem(key)
        g = build_grid(p.dim, 32 if p.dim == 2 else 128)
        C = penalty_bound_constant(p, g)
        for eps in EPS_SCHEDULE:
            bound = C * (eps**2) ** 0.25
            excess = penalty_excess(solve_penalized(p, eps, eps**2, g, keep_log=False, store="all"))
            worst = max(worst, excess - bound)
            if excess > bound * (1 + PENALTY_ROUNDOFF):
                violations.append((key, eps, excess, bound))
    assert record_criterion("C4 penalty bound", not violations,
                            f"{len(violations)} violations, max(excess - bound) = {worst:.1e}")


def test_c05_adjoint_identities():
    t0 = time.perf_counter()
    p = get_problem("obstacle-bump-1d")
    fwd = solve_penalized(p, 0.2, 0.04, build_grid(1, 128), store="endpoints")
    adj = solve_adjoint(fwd, select_x0(fwd, 1)[0], duality_probes=1, seed=0)
    rep = adjoint_mass_report(adj, fwd)
    wall = time.perf_counter() - t0
    ok = rep.passed and len(rep.verdicts) == 6 and wall <= 60
    assert record_criterion("C5 adjoint identities", ok, "; ".join(v.line() for v in rep.verdicts))


def test_c06_energy_refinement():
    rep = energy_refinement(get_problem("obstacle-bump-1d"), 0.2, 64)
    assert record_criterion("C6 energy refinement", rep.passed, "; ".join(v.line() for v in rep.verdicts))


def test_c07_stability_rate():
    t0 = time.perf_counter()
    p = get_problem("subcritical-obstacle-1d")
    g = build_grid(1, 1024)
    gaps = [stability_gap(p, eps, g) for eps in EPS_SCHEDULE]
    slope = loglog_slope(EPS_SCHEDULE, gaps)
    wall = time.perf_counter() - t0
    monotone = all(b < a for a, b in zip(gaps, gaps[1:]))
    ok = monotone and slope >= 0.3 and wall <= 300
    detail = f"gaps {np.array2string(np.array(gaps), precision=4)}, slope {slope:.3f}, {wall:.0f} s"
    assert record_criterion("C7 stability rate", ok, detail)


def test_c08_key_stability():
    rep = key_stability_measure(get_problem("subcritical-obstacle-1d"), EPS_SCHEDULE, build_grid(1, 128), 0.15)
    detail = (f"eps*max|w_t| {np.array2string(np.array(rep.measured['values']), precision=3)}, "
              f"slope {rep.measured['slope']:.3g}")
    assert record_criterion("C8 key stability", rep.passed, detail)


def test_c09_key_estimate_scalings():
    bump = key_estimate_sweep(get_problem("obstacle-bump-1d"), EPS_SCHEDULE, build_grid(1, 64))
    visc = key_estimate_sweep(get_problem("viscous-cos-1d"), EPS_SCHEDULE, build_grid(1, 64))
    hess = next(v for v in visc.verdicts if v.check_id == "hessian-integral-max/min")
    ratios = [v for v in bump.verdicts if v.check_id in ("dW2-over-eps-max", "penalty-over-eps-max")]
    exponents = [v for v in bump.verdicts if v.check_id.endswith("-exponent")]
    ok = hess.status == "PASS" and len(ratios) == 2 and all(v.status == "PASS" for v in ratios)
    detail = "; ".join([hess.line() + " (viscous-cos-1d)"] + [v.line() for v in ratios + exponents])
    assert record_criterion("C9 key-estimate scalings", ok, detail)


def test_c10_control_representation():
    t0 = time.perf_counter()
    p = get_problem("obstacle-bump-1d")
    g = build_grid(1, 512)
    nodes = np.linspace(0, g.size, 16, endpoint=False).astype(int)
    rep = verify_value_bounds(p, g, 2.0, nodes, 10_000, seed=0)
    wall = time.perf_counter() - t0
    ok = rep.passed and wall <= 180
    assert record_criterion("C10 control representation", ok,
                            "; ".join(v.line() for v in rep.verdicts) + f"; {wall:.0f} s")


def _ordered_pair(p, g, disc, rng, feasible):
    u = disc.initial + rng.uniform(0, 1.2) + smooth_field(g, rng, 0.02)
    if feasible:
        u = np.minimum(disc.obstacle, u)
    v = u + np.abs(smooth_field(g, rng, 0.02)) + rng.uniform(0, 0.05)
    return u, (np.minimum(disc.obstacle, v) if feasible else v)


def test_c11_structural_properties():
    rng = np.random.default_rng(2024)
    order_violations = expansions = infeasible = 0
    for key in sorted(CATALOG):
        p = get_problem(key)
        g = build_grid(p.dim, 16 if p.dim == 2 else 32)
        disc = discretize(p, g)
        proj = default_params(p, g)
        pen = penalized_params(p, g, 0.2, 0.04)
        dt_proj, dt_pen = cfl_dt(g, proj, problem=p), cfl_dt(g, pen, problem=p)
        for _ in range(100):
            u, v = _ordered_pair(p, g, disc, rng, feasible=True)
            order_violations += int(np.any(step_projected(u, p, proj, dt_proj) > step_projected(v, p, proj, dt_proj)))
            a, b = _ordered_pair(p, g, disc, rng, feasible=False)
            order_violations += int(np.any(step_penalized(a, p, pen, dt_pen)[0] > step_penalized(b, p, pen, dt_pen)[0]))
        u, v = _ordered_pair(p, g, disc, rng, feasible=True)
        ta = solve_obstacle(p, 0.5, g, proj, u0=u, store="all")
        tb = solve_obstacle(p, 0.5, g, proj, u0=np.minimum(disc.obstacle, u + smooth_field(g, rng, 0.05)),
                            dt=ta.dt, store="all")
        axes = tuple(range(1, g.dim + 1))
        dist = np.max(np.abs(ta.snapshots - tb.snapshots), axis=axes)
        expansions += int(np.any(np.diff(dist) > 1e-15))
        infeasible += int(np.any(ta.snapshots > disc.obstacle))
    from check_reproducible import run_twice
    diffs = run_twice(str(ROOT / "configs" / "quick.ini"))
    ok = order_violations == 0 and expansions == 0 and infeasible == 0 and not diffs
    detail = (f"order violations {order_violations}, expansions {expansions}, infeasible {infeasible}, "
              f"suite artefact diffs {len(diffs)}")
    assert record_criterion("C11 structural properties", ok, detail)
