"""Discrete nonlinear adjoint: backward transport of sigma by the exact transpose of each
forward step's derivative, and the audits built on it.

Quadrature conventions (so that the discrete identities are algebraic):

* ``mass[n] = sum(sigma[n]) h^dim``;
* the penalty flux of step ``n`` is ``P[n] = <gamma' kappa, sigma[n+1]>``, with ``kappa`` the
  implicit-penalty damping, so that ``eps (mass[n+1] - mass[n]) = dt P[n]`` exactly;
* time integrals of ``sigma`` use the left rectangle rule over steps.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .cauchy import FieldTrajectory, solve_penalized
from .domain import ProblemSpec, TorusGrid
from .ergodic import ErgodicResult, solve_approx_ergodic
from .report import ExperimentReport, loglog_slope
from .schemes import LinearizedStep, discretize, penalty, spatial_operator, shifted


@dataclass
class AdjointTrajectory:
    grid: TorusGrid
    times: np.ndarray  # ascending, one per forward step state
    sigma: np.ndarray  # (n_steps + 1, *shape)
    x0: int  # flat node index of the terminal Dirac
    epsilon: float
    delta: float | None
    dt: float
    penalty_flux: np.ndarray  # P[n] = <gamma' kappa, sigma[n+1]>, n < n_steps
    duality_residuals: np.ndarray = field(default=None, repr=False)

    @property
    def mass(self) -> np.ndarray:
        return self.sigma.reshape(len(self.sigma), -1).sum(axis=1) * self.grid.cell_volume

    @property
    def n_steps(self) -> int:
        return len(self.sigma) - 1


def inner(f: np.ndarray, g: np.ndarray, grid: TorusGrid) -> float:
    return float(np.sum(f * g)) * grid.cell_volume


def discrete_dirac(grid: TorusGrid, node: int) -> np.ndarray:
    d = np.zeros(grid.shape)
    d.flat[node] = 1.0 / grid.cell_volume
    return d


def solve_adjoint(forward: FieldTrajectory, x0: int, duality_probes: int = 0,
                  seed: int = 0) -> AdjointTrajectory:
    """``sigma[n] = J_n^T sigma[n+1]`` from a discrete Dirac at node ``x0`` at rescaled time 1.

    ``duality_probes`` random fields per step are used to measure
    ``|<J f, sigma> - <f, J^T sigma>|`` relative to the Cauchy-Schwarz scale
    ``|J f| |sigma| + |f| |J^T sigma|`` (signed probes make the pairings themselves cancel).
    """
    if not forward.has_step_log:
        raise ValueError("forward trajectory has no step log; solve with keep_log=True")
    if forward.kind != "penalized":
        raise ValueError("the adjoint is defined for penalized runs")
    grid = forward.grid
    if not 0 <= x0 < grid.size:
        raise ValueError(f"x0 = {x0} is not a node index")
    n_steps = forward.n_steps
    sigma = np.empty((n_steps + 1,) + grid.shape)
    sigma[n_steps] = discrete_dirac(grid, x0)
    flux = np.empty(n_steps)
    rng = np.random.default_rng(seed)
    duality = np.zeros(n_steps) if duality_probes else None
    for n in range(n_steps - 1, -1, -1):
        lin = forward.linearized_step(n)
        s_next = sigma[n + 1]
        sigma[n] = lin.apply_transpose(s_next)
        flux[n] = inner(lin.effective_penalty, s_next, grid)
        for _ in range(duality_probes):
            f = rng.standard_normal(grid.shape)
            jf = lin.apply(f)
            a = inner(jf, s_next, grid)
            b = inner(f, sigma[n], grid)
            scale = (np.linalg.norm(jf) * np.linalg.norm(s_next)
                     + np.linalg.norm(f) * np.linalg.norm(sigma[n])) * grid.cell_volume
            duality[n] = max(duality[n], abs(a - b) / max(scale, 1e-300))
    return AdjointTrajectory(grid, forward.step_times, sigma, x0, forward.params.epsilon,
                             forward.params.penalty_delta, forward.dt, flux, duality)


def time_derivative_at_end(forward: FieldTrajectory) -> np.ndarray:
    """Backward difference ``(w(., 1) - w(., 1 - dt)) / dt``."""
    s = forward.states
    return (s[-1] - s[-2]) / forward.dt


def select_x0(forward: FieldTrajectory, k: int = 3) -> list[int]:
    """Nodes ordered by ``|w_t(., 1)|``, largest first (ties by index)."""
    d = np.abs(time_derivative_at_end(forward)).ravel()
    order = np.lexsort((np.arange(d.size), -d))
    return [int(i) for i in order[:k]]


# ---------------------------------------------------------------------------
# mass identities

def adjoint_mass_report(adjoint: AdjointTrajectory, forward: FieldTrajectory,
                        tol_identity: float = 1e-10, tol_mass: float = 1e-12) -> ExperimentReport:
    t0 = time.perf_counter()
    eps, dt = adjoint.epsilon, adjoint.dt
    rep = ExperimentReport("adjoint-mass", config={
        "problem": forward.problem.name, "N": adjoint.grid.points_per_axis, "epsilon": eps,
        "delta": adjoint.delta, "dt": dt, "x0": adjoint.x0})
    mass = adjoint.mass
    P = adjoint.penalty_flux
    min_sigma = float(np.min(adjoint.sigma))
    increments = np.diff(mass)
    # identity (ii): sum_n dt P[n] = eps (mass(1) - mass(0))
    lhs = float(np.sum(dt * P))
    rhs = eps * (mass[-1] - mass[0])
    # identity (iii): eps * iint sigma + sum_n dt sum_{m >= n} dt P[m] = eps
    space_time_mass = float(np.sum(dt * mass[:-1]))
    tail = np.cumsum((dt * P)[::-1])[::-1]
    iii = eps * space_time_mass + float(np.sum(dt * tail))
    rep.measured.update(min_sigma=min_sigma, terminal_mass=float(mass[-1]), initial_mass=float(mass[0]),
                        space_time_mass=space_time_mass, identity_ii_lhs=lhs, identity_ii_rhs=rhs,
                        identity_iii=iii, penalty_integral=lhs)
    rep.check("sigma-nonnegative", min_sigma, 0.0, ">=")
    rep.check("mass-monotone", float(np.min(increments)) if increments.size else 0.0,
              -tol_mass * float(np.max(mass)), ">=", note="min over steps of mass[n+1] - mass[n]")
    rep.check("identity-ii-residual", abs(lhs - rhs), tol_identity * eps)
    rep.check("identity-iii-residual", abs(iii - eps), tol_identity * eps)
    rep.check("space-time-mass", space_time_mass, 1.0 + tol_mass)
    if adjoint.duality_residuals is not None:
        rep.check("duality-per-step", float(np.max(adjoint.duality_residuals)), 1e-12)
    rep.wall_clock = time.perf_counter() - t0
    return rep


# ---------------------------------------------------------------------------
# energy conservation

def energy_series(forward: FieldTrajectory, adjoint: AdjointTrajectory) -> np.ndarray:
    """``E[n] = <S(w[n]) - gamma(w[n+1] - psi), sigma[n+1]>`` with ``S`` the scheme's own spatial
    operator; by construction ``E[n] = eps <(w[n+1] - w[n]) / dt, sigma[n+1]>``."""
    disc = discretize(forward.problem, forward.grid)
    params = forward.params
    w = forward.states
    out = np.empty(forward.n_steps)
    for n in range(forward.n_steps):
        forcing = spatial_operator(w[n], disc, params)
        if params.penalty_delta is not None:
            forcing = forcing - penalty(params.penalty_delta, w[n + 1] - disc.obstacle)
        out[n] = inner(forcing, adjoint.sigma[n + 1], forward.grid)
    return out


def energy_audit(forward: FieldTrajectory, adjoint: AdjointTrajectory) -> ExperimentReport:
    t0 = time.perf_counter()
    rep = ExperimentReport("energy", config={
        "problem": forward.problem.name, "N": forward.grid.points_per_axis,
        "epsilon": adjoint.epsilon, "dt": forward.dt, "x0": adjoint.x0})
    E = energy_series(forward, adjoint)
    drift = float(np.max(np.abs(E - E[-1])))
    eps_wt = adjoint.epsilon * float(time_derivative_at_end(forward).flat[adjoint.x0])
    integral = float(np.sum(forward.dt * E))
    recon = abs(eps_wt - integral)
    rep.measured.update(E_final=float(E[-1]), E_initial=float(E[0]), drift=drift,
                        eps_wt_x0=eps_wt, energy_integral=integral, reconstruction_residual=recon)
    rep.info("drift", drift)
    rep.info("reconstruction-residual", recon)
    rep.check("reconstruction-within-drift", recon, drift + 1e-12 * (1 + abs(eps_wt)))
    rep.wall_clock = time.perf_counter() - t0
    return rep


def energy_refinement(problem: ProblemSpec, epsilon: float, n_coarse: int, dt_coarse: float | None = None,
                      dim: int = 1) -> ExperimentReport:
    """Drift and reconstruction residual under ``(h, dt) -> (h/2, dt/4)``."""
    from .domain import build_grid
    from .cauchy import penalized_params
    from .schemes import cfl_dt

    t0 = time.perf_counter()
    g1 = build_grid(dim, n_coarse)
    g2 = build_grid(dim, 2 * n_coarse)
    delta = epsilon**2
    # shared lambda so both levels use the same flux
    params = penalized_params(problem, g2, epsilon, delta)
    if dt_coarse is None:
        dt_coarse = cfl_dt(g2, params, None, problem) * 4.0
        dt_coarse = min(dt_coarse, cfl_dt(g1, params, None, problem))
    out = {}
    for tag, grid, dt in (("coarse", g1, dt_coarse), ("fine", g2, dt_coarse / 4.0)):
        fwd = solve_penalized(problem, epsilon, delta, grid, params=params, dt=dt, store="endpoints")
        x0 = select_x0(fwd, 1)[0]
        # the same physical point on both grids: map the coarse choice to the fine grid
        if tag == "fine":
            x0 = out["coarse"]["x0_fine"]
        adj = solve_adjoint(fwd, x0)
        E = energy_series(fwd, adj)
        eps_wt = epsilon * float(time_derivative_at_end(fwd).flat[x0])
        out[tag] = {
            "dt": fwd.dt, "h": grid.spacing, "x0": x0,
            "drift": float(np.max(np.abs(E - E[-1]))),
            "reconstruction": abs(eps_wt - float(np.sum(fwd.dt * E))),
        }
        if tag == "coarse":
            idx = np.unravel_index(x0, grid.shape)
            out[tag]["x0_fine"] = int(np.ravel_multi_index(tuple(2 * i for i in idx), g2.shape))
    rep = ExperimentReport("energy-refinement", config={
        "problem": problem.name, "epsilon": epsilon, "N": [n_coarse, 2 * n_coarse],
        "dt": [out["coarse"]["dt"], out["fine"]["dt"]]})
    rep.measured.update(out)
    for key in ("drift", "reconstruction"):
        c, f = out["coarse"][key], out["fine"][key]
        ratio = c / f if f > 0 else float("inf")
        rep.measured[f"{key}_reduction"] = ratio
        rep.check(f"{key}-reduction", ratio, 3.0, ">=", note=f"coarse {c:.3e}, fine {f:.3e}")
    rep.wall_clock = time.perf_counter() - t0
    return rep


# ---------------------------------------------------------------------------
# key estimates

def _second_derivatives(w: np.ndarray, h: float) -> dict:
    """Centered ``w_{x_i x_j}`` keyed by ``(i, j)``, ``i <= j``."""
    out = {}
    for i in range(w.ndim):
        out[(i, i)] = (shifted(w, i, 1) - 2.0 * w + shifted(w, i, -1)) / (h * h)
        for j in range(i + 1, w.ndim):
            pp = shifted(shifted(w, i, 1), j, 1)
            pm = shifted(shifted(w, i, 1), j, -1)
            mp = shifted(shifted(w, i, -1), j, 1)
            mm = shifted(shifted(w, i, -1), j, -1)
            out[(i, j)] = (pp - pm - mp + mm) / (4.0 * h * h)
    return out


def _gradient(w: np.ndarray, h: float) -> list[np.ndarray]:
    return [(shifted(w, k, 1) - shifted(w, k, -1)) / (2.0 * h) for k in range(w.ndim)]


def _trapezoid(values: np.ndarray, dt: float) -> float:
    return float(dt * (np.sum(values) - 0.5 * (values[0] + values[-1])))


def key_estimate_integrals(forward: FieldTrajectory, adjoint: AdjointTrajectory,
                           ergodic_eps_result: ErgodicResult) -> dict:
    """Space-time integrals against ``sigma`` (trapezoid rule over every step).

    Returns ``hessian`` (the weighted Hessian integral), ``dW2``, ``penalty`` (both penalty
    terms), ``eps7_D2W2`` and ``aD2W2``.
    """
    grid = forward.grid
    h = grid.spacing
    eps = adjoint.epsilon
    delta = forward.params.penalty_delta
    disc = discretize(forward.problem, grid)
    a = disc.diffusion_axes
    V = ergodic_eps_result.diagnostics["field"]
    dV = _gradient(V, h)
    d2V = _second_derivatives(V, h)
    gV = penalty(delta, V - disc.obstacle)
    n = forward.n_steps + 1
    series = {k: np.empty(n) for k in ("hessian", "dW2", "penalty", "eps7_D2W2", "aD2W2")}
    for m in range(n):
        w = forward.states[m]
        s = adjoint.sigma[m]
        d2w = _second_derivatives(w, h)
        hess = 0.0
        for (i, j), v in d2w.items():
            mult = 1.0 if i == j else 2.0
            # a^{ij} w_{ik} w_{jk} for diagonal A: sum_i a_ii sum_k w_{ik}^2
            hess = hess + mult * (a[i] + a[j]) * 0.5 * v * v + mult * delta**2 * v * v
        gw = _gradient(w, h)
        dW2 = sum((p - q) ** 2 for p, q in zip(dV, gw))
        d2W = {k: d2V[k] - d2w[k] for k in d2w}
        D2W2 = sum((1.0 if i == j else 2.0) * v * v for (i, j), v in d2W.items())
        aD2W = sum(a[i] * d2W[(i, i)] for i in range(grid.dim))
        series["hessian"][m] = inner(hess, s, grid)
        series["dW2"][m] = inner(dW2, s, grid)
        series["penalty"][m] = inner(gV + penalty(delta, w - disc.obstacle), s, grid)
        series["eps7_D2W2"][m] = eps**7 * inner(D2W2, s, grid)
        series["aD2W2"][m] = inner(aD2W * aD2W, s, grid)
    return {k: _trapezoid(v, forward.dt) for k, v in series.items()}


def key_estimate_sweep(problem: ProblemSpec, epsilons, grid: TorusGrid) -> ExperimentReport:
    """Key-estimate integrals across an epsilon schedule with ratio checks and fitted exponents."""
    t0 = time.perf_counter()
    rep = ExperimentReport("key-estimates", config={"problem": problem.name, "N": grid.points_per_axis,
                                                    "epsilons": list(epsilons)})
    rows = []
    for eps in epsilons:
        fwd = solve_penalized(problem, eps, eps**2, grid, store="endpoints")
        x0 = select_x0(fwd, 1)[0]
        adj = solve_adjoint(fwd, x0)
        erg = solve_approx_ergodic(problem, eps, grid)
        vals = key_estimate_integrals(fwd, adj, erg)
        vals.update(epsilon=eps, x0=x0)
        rows.append(vals)
    rep.measured["rows"] = rows
    eps_arr = np.array(epsilons, dtype=float)
    hess = np.array([r["hessian"] for r in rows])
    dW2 = np.array([r["dW2"] for r in rows]) / eps_arr
    pen = np.array([r["penalty"] for r in rows]) / eps_arr
    rep.check("hessian-integral-max/min", float(hess.max() / hess.min()) if hess.min() > 0 else float("inf"), 10.0)
    rep.check("dW2-over-eps-max", float(dW2.max()), 10.0)
    rep.info("dW2-over-eps-max/min", float(dW2.max() / dW2.min()) if dW2.min() > 0 else float("inf"))
    rep.check("penalty-over-eps-max", float(pen.max()), 10.0)
    rep.info("penalty-over-eps-max/min", float(pen.max() / pen.min()) if pen.min() > 0 else float("inf"))
    for key, scale in (("eps7_D2W2", 0.0), ("aD2W2", 0.5)):
        vals = np.array([r[key] for r in rows])
        rep.info(f"{key}-exponent", loglog_slope(eps_arr, vals),
                 note=f"predicted scaling eps^{scale:g}; values {np.array2string(vals, precision=3)}")
    rep.wall_clock = time.perf_counter() - t0
    return rep


# ---------------------------------------------------------------------------
# key stability

def key_stability_measure(problem: ProblemSpec, epsilon_schedule, grid: TorusGrid,
                          min_slope: float = 0.15, ergodic_constant: float | None = None) -> ExperimentReport:
    """``eps * max |w_t(., 1)|`` across the schedule (backward difference in rescaled time)."""
    eps_list = [float(e) for e in epsilon_schedule]
    if len(eps_list) < 3:
        raise ValueError("key stability needs at least three epsilon values")
    t0 = time.perf_counter()
    rep = ExperimentReport("key-stability", config={"problem": problem.name, "N": grid.points_per_axis,
                                                    "dim": grid.dim, "epsilons": eps_list})
    if ergodic_constant is not None and ergodic_constant > 0.05:
        rep.info("not-applicable", ergodic_constant,
                 note="c_H > 0: eps |w_t| tends to c_H, the estimate concerns c_H <= 0")
    values, top3 = [], []
    for eps in eps_list:
        fwd = solve_penalized(problem, eps, eps**2, grid, store="endpoints")
        wt = time_derivative_at_end(fwd)
        values.append(eps * float(np.max(np.abs(wt))))
        top3.append([eps * float(abs(wt.flat[i])) for i in select_x0(fwd, 3)])
    order = np.argsort(eps_list)[::-1]
    ordered = [values[i] for i in order]
    strictly = all(b < a for a, b in zip(ordered, ordered[1:]))
    slope = loglog_slope([eps_list[i] for i in order], ordered)
    rep.measured.update(values=values, top3=top3, slope=slope)
    rep.require("strictly-decreasing", strictly, np.array2string(np.array(ordered), precision=4),
                note="eps |w_t(., 1)| in decreasing eps order")
    rep.check("fitted-slope", slope, min_slope, ">=")
    rep.wall_clock = time.perf_counter() - t0
    return rep
