"""Forward solvers: projected obstacle scheme, penalized rescaled approximation,
and the unconstrained equation; plus the penalization error measurements."""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .domain import ProblemSpec, TorusGrid, validate_problem
from .schemes import (
    LinearizedStep,
    SchemeParams,
    cfl_dt,
    default_params,
    discretize,
    check_cfl,
    free_update,
    penalized_update,
    projected_update,
    step_free,
    step_penalized,
    step_projected,
    uniform_steps,
)


@dataclass
class FieldTrajectory:
    grid: TorusGrid
    times: np.ndarray
    snapshots: np.ndarray  # (n_stored, *grid.shape)
    problem: ProblemSpec
    params: SchemeParams
    kind: str  # "obstacle" | "penalized" | "free"
    dt: float
    n_steps: int
    store_policy: str = "sampled"
    states: np.ndarray | None = field(default=None, repr=False)  # every step, when the log is kept

    @property
    def final(self) -> np.ndarray:
        return self.snapshots[-1]

    @property
    def has_step_log(self) -> bool:
        return self.states is not None

    @property
    def step_times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    def step(self, state: np.ndarray) -> np.ndarray:
        if self.kind == "obstacle":
            return step_projected(state, self.problem, self.params, self.dt)
        if self.kind == "free":
            return step_free(state, self.problem, self.params, self.dt)
        return step_penalized(state, self.problem, self.params, self.dt)[0]

    def linearized_step(self, n: int) -> LinearizedStep:
        """Frozen-coefficient derivative of step ``n`` (state ``n`` -> ``n+1``)."""
        if self.states is None:
            raise ValueError("trajectory was solved without a step log")
        if self.kind != "penalized":
            raise ValueError("linearized steps are only logged for penalized runs")
        return step_penalized(self.states[n], self.problem, self.params, self.dt)[1]

    def replay(self) -> np.ndarray:
        if self.states is None:
            raise ValueError("trajectory was solved without a step log")
        w = self.states[0].copy()
        for _ in range(self.n_steps):
            w = self.step(w)
        return w


def _store_indices(n_steps: int, policy: str, max_snapshots: int) -> np.ndarray:
    if policy == "all":
        return np.arange(n_steps + 1)
    if policy == "endpoints":
        return np.array([0, n_steps])
    if policy != "sampled":
        raise ValueError(f"unknown store policy {policy!r}")
    m = min(max_snapshots, n_steps + 1)
    return np.unique(np.round(np.linspace(0, n_steps, m)).astype(int))


def _integrate(stepper, u0: np.ndarray, n_steps: int, dt: float, policy: str,
               max_snapshots: int, keep_log: bool):
    keep = _store_indices(n_steps, policy, max_snapshots)
    keep_set = set(keep.tolist())
    snaps = []
    states = np.empty((n_steps + 1,) + u0.shape) if keep_log else None
    u = np.array(u0, dtype=float)
    for n in range(n_steps + 1):
        if n in keep_set:
            snaps.append(u.copy())
        if keep_log:
            states[n] = u
        if n < n_steps:
            u = stepper(u)
            if (n % 256 == 0 or n == n_steps - 1) and not np.all(np.isfinite(u)):
                raise FloatingPointError(f"non-finite field after step {n + 1}")
    return keep * dt, np.array(snaps), states


def _require_valid(problem: ProblemSpec, grid: TorusGrid, u0: np.ndarray | None):
    report = validate_problem(problem, grid)
    checks = dict(report.checks)
    if u0 is not None:
        checks["compatibility"] = bool(np.all(u0 <= discretize(problem, grid).obstacle))
    if not all(checks.values()):
        raise ValueError(f"problem {problem.name} fails validation: {report.violations[:3]}")


def solve_obstacle(problem: ProblemSpec, T: float, grid: TorusGrid, params: SchemeParams | None = None,
                   u0: np.ndarray | None = None, dt: float | None = None, store: str = "sampled",
                   max_snapshots: int = 256) -> FieldTrajectory:
    """Projection scheme for ``max{u_t - tr(A D^2u) + H(x,Du), u - psi} = 0`` on ``[0, T]``."""
    if not T > 0:
        raise ValueError("T must be positive")
    _require_valid(problem, grid, u0)
    params = params or default_params(problem, grid)
    params = params.updated(epsilon=1.0, penalty_delta=None)
    start = discretize(problem, grid).initial if u0 is None else np.asarray(u0, dtype=float)
    dt_max = cfl_dt(grid, params, start, problem)
    if dt is not None:
        dt_max = min(dt_max, dt)
    n, dt = uniform_steps(T, dt_max)
    disc = discretize(problem, grid)
    check_cfl(disc, params, dt)
    times, snaps, _ = _integrate(lambda u: projected_update(u, disc, params, dt), start, n, dt,
                                 store, max_snapshots, keep_log=False)
    return FieldTrajectory(grid, times, snaps, problem, params, "obstacle", dt, n, store)


def solve_free(problem: ProblemSpec, T: float, grid: TorusGrid, params: SchemeParams | None = None,
               u0: np.ndarray | None = None, dt: float | None = None, store: str = "sampled",
               max_snapshots: int = 256) -> FieldTrajectory:
    """Unconstrained ``u_t - tr(A D^2u) + H(x,Du) = 0`` (obstacle ignored)."""
    params = params or default_params(problem, grid)
    params = params.updated(epsilon=1.0, penalty_delta=None)
    start = discretize(problem, grid).initial if u0 is None else np.asarray(u0, dtype=float)
    dt_max = cfl_dt(grid, params, start, problem)
    if dt is not None:
        dt_max = min(dt_max, dt)
    n, dt = uniform_steps(T, dt_max)
    disc = discretize(problem, grid)
    check_cfl(disc, params, dt)
    times, snaps, _ = _integrate(lambda u: free_update(u, disc, params, dt), start, n, dt,
                                 store, max_snapshots, keep_log=False)
    return FieldTrajectory(grid, times, snaps, problem, params, "free", dt, n, store)


def penalized_params(problem: ProblemSpec, grid: TorusGrid, epsilon: float, delta: float | None,
                     params: SchemeParams | None = None, viscosity: float | None = None) -> SchemeParams:
    params = params or default_params(problem, grid)
    if viscosity is None:
        viscosity = 0.0 if delta is None else delta**2
    return params.updated(epsilon=epsilon, penalty_delta=delta, artificial_viscosity=viscosity)


def solve_penalized(problem: ProblemSpec, epsilon: float, delta: float | None, grid: TorusGrid,
                    params: SchemeParams | None = None, viscosity: float | None = None,
                    dt: float | None = None, keep_log: bool = True, store: str = "sampled",
                    max_snapshots: int = 256, u0: np.ndarray | None = None) -> FieldTrajectory:
    """``eps w_t - tr(A D^2 w) + H(x,Dw) + gamma^delta(w - psi) = delta^2 Lap w`` on rescaled ``[0, 1]``.

    ``delta=None`` switches the penalty off; ``viscosity`` overrides the ``delta^2`` coefficient.
    """
    if not 0 < epsilon <= 1:
        raise ValueError("epsilon must lie in (0, 1]")
    if delta is not None and not delta > 0:
        raise ValueError("delta must be positive (or None to disable the penalty)")
    _require_valid(problem, grid, u0)
    params = penalized_params(problem, grid, epsilon, delta, params, viscosity)
    start = discretize(problem, grid).initial if u0 is None else np.asarray(u0, dtype=float)
    dt_max = cfl_dt(grid, params, start, problem)
    if dt is not None:
        dt_max = min(dt_max, dt)
    n, dt = uniform_steps(1.0, dt_max)
    disc = discretize(problem, grid)
    check_cfl(disc, params, dt)
    times, snaps, states = _integrate(lambda w: penalized_update(w, disc, params, dt)[0], start, n, dt,
                                      store, max_snapshots, keep_log)
    return FieldTrajectory(grid, times, snaps, problem, params, "penalized", dt, n, store, states)


@dataclass
class GapResult:
    epsilon: float
    gap: float
    dt: float
    n_steps: int
    h: float


def stability_gap_details(problem: ProblemSpec, epsilon: float, grid: TorusGrid,
                          params: SchemeParams | None = None, penalize: bool = True) -> GapResult:
    """``||w^{eps,eps^2}(.,1) - u(.,1/eps)||_inf`` with both runs sharing the step count."""
    delta = epsilon**2 if penalize else None
    pen = solve_penalized(problem, epsilon, delta, grid, params, keep_log=False, store="endpoints")
    ref_params = pen.params.updated(epsilon=1.0, penalty_delta=None, artificial_viscosity=0.0)
    ref = solve_obstacle(problem, 1.0 / epsilon, grid, ref_params, dt=pen.dt / epsilon, store="endpoints")
    if ref.n_steps != pen.n_steps:
        raise RuntimeError("reference and penalized runs did not share the step count")
    gap = float(np.max(np.abs(pen.final - ref.final)))
    return GapResult(epsilon, gap, pen.dt, pen.n_steps, grid.spacing)


def stability_gap(problem: ProblemSpec, epsilon: float, grid: TorusGrid,
                  params: SchemeParams | None = None, penalize: bool = True) -> float:
    return stability_gap_details(problem, epsilon, grid, params, penalize).gap


def delta_sensitivity(problem: ProblemSpec, epsilon: float, delta: float, grid: TorusGrid,
                      params: SchemeParams | None = None, bump: float = 0.05) -> float:
    """Finite-difference surrogate ``||w^{eps,(1+bump)delta}(.,1) - w^{eps,delta}(.,1)|| / (bump delta)``."""
    d1 = (1.0 + bump) * delta
    base = penalized_params(problem, grid, epsilon, d1, params)
    start = discretize(problem, grid).initial
    dt = cfl_dt(grid, base, start, problem)  # the larger viscosity bounds both runs
    w0 = solve_penalized(problem, epsilon, delta, grid, params, dt=dt, keep_log=False, store="endpoints")
    w1 = solve_penalized(problem, epsilon, d1, grid, params, dt=dt, keep_log=False, store="endpoints")
    return float(np.max(np.abs(w1.final - w0.final)) / (bump * delta))


def penalty_excess(traj: FieldTrajectory) -> float:
    """``max over stored nodes/times of (w - psi)_+``."""
    psi = discretize(traj.problem, traj.grid).obstacle
    src = traj.states if traj.states is not None else traj.snapshots
    return float(np.max(np.maximum(src - psi, 0.0)))


def penalty_bound_constant(problem: ProblemSpec, grid: TorusGrid) -> float:
    """``sqrt(2 max(|tr(A D^2 psi)| + |H(x, D psi)| + |Lap psi|))`` from analytic derivatives."""
    x = grid.points
    psi = problem.obstacle
    hess = psi.hess(x)
    a = problem.diffusion.diagonal_at(x)
    tr = np.sum(a * np.diagonal(hess, axis1=-2, axis2=-1), axis=-1)
    ham = problem.hamiltonian.value(x, psi.grad(x))
    lap = np.trace(hess, axis1=-2, axis2=-1)
    return float(np.sqrt(2.0 * np.max(np.abs(tr) + np.abs(ham) + np.abs(lap))))


def discrete_lipschitz(w: np.ndarray, h: float) -> float:
    return float(max(np.max(np.abs(np.roll(w, -1, axis=k) - w)) for k in range(w.ndim)) / h)


# ---------------------------------------------------------------------------
# export

def _coordinate_columns(grid: TorusGrid) -> list[str]:
    return ["x", "y"][: grid.dim]


def write_field_csv(path: Path, grid: TorusGrid, values: np.ndarray, value_name: str = "value") -> str:
    pts = grid.points.reshape(-1, grid.dim)
    flat = np.asarray(values).reshape(-1)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_coordinate_columns(grid) + [value_name])
        for p, v in zip(pts, flat):
            writer.writerow([repr(float(c)) for c in p] + [repr(float(v))])
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def export_snapshots(out_dir: Path, grid: TorusGrid, times, snapshots, prefix: str,
                     params: dict, value_name: str = "value") -> Path:
    """One CSV per snapshot plus ``<prefix>_manifest.json`` with times and sha256 checksums."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (t, snap) in enumerate(zip(times, snapshots)):
        name = f"{prefix}_{i:04d}.csv"
        digest = write_field_csv(out_dir / name, grid, snap, value_name)
        entries.append({"index": i, "time": float(t), "file": name, "sha256": digest})
    manifest = {
        "prefix": prefix,
        "dim": grid.dim,
        "points_per_axis": grid.points_per_axis,
        "columns": _coordinate_columns(grid) + [value_name],
        "parameters": params,
        "snapshots": entries,
    }
    path = out_dir / f"{prefix}_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def export_trajectory(traj: FieldTrajectory, out_dir: Path, prefix: str = "u") -> Path:
    params = {
        "problem": traj.problem.name,
        "kind": traj.kind,
        "dt": traj.dt,
        "n_steps": traj.n_steps,
        "lf_dissipation": list(traj.params.lf_dissipation),
        "cfl_safety": traj.params.cfl_safety,
        "penalty_delta": traj.params.penalty_delta,
        "artificial_viscosity": traj.params.artificial_viscosity,
        "epsilon": traj.params.epsilon,
        "store_policy": traj.store_policy,
    }
    return export_snapshots(out_dir, traj.grid, traj.times, traj.snapshots, prefix, params)
