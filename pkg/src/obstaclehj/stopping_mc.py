"""Monte Carlo upper bounds for the optimal-stopping representation of the obstacle problem.

Paths follow ``dX = -xi ds + sqrt(2) s(X) dW`` with ``s s^T = A``; the factor ``sqrt(2)``
makes the generator ``tr(A D^2)``, matching the diffusion term of the evolution equation.
Along a path the cost is ``int_0^theta L(X, xi) ds + h(X(theta), t - theta)`` with
``h = psi`` for an early stop and ``h = u0`` at ``theta = t``. Any non-anticipating control and
stopping rule gives an upper bound on the value.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .cauchy import solve_obstacle
from .domain import ProblemSpec, TorusGrid, lagrangian_eval
from .report import ExperimentReport
from .schemes import discretize, shifted

Z95 = 1.959963984540054


@dataclass(frozen=True)
class DiffusionRoot:
    """Diagonal square root ``s(x) = diag(sqrt(a^ii(x)))`` of the diagonal diffusion."""

    problem: ProblemSpec

    def at(self, x: np.ndarray) -> np.ndarray:
        return np.sqrt(np.maximum(self.problem.diffusion.diagonal_at(x), 0.0))

    def on_grid(self, grid: TorusGrid) -> np.ndarray:
        return self.at(grid.points)

    def factorization_error(self, grid: TorusGrid) -> float:
        """``max |s s^T - A|`` over the nodes."""
        s = self.on_grid(grid)
        return float(np.max(np.abs(s * s - discretize(self.problem, grid).diffusion)))


@dataclass
class PathEnsemble:
    M: int
    dt: float
    running_cost: np.ndarray
    stop_time: np.ndarray
    payoff: np.ndarray
    seed: int
    horizon: float

    @property
    def totals(self) -> np.ndarray:
        return self.running_cost + self.payoff

    def estimate(self) -> tuple[float, float]:
        tot = self.totals
        return float(np.mean(tot)), float(Z95 * np.std(tot, ddof=1) / np.sqrt(self.M))


# ---------------------------------------------------------------------------
# PDE value lookups

def _periodic_interp(field_: np.ndarray, x: np.ndarray, grid: TorusGrid) -> np.ndarray:
    """Multilinear periodic interpolation of a node field at points ``x`` of shape ``(M, dim)``."""
    N = grid.points_per_axis
    y = np.mod(x, 1.0) * N
    i0 = np.floor(y).astype(int)
    frac = y - i0
    i0 %= N
    i1 = (i0 + 1) % N
    if grid.dim == 1:
        f = field_
        return (1.0 - frac[:, 0]) * f[i0[:, 0]] + frac[:, 0] * f[i1[:, 0]]
    f = field_
    fx, fy = frac[:, 0], frac[:, 1]
    return ((1 - fx) * (1 - fy) * f[i0[:, 0], i0[:, 1]] + fx * (1 - fy) * f[i1[:, 0], i0[:, 1]]
            + (1 - fx) * fy * f[i0[:, 0], i1[:, 1]] + fx * fy * f[i1[:, 0], i1[:, 1]])


@dataclass
class PDEValue:
    """Projection-scheme value ``u(., tau)`` on stored times with time-linear lookup."""

    grid: TorusGrid
    times: np.ndarray
    snapshots: np.ndarray
    gradients: np.ndarray = field(repr=False, default=None)  # (n_times, *shape, dim), centered

    @classmethod
    def solve(cls, problem: ProblemSpec, grid: TorusGrid, t: float, max_snapshots: int = 2001) -> "PDEValue":
        traj = solve_obstacle(problem, t, grid, store="sampled", max_snapshots=max_snapshots)
        h = grid.spacing
        grads = np.stack([
            np.stack([(shifted(u, k, 1) - shifted(u, k, -1)) / (2 * h) for k in range(grid.dim)], axis=-1)
            for u in traj.snapshots])
        return cls(grid, traj.times, traj.snapshots, grads)

    def _bracket(self, tau: float):
        tau = min(max(tau, 0.0), float(self.times[-1]))
        j = int(np.searchsorted(self.times, tau, side="right")) - 1
        j = min(max(j, 0), len(self.times) - 2)
        w = (tau - self.times[j]) / (self.times[j + 1] - self.times[j])
        return j, w

    def value(self, x: np.ndarray, tau: float) -> np.ndarray:
        j, w = self._bracket(tau)
        return ((1 - w) * _periodic_interp(self.snapshots[j], x, self.grid)
                + w * _periodic_interp(self.snapshots[j + 1], x, self.grid))

    def gradient(self, x: np.ndarray, tau: float) -> np.ndarray:
        j, w = self._bracket(tau)
        return np.stack([
            (1 - w) * _periodic_interp(self.gradients[j][..., k], x, self.grid)
            + w * _periodic_interp(self.gradients[j + 1][..., k], x, self.grid)
            for k in range(self.grid.dim)], axis=-1)

    def at_node(self, node: int, tau: float) -> float:
        j, w = self._bracket(tau)
        return float((1 - w) * self.snapshots[j].flat[node] + w * self.snapshots[j + 1].flat[node])


# ---------------------------------------------------------------------------
# policies and stop rules

@dataclass(frozen=True)
class Policy:
    """Feedback control ``xi(x, s, rng)`` for paths at positions ``x`` (shape ``(M, dim)``)."""

    name: str
    control: Callable[[np.ndarray, float, np.random.Generator], np.ndarray]


@dataclass(frozen=True)
class StopRule:
    """``stop(x, s) -> bool mask``; evaluated only while ``s < t``."""

    name: str
    stop: Callable[[np.ndarray, float], np.ndarray]


def zero_policy(dim: int) -> Policy:
    return Policy("zero", lambda x, s, rng: np.zeros((len(x), dim)))


def constant_policy(direction) -> Policy:
    d = np.asarray(direction, dtype=float)
    return Policy(f"constant{tuple(d.tolist())}", lambda x, s, rng: np.broadcast_to(d, (len(x), d.size)).copy())


def random_policy(dim: int, scale: float = 2.0) -> Policy:
    return Policy(f"random(scale={scale:g})", lambda x, s, rng: scale * rng.standard_normal((len(x), dim)))


def feedback_policy(problem: ProblemSpec, pde: PDEValue, t: float) -> Policy:
    """``xi = D_pH(x, Du(x, t - s))``, the minimizer in the Legendre transform."""
    ham = problem.hamiltonian

    def control(x, s, rng):
        return ham.grad_p(x, pde.gradient(x, t - s))

    return Policy("feedback", control)


def never_stop() -> StopRule:
    return StopRule("never", lambda x, s: np.zeros(len(x), dtype=bool))


def stop_immediately() -> StopRule:
    return StopRule("immediate", lambda x, s: np.ones(len(x), dtype=bool))


def contact_band(problem: ProblemSpec, pde: PDEValue, t: float, band: float | None = None) -> StopRule:
    """Stop where ``|u(x, t - s) - psi(x)| <= band`` (default ``2h``)."""
    band = 2.0 * pde.grid.spacing if band is None else band
    psi = problem.obstacle

    def stop(x, s):
        return np.abs(pde.value(x, t - s) - psi(x)) <= band

    return StopRule(f"contact-band({band:g})", stop)


# ---------------------------------------------------------------------------
# simulation

def simulate_paths(problem: ProblemSpec, x, t: float, policy: Policy, stop_rule: StopRule, M: int,
                   seed: int, dt: float | None = None) -> list[PathEnsemble]:
    """``M`` paths from each start point in ``x`` (shape ``(dim,)`` or ``(K, dim)``).

    Brownian increments for start ``k`` come from the ``k``-th stream spawned from ``seed``
    (one draw for all ``M`` paths per step, used by the paths still running); randomized
    controls draw from one extra stream.
    """
    if M < 100:
        raise ValueError("need at least 100 paths")
    if problem.hamiltonian.family != "quadratic-with-drift":
        raise ValueError(f"closed-form Lagrangian unavailable for family {problem.hamiltonian.family!r}")
    if not t > 0:
        raise ValueError("t must be positive")
    dim = problem.dim
    starts = np.asarray(x, dtype=float).reshape(-1, dim)
    K = len(starts)
    dt_max = 1e-3 * t
    dt = dt_max if dt is None else min(dt, dt_max)
    n_steps = int(np.ceil(t / dt * (1 - 1e-12)))
    dt = t / n_steps
    root = DiffusionRoot(problem)
    ham = problem.hamiltonian
    streams = np.random.SeedSequence(seed).spawn(K + 1)
    noise = [np.random.default_rng(c) for c in streams[:K]]
    control_rng = np.random.default_rng(streams[K])

    X = np.repeat(starts, M, axis=0)
    active = np.ones(K * M, dtype=bool)
    cost = np.zeros(K * M)
    pay = np.zeros(K * M)
    theta = np.full(K * M, t)
    sq = np.sqrt(2.0 * dt)
    dW = np.empty((K * M, dim))
    for k in range(n_steps):
        s = k * dt
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        Xa = X[idx]
        halt = stop_rule.stop(Xa, s)
        if np.any(halt):
            h_idx = idx[halt]
            pay[h_idx] = problem.obstacle(X[h_idx])
            theta[h_idx] = s
            active[h_idx] = False
            keep = ~halt
            idx, Xa = idx[keep], Xa[keep]
            if idx.size == 0:
                break
        xi = policy.control(Xa, s, control_rng)
        cost[idx] += dt * lagrangian_eval(ham, Xa, xi)
        for j, g in enumerate(noise):
            dW[j * M:(j + 1) * M] = g.standard_normal((M, dim))
        X[idx] = np.mod(Xa - xi * dt + sq * root.at(Xa) * dW[idx], 1.0)
    rest = np.nonzero(active)[0]
    pay[rest] = problem.initial(X[rest])
    return [PathEnsemble(M, dt, cost[j * M:(j + 1) * M], theta[j * M:(j + 1) * M],
                         pay[j * M:(j + 1) * M], seed, t) for j in range(K)]


def mc_value_upper(problem: ProblemSpec, x, t: float, policy: Policy, stop_rule: StopRule, M: int,
                   seed: int, dt: float | None = None) -> tuple[float, float]:
    """Sample mean and 95% half-width of the path cost under ``policy`` and ``stop_rule``."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size != problem.dim:
        raise ValueError("mc_value_upper takes a single start point")
    return simulate_paths(problem, x, t, policy, stop_rule, M, seed, dt)[0].estimate()


# ---------------------------------------------------------------------------
# verification battery

def standard_policies(problem: ProblemSpec, pde: PDEValue, t: float) -> list[tuple[Policy, StopRule]]:
    dim = problem.dim
    return [
        (feedback_policy(problem, pde, t), contact_band(problem, pde, t)),
        (zero_policy(dim), never_stop()),
        (random_policy(dim), contact_band(problem, pde, t)),
        (constant_policy(np.full(dim, 1.0)), never_stop()),
        (zero_policy(dim), stop_immediately()),
    ]


def verify_value_bounds(problem: ProblemSpec, grid: TorusGrid, t: float, sample_nodes, M: int,
                        seed: int = 0, slack: float = 1e-2, tight_tol: float = 5e-2,
                        pde: PDEValue | None = None) -> ExperimentReport:
    t0 = time.perf_counter()
    rep = ExperimentReport("mc-verify", config={"problem": problem.name, "N": grid.points_per_axis,
                                                "t": t, "M": M, "seed": seed,
                                                "sample_nodes": [int(n) for n in sample_nodes]})
    pde = pde or PDEValue.solve(problem, grid, t)
    pts = grid.points.reshape(-1, grid.dim)
    policies = standard_policies(problem, pde, t)
    seeds = np.random.SeedSequence(seed).generate_state(len(policies))
    nodes = [int(n) for n in sample_nodes]
    ensembles = [simulate_paths(problem, pts[nodes], t, pol, rule, M, int(seeds[j]))
                 for j, (pol, rule) in enumerate(policies)]
    rows = []
    violations = 0
    tight = 0
    for i, node in enumerate(nodes):
        u = pde.at_node(node, t)
        for j, (pol, rule) in enumerate(policies):
            est, hw = ensembles[j][i].estimate()
            dominated = u <= est + hw + slack
            violations += not dominated
            row = {"node": int(node), "x": pts[int(node)].tolist(), "policy": pol.name, "stop": rule.name,
                   "u_pde": u, "estimate": est, "half_width": hw, "dominated": bool(dominated)}
            if pol.name == "feedback":
                gap = abs(est - u)
                row["tight"] = bool(gap <= tight_tol + hw)
                tight += row["tight"]
            rows.append(row)
    pairs = len(sample_nodes) * len(policies)
    rep.measured.update(rows=rows, violation_fraction=violations / pairs,
                        tight_fraction=tight / len(sample_nodes))
    rep.check("dominance-violation-fraction", violations / pairs, 0.01, "<")
    rep.check("feedback-tightness-fraction", tight / len(sample_nodes), 0.8, ">=")
    rep.wall_clock = time.perf_counter() - t0
    return rep
