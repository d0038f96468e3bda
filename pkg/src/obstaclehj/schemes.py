"""Monotone Lax-Friedrichs discretization, penalty, CFL control and single steps.

Fields are plain ndarrays of shape ``grid.shape``; axis ``k`` of the array is
spatial axis ``k`` and every difference wraps periodically.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .domain import ProblemSpec, TorusGrid, hamiltonian_eval


class SchemeError(RuntimeError):
    """CFL or Lax-Friedrichs bound violated, or the penalty solve failed."""


# ---------------------------------------------------------------------------
# penalty gamma^delta(r) = r_+^2 / (2 sqrt(delta))

def penalty(delta: float, r):
    if not delta > 0:
        raise ValueError("penalty parameter delta must be positive")
    rp = np.maximum(r, 0.0)
    return rp * rp / (2.0 * np.sqrt(delta))


def penalty_prime(delta: float, r):
    if not delta > 0:
        raise ValueError("penalty parameter delta must be positive")
    return np.maximum(r, 0.0) / np.sqrt(delta)


# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SchemeParams:
    lf_dissipation: tuple[float, ...]
    cfl_safety: float = 0.5
    penalty_delta: float | None = None  # None: no penalty term
    artificial_viscosity: float = 0.0
    epsilon: float = 1.0

    def __post_init__(self):
        if any(not lam > 0 for lam in self.lf_dissipation):
            raise ValueError("Lax-Friedrichs dissipation must be positive")
        if not 0 < self.cfl_safety <= 1:
            raise ValueError("cfl_safety must lie in (0, 1]")
        if self.penalty_delta is not None and not self.penalty_delta > 0:
            raise ValueError("penalty_delta must be positive (or None)")
        if self.artificial_viscosity < 0:
            raise ValueError("artificial_viscosity must be nonnegative")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")

    def updated(self, **kw) -> "SchemeParams":
        return replace(self, **kw)


@dataclass(frozen=True)
class Discretization:
    """Coefficient fields of a problem sampled on a grid."""

    grid: TorusGrid
    potential: np.ndarray
    drift: np.ndarray  # (*shape, dim)
    diffusion: np.ndarray  # (*shape, dim), diagonal of A
    obstacle: np.ndarray
    initial: np.ndarray

    @property
    def drift_axes(self) -> tuple[np.ndarray, ...]:
        return tuple(self.drift[..., k] for k in range(self.grid.dim))

    @property
    def diffusion_axes(self) -> tuple[np.ndarray, ...]:
        return tuple(self.diffusion[..., k] for k in range(self.grid.dim))

    @property
    def has_drift(self) -> bool:
        return bool(np.any(self.drift != 0))


@lru_cache(maxsize=64)
def discretize(problem: ProblemSpec, grid: TorusGrid) -> Discretization:
    if grid.dim != problem.dim:
        raise ValueError("grid and problem dimensions differ")
    x = grid.points
    ham = problem.hamiltonian
    disc = Discretization(
        grid,
        ham.potential(x),
        ham.drift_at(x),
        problem.diffusion.diagonal_at(x),
        problem.obstacle(x),
        problem.initial(x),
    )
    for arr in (disc.potential, disc.drift, disc.diffusion, disc.obstacle, disc.initial):
        arr.setflags(write=False)
    return disc


def grid_of(w: np.ndarray) -> TorusGrid:
    if w.ndim not in (1, 2) or len(set(w.shape)) != 1:
        raise ValueError(f"field shape {w.shape} is not a square torus grid")
    return TorusGrid(w.ndim, w.shape[0])


def shifted(w: np.ndarray, axis: int, step: int) -> np.ndarray:
    """Periodic shift: ``shifted(w, k, +1)[i] = w[i + e_k]``."""
    out = np.empty_like(w)
    lead = (slice(None),) * axis
    if step == 1:
        out[lead + (slice(None, -1),)] = w[lead + (slice(1, None),)]
        out[lead + (slice(-1, None),)] = w[lead + (slice(None, 1),)]
    elif step == -1:
        out[lead + (slice(1, None),)] = w[lead + (slice(None, -1),)]
        out[lead + (slice(None, 1),)] = w[lead + (slice(-1, None),)]
    else:
        return np.roll(w, -step, axis=axis)
    return out


def one_sided_gradients(w: np.ndarray, h: float):
    """Backward and forward differences, each of shape ``(*shape, dim)``."""
    dm = np.stack([(w - np.roll(w, 1, axis=k)) / h for k in range(w.ndim)], axis=-1)
    dp = np.stack([(np.roll(w, -1, axis=k) - w) / h for k in range(w.ndim)], axis=-1)
    return dm, dp


def second_differences(w: np.ndarray, h: float) -> np.ndarray:
    return np.stack(
        [(np.roll(w, -1, axis=k) - 2.0 * w + np.roll(w, 1, axis=k)) / (h * h) for k in range(w.ndim)],
        axis=-1,
    )


def numerical_hamiltonian(spec, x, p_minus, p_plus, lam):
    """Lax-Friedrichs flux ``H(x, (p- + p+)/2) - sum_i lam_i (p+_i - p-_i) / 2``."""
    p_minus = np.asarray(p_minus, dtype=float)
    p_plus = np.asarray(p_plus, dtype=float)
    lam = np.broadcast_to(np.asarray(lam, dtype=float), p_minus.shape[-1:])
    pbar = 0.5 * (p_minus + p_plus)
    return spec.value(x, pbar) - 0.5 * np.sum(lam * (p_plus - p_minus), axis=-1)


def lf_numerical_hamiltonian(disc: Discretization, dm: np.ndarray, dp: np.ndarray, lam) -> np.ndarray:
    """Same flux as :func:`numerical_hamiltonian`, on pre-sampled coefficients."""
    q = 0.5 * (dm + dp) - disc.drift
    return 0.5 * np.sum(q * q, axis=-1) + disc.potential - 0.5 * np.sum(np.asarray(lam) * (dp - dm), axis=-1)


def choose_lambda(problem: ProblemSpec, grid: TorusGrid, field: np.ndarray | None = None,
                  factor: float = 1.1) -> tuple[float, ...]:
    """Per-axis dissipation: ``factor`` times the largest ``|D_pH|`` over the a priori gradient box
    and over the one-sided gradients of ``field``."""
    disc = discretize(problem, grid)
    bound = problem.lipschitz_bound()
    bmax = np.max(np.abs(disc.drift.reshape(-1, grid.dim)), axis=0)
    lam = bound + bmax
    if field is not None:
        dm, dp = one_sided_gradients(field, grid.spacing)
        for g in (dm, dp):
            lam = np.maximum(lam, np.max(np.abs(g - disc.drift).reshape(-1, grid.dim), axis=0))
    return tuple(float(factor * v) for v in lam)


def default_params(problem: ProblemSpec, grid: TorusGrid, **kw) -> SchemeParams:
    return SchemeParams(choose_lambda(problem, grid, discretize(problem, grid).initial), **kw)


def cfl_dt(grid: TorusGrid, params: SchemeParams, current_field: np.ndarray | None = None,
           problem: ProblemSpec | None = None) -> float:
    """Largest time step keeping every explicit stencil weight nonnegative, times ``cfl_safety``.

    For rescaled runs (``epsilon < 1``) the step is in rescaled time, i.e. multiplied by epsilon.
    """
    h = grid.spacing
    if not h > 0:
        raise ValueError("grid spacing must be positive")
    if current_field is not None and not np.all(np.isfinite(current_field)):
        raise SchemeError("current field is not finite")
    max_tr = 0.0
    if problem is not None:
        max_tr = float(np.max(np.sum(discretize(problem, grid).diffusion, axis=-1)))
    lam = np.broadcast_to(np.asarray(params.lf_dissipation, dtype=float), (grid.dim,))
    rate = 2.0 * max_tr / h**2 + 2.0 * grid.dim * params.artificial_viscosity / h**2 + float(np.sum(lam)) / h
    return params.cfl_safety / rate * params.epsilon


def uniform_steps(T: float, dt_max: float) -> tuple[int, float]:
    n = int(np.ceil(T / dt_max * (1.0 - 1e-12)))
    n = max(n, 1)
    return n, T / n


# ---------------------------------------------------------------------------
# linearized explicit operator

@dataclass(frozen=True)
class Generator:
    """Frozen-coefficient linearization ``L f = sum_k up_k (f(+e_k) - f) + down_k (f(-e_k) - f)``
    of the spatial operator ``tr(A D^2 w) + nu Lap w - Hhat(Dw)``; all weights nonnegative."""

    up: tuple[np.ndarray, ...]
    down: tuple[np.ndarray, ...]
    advection: np.ndarray  # D_p H(x, centered gradient)

    def __call__(self, f: np.ndarray) -> np.ndarray:
        out = np.zeros_like(f, dtype=float)
        for k, (u, d) in enumerate(zip(self.up, self.down)):
            out += u * (shifted(f, k, 1) - f) + d * (shifted(f, k, -1) - f)
        return out

    def matrix(self) -> sp.csr_matrix:
        shape = self.up[0].shape
        n = int(np.prod(shape))
        idx = np.arange(n).reshape(shape)
        rows, cols, vals = [], [], []
        diag = np.zeros(n)
        for k, (u, d) in enumerate(zip(self.up, self.down)):
            for weights, step in ((u, -1), (d, 1)):
                rows.append(idx.ravel())
                cols.append(np.roll(idx, step, axis=k).ravel())
                vals.append(weights.ravel())
                diag -= weights.ravel()
        rows.append(np.arange(n))
        cols.append(np.arange(n))
        vals.append(diag)
        return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))


def _rhs(w: np.ndarray, disc: Discretization, params: SchemeParams, check: bool = True,
         saturate: bool = False):
    """Spatial operator ``tr(A D^2 w) + nu Lap w - Hhat`` and the centered advection ``D_pH``
    per axis. With ``check`` the Lax-Friedrichs bound ``|D_pH| <= lambda`` is enforced.

    ``saturate`` replaces ``q^2/2`` by its Huber extension beyond ``|q| = lambda`` (linear growth,
    advection clipped to ``[-lambda, lambda]``). Both coincide wherever the bound holds; the
    stationary Newton solvers use it to keep every Jacobian a monotone matrix.
    """
    h = disc.grid.spacing
    nu = params.artificial_viscosity
    lam = params.lf_dissipation
    drift = disc.drift_axes if disc.has_drift else None
    out = -disc.potential
    advs = []
    for k, a in enumerate(disc.diffusion_axes):
        dp = (shifted(w, k, 1) - w) / h
        dm = (w - shifted(w, k, -1)) / h
        q = 0.5 * (dm + dp)
        if drift is not None:
            q = q - drift[k]
        if saturate:
            qc = np.clip(q, -lam[k], lam[k])
            out = out - (qc * q - 0.5 * qc * qc) + ((a + nu) / h + 0.5 * lam[k]) * (dp - dm)
            advs.append(qc)
            continue
        if check and (q.max() > lam[k] or q.min() < -lam[k]):
            raise SchemeError(
                f"Lax-Friedrichs bound exceeded on axis {k}: max |D_pH| = {float(np.max(np.abs(q))):.4g} "
                f"> lambda = {lam[k]:.4g}")
        jump = dp - dm
        out = out - 0.5 * q * q + ((a + nu) / h + 0.5 * lam[k]) * jump
        advs.append(q)
    return out, advs


def _generator(advs, disc: Discretization, params: SchemeParams) -> "Generator":
    h = disc.grid.spacing
    up, down = [], []
    for k, a in enumerate(disc.diffusion_axes):
        base = (a + params.artificial_viscosity) / h**2 + 0.5 * params.lf_dissipation[k] / h
        up.append(base - 0.5 * advs[k] / h)
        down.append(base + 0.5 * advs[k] / h)
    return Generator(tuple(up), tuple(down), np.stack(advs, axis=-1))


def _explicit_parts(w: np.ndarray, disc: Discretization, params: SchemeParams, check: bool = True,
                    saturate: bool = False):
    s, advs = _rhs(w, disc, params, check, saturate)
    return s, _generator(advs, disc, params)


def saturated_parts(w: np.ndarray, disc: Discretization, params: SchemeParams):
    """Saturated spatial operator and its exact derivative (as a :class:`Generator`)."""
    return _explicit_parts(w, disc, params, check=False, saturate=True)


def lf_bound_excess(w: np.ndarray, disc: Discretization, params: SchemeParams) -> float:
    """``max_k max |D_pH_k| / lambda_k``; at most 1 where the Lax-Friedrichs flux is monotone."""
    _, advs = _rhs(w, disc, params, check=False)
    return max(float(np.max(np.abs(q))) / lam for q, lam in zip(advs, params.lf_dissipation))


def check_cfl(disc: Discretization, params: SchemeParams, dt: float) -> None:
    """Center stencil weights ``1 - (dt/eps) sum_k (2 visc_k / h^2 + lambda_k / h)`` must be >= 0."""
    h = disc.grid.spacing
    rate = sum(2.0 * (a + params.artificial_viscosity) / h**2 + lam / h
               for a, lam in zip(disc.diffusion_axes, params.lf_dissipation))
    worst = float(np.max(rate)) * dt / params.epsilon
    if worst > 1.0 + 1e-12:
        raise SchemeError(f"CFL violation: dt = {dt:.4g} exceeds the monotone limit by factor {worst:.4g}")


def spatial_operator(w: np.ndarray, disc: Discretization, params: SchemeParams) -> np.ndarray:
    """``tr(A D^2_h w) + nu Lap_h w - Hhat(x, D^- w, D^+ w)``."""
    return _explicit_parts(w, disc, params, check=False)[0]


def generator_at(w: np.ndarray, disc: Discretization, params: SchemeParams, check: bool = True) -> Generator:
    return _explicit_parts(w, disc, params, check)[1]


@dataclass(frozen=True)
class LinearizedStep:
    """Exact derivative of one forward step: ``f -> kappa * (f + (dt/eps) L f)``.

    ``kappa = eps / (eps + dt * gamma'(w_next - psi))`` comes from the implicit penalty
    solve; the explicit part is stored through nonnegative stencil weights so the
    transpose preserves nonnegativity exactly.
    """

    dt: float
    epsilon: float
    generator: Generator
    center: np.ndarray
    up: tuple[np.ndarray, ...]
    down: tuple[np.ndarray, ...]
    kappa: np.ndarray
    penalty_weight: np.ndarray  # gamma'(w_next - psi)
    diffusion: np.ndarray = field(repr=False, default=None)

    @property
    def effective_penalty(self) -> np.ndarray:
        """``gamma' * kappa``: the weight in the discrete mass identity."""
        return self.penalty_weight * self.kappa

    def explicit(self, f: np.ndarray) -> np.ndarray:
        out = self.center * f
        for k, (u, d) in enumerate(zip(self.up, self.down)):
            out = out + u * shifted(f, k, 1) + d * shifted(f, k, -1)
        return out

    def explicit_transpose(self, g: np.ndarray) -> np.ndarray:
        out = self.center * g
        for k, (u, d) in enumerate(zip(self.up, self.down)):
            out = out + shifted(u * g, k, -1) + shifted(d * g, k, 1)
        return out

    def apply(self, f: np.ndarray) -> np.ndarray:
        return self.kappa * self.explicit(f)

    def apply_transpose(self, g: np.ndarray) -> np.ndarray:
        return self.explicit_transpose(self.kappa * g)


def _linearize(gen: Generator, dt: float, eps: float, kappa: np.ndarray, gprime: np.ndarray,
               diffusion: np.ndarray) -> LinearizedStep:
    s = dt / eps
    up = tuple(s * u for u in gen.up)
    down = tuple(s * d for d in gen.down)
    center = 1.0 - sum(u + d for u, d in zip(up, down))
    if np.any(center < 0):
        raise SchemeError(f"CFL violation: negative center weight {float(np.min(center)):.3g}")
    return LinearizedStep(dt, eps, gen, center, up, down, kappa, gprime, diffusion)


def implicit_penalty_solve(predictor: np.ndarray, psi: np.ndarray, beta: float, delta: float,
                           max_iter: int = 30, tol: float = 1e-12) -> np.ndarray:
    """Solve ``beta (z - predictor) + gamma^delta(z - psi) = 0`` nodewise.

    Newton from ``z = predictor`` decreases monotonically (convex increasing residual).
    """
    z = predictor.copy()
    active = predictor > psi
    if not np.any(active):
        return z
    zp = predictor[active]
    ps = psi[active]
    za = zp.copy()
    for _ in range(max_iter):
        r = za - ps
        f = beta * (za - zp) + penalty(delta, r)
        fp = beta + penalty_prime(delta, r)
        step = f / fp
        za = za - step
        if np.all(np.abs(step) <= 1e-15 * (1.0 + np.abs(za))):
            break
    resid = np.abs(beta * (za - zp) + penalty(delta, za - ps)) / beta
    if not np.all(resid <= tol * (1.0 + np.abs(za))):
        raise SchemeError(f"penalty Newton did not converge (residual {float(np.max(resid)):.3g})")
    z[active] = za
    return z


def penalized_update(w: np.ndarray, disc: Discretization, params: SchemeParams, dt: float,
                     check: bool = True):
    """Forward step without building the linearization. Returns ``(w_next, advs)``.

    The CFL condition is state independent; callers check it once with :func:`check_cfl`.
    """
    eps = params.epsilon
    s, advs = _rhs(w, disc, params, check)
    predictor = w + (dt / eps) * s
    if params.penalty_delta is None:
        return predictor, advs
    return implicit_penalty_solve(predictor, disc.obstacle, eps / dt, params.penalty_delta), advs


def step_penalized(w: np.ndarray, problem: ProblemSpec, params: SchemeParams, dt: float):
    """One step of ``eps w_t - tr(A D^2 w) + H(x,Dw) + gamma^delta(w - psi) = nu Lap w``.

    Explicit monotone update for the transport/diffusion terms, nodewise implicit
    penalty. Returns ``(w_next, LinearizedStep)``.
    """
    disc = discretize(problem, grid_of(w))
    eps = params.epsilon
    w_next, advs = penalized_update(w, disc, params, dt)
    if params.penalty_delta is None:
        gprime = np.zeros_like(w)
    else:
        gprime = penalty_prime(params.penalty_delta, w_next - disc.obstacle)
    kappa = eps / (eps + dt * gprime)
    lin = _linearize(_generator(advs, disc, params), dt, eps, kappa, gprime, disc.diffusion)
    return w_next, lin


def projected_update(u: np.ndarray, disc: Discretization, params: SchemeParams, dt: float) -> np.ndarray:
    s, _ = _rhs(u, disc, params)
    return np.minimum(disc.obstacle, u + (dt / params.epsilon) * s)


def free_update(u: np.ndarray, disc: Discretization, params: SchemeParams, dt: float) -> np.ndarray:
    s, _ = _rhs(u, disc, params)
    return u + (dt / params.epsilon) * s


def step_projected(u: np.ndarray, problem: ProblemSpec, params: SchemeParams, dt: float) -> np.ndarray:
    """Explicit monotone step followed by the nodewise projection ``min(psi, .)``."""
    disc = discretize(problem, grid_of(u))
    check_cfl(disc, params, dt)
    return projected_update(u, disc, params, dt)


def step_free(u: np.ndarray, problem: ProblemSpec, params: SchemeParams, dt: float) -> np.ndarray:
    """Unconstrained explicit step (no obstacle, no penalty)."""
    disc = discretize(problem, grid_of(u))
    check_cfl(disc, params, dt)
    return free_update(u, disc, params, dt)


def hamiltonian_on_grid(w: np.ndarray, disc: Discretization) -> np.ndarray:
    """Continuum ``H(x, Dw)`` with centered differences (audits only)."""
    dm, dp = one_sided_gradients(w, disc.grid.spacing)
    q = 0.5 * (dm + dp) - disc.drift
    return 0.5 * np.sum(q * q, axis=-1) + disc.potential


def exact_hamiltonian(problem: ProblemSpec, x, p):
    return hamiltonian_eval(problem.hamiltonian, x, p)[0]
