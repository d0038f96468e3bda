"""Grids on the flat torus, trigonometric coefficient fields, and problem data.

Every coefficient (potential, drift, diffusion, obstacle, initial datum) is a
trigonometric polynomial on T^n = R^n / Z^n, so values and derivatives are
sampled analytically at grid nodes.
"""
from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class TorusGrid:
    """Uniform periodic lattice on T^dim with ``points_per_axis`` nodes per axis."""

    dim: int
    points_per_axis: int

    @property
    def spacing(self) -> float:
        return 1.0 / self.points_per_axis

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.points_per_axis,) * self.dim

    @property
    def size(self) -> int:
        return self.points_per_axis**self.dim

    @property
    def cell_volume(self) -> float:
        return self.spacing**self.dim

    @property
    def points(self) -> np.ndarray:
        """Node coordinates, shape ``(*shape, dim)``; node ``i`` sits at ``i/N``."""
        axis = np.arange(self.points_per_axis) / self.points_per_axis
        mesh = np.meshgrid(*([axis] * self.dim), indexing="ij")
        return np.stack(mesh, axis=-1)

    def neighbor(self, index: Sequence[int], axis: int, step: int) -> tuple[int, ...]:
        idx = list(index)
        idx[axis] = (idx[axis] + step) % self.points_per_axis
        return tuple(idx)

    def node_name(self, flat_index: int) -> str:
        idx = np.unravel_index(flat_index, self.shape)
        return "node(" + ",".join(str(int(i)) for i in idx) + ")"


def build_grid(dim: int, points_per_axis: int) -> TorusGrid:
    if dim not in (1, 2):
        raise ValueError(f"unsupported dimension {dim}; only 1 and 2 are supported")
    if points_per_axis <= 0:
        raise ValueError("resolution must be positive")
    if points_per_axis < 8:
        raise ValueError("points_per_axis must be at least 8")
    return TorusGrid(dim, int(points_per_axis))


@dataclass(frozen=True)
class TrigPoly:
    """``const + sum_k a_k cos(2 pi k.x) + b_k sin(2 pi k.x)`` on T^dim.

    ``terms`` holds ``(wavevector, a_k, b_k)`` triples.
    """

    dim: int
    const: float = 0.0
    terms: tuple[tuple[tuple[int, ...], float, float], ...] = ()

    def __post_init__(self):
        for k, _, _ in self.terms:
            if len(k) != self.dim:
                raise ValueError(f"wavevector {k} does not match dimension {self.dim}")

    @classmethod
    def constant(cls, dim: int, value: float) -> "TrigPoly":
        return cls(dim, float(value))

    def _phases(self, x: np.ndarray):
        x = np.asarray(x, dtype=float)
        for k, a, b in self.terms:
            kv = np.asarray(k, dtype=float)
            phase = TWO_PI * (x @ kv)
            yield kv, a, b, phase

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.full(x.shape[:-1], self.const, dtype=float)
        for _, a, b, phase in self._phases(x):
            out += a * np.cos(phase) + b * np.sin(phase)
        return out

    def grad(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape, dtype=float)
        for kv, a, b, phase in self._phases(x):
            coef = -a * np.sin(phase) + b * np.cos(phase)
            out += TWO_PI * coef[..., None] * kv
        return out

    def hess(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape + (self.dim,), dtype=float)
        for kv, a, b, phase in self._phases(x):
            coef = -(TWO_PI**2) * (a * np.cos(phase) + b * np.sin(phase))
            out += coef[..., None, None] * np.outer(kv, kv)
        return out

    def laplacian(self, x: np.ndarray) -> np.ndarray:
        return np.trace(self.hess(x), axis1=-2, axis2=-1)

    def bounds(self) -> tuple[float, float]:
        """Crude (lower, upper) bound from the coefficient l1 norm."""
        spread = sum(abs(a) + abs(b) for _, a, b in self.terms)
        return self.const - spread, self.const + spread

    def is_constant(self) -> bool:
        return all(a == 0 and b == 0 for _, a, b in self.terms)


@dataclass(frozen=True)
class HamiltonianSpec:
    """Quadratic-with-drift family ``H(x,p) = |p - b(x)|^2 / 2 + V(x)``."""

    potential: TrigPoly
    drift: tuple[TrigPoly, ...]
    family: str = "quadratic-with-drift"
    theta: float = 0.5

    @property
    def dim(self) -> int:
        return self.potential.dim

    def drift_at(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.stack([b(x) for b in self.drift], axis=-1)

    def drift_jacobian(self, x: np.ndarray) -> np.ndarray:
        # [..., i, j] = d b_i / d x_j
        return np.stack([b.grad(x) for b in self.drift], axis=-2)

    def value(self, x: np.ndarray, p: np.ndarray) -> np.ndarray:
        q = np.asarray(p, dtype=float) - self.drift_at(x)
        return 0.5 * np.sum(q * q, axis=-1) + self.potential(x)

    def grad_p(self, x: np.ndarray, p: np.ndarray) -> np.ndarray:
        return np.asarray(p, dtype=float) - self.drift_at(x)


@dataclass(frozen=True)
class DiffusionSpec:
    """Diagonal diffusion ``A(x) = diag(a^11(x), ..., a^nn(x))``."""

    form: str  # "zero" | "constant-isotropic" | "diagonal-variable"
    coefficients: tuple[TrigPoly, ...]

    @classmethod
    def zero(cls, dim: int) -> "DiffusionSpec":
        return cls("zero", tuple(TrigPoly(dim) for _ in range(dim)))

    @classmethod
    def isotropic(cls, dim: int, value: float) -> "DiffusionSpec":
        return cls("constant-isotropic", tuple(TrigPoly.constant(dim, value) for _ in range(dim)))

    @classmethod
    def diagonal(cls, coefficients: Sequence[TrigPoly]) -> "DiffusionSpec":
        return cls("diagonal-variable", tuple(coefficients))

    def diagonal_at(self, x: np.ndarray) -> np.ndarray:
        """Per-axis coefficients, shape ``(..., dim)``."""
        return np.stack([a(x) for a in self.coefficients], axis=-1)

    def is_zero(self) -> bool:
        return all(a.is_constant() and a.const == 0 for a in self.coefficients)


@dataclass(frozen=True)
class ProblemSpec:
    name: str
    hamiltonian: HamiltonianSpec
    diffusion: DiffusionSpec
    obstacle: TrigPoly
    initial: TrigPoly
    # a priori Lipschitz bound used to size the Lax-Friedrichs dissipation;
    # None means "estimate from the data"
    grad_bound: float | None = None
    description: str = ""

    @property
    def dim(self) -> int:
        return self.hamiltonian.dim

    def lipschitz_bound(self) -> float:
        if self.grad_bound is not None:
            return float(self.grad_bound)
        return estimate_gradient_bound(self)

    def with_obstacle(self, obstacle: TrigPoly, name: str | None = None) -> "ProblemSpec":
        return ProblemSpec(
            name or self.name, self.hamiltonian, self.diffusion, obstacle, self.initial,
            self.grad_bound, self.description,
        )

    def with_initial(self, initial: TrigPoly, name: str | None = None) -> "ProblemSpec":
        return ProblemSpec(
            name or self.name, self.hamiltonian, self.diffusion, self.obstacle, initial,
            self.grad_bound, self.description,
        )

    def without_obstacle(self) -> "ProblemSpec":
        return self.with_obstacle(TrigPoly.constant(self.dim, INACTIVE_OBSTACLE), self.name + "/free")


INACTIVE_OBSTACLE = 1.0e6


def _max_gradient_norm(poly: TrigPoly) -> float:
    return float(sum(TWO_PI * np.linalg.norm(k) * np.hypot(a, b) for k, a, b in poly.terms))


def estimate_gradient_bound(problem: ProblemSpec) -> float:
    """Energy-type Lipschitz estimate along characteristics of the quadratic family.

    ``|p - b|^2/2 + V`` is conserved along characteristics when b is constant;
    drift variation and the obstacle slope are added as margins.
    """
    ham = problem.hamiltonian
    lo, hi = ham.potential.bounds()
    g0 = max(_max_gradient_norm(problem.initial), _max_gradient_norm(problem.obstacle))
    bmax = sum(max(abs(v) for v in b.bounds()) for b in ham.drift)
    bgrad = sum(_max_gradient_norm(b) for b in ham.drift)
    return float(np.sqrt((g0 + bmax) ** 2 + 2.0 * (hi - lo)) + 2.0 * bmax + bgrad + 0.1)


def hamiltonian_eval(spec: HamiltonianSpec, x, p):
    """Return ``(H, D_p H, D_x H)`` at arrays of points ``x`` and momenta ``p``."""
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    q = p - spec.drift_at(x)
    value = 0.5 * np.sum(q * q, axis=-1) + spec.potential(x)
    # D_x H = -(Db)^T (p - b) + DV
    grad_x = -np.einsum("...ij,...i->...j", spec.drift_jacobian(x), q) + spec.potential.grad(x)
    return value, q, grad_x


def lagrangian_eval(spec: HamiltonianSpec, x, q) -> np.ndarray:
    """Legendre transform ``L(x,q) = |q|^2/2 + b(x).q - V(x)`` (closed form)."""
    if spec.family != "quadratic-with-drift":
        raise ValueError(f"closed-form Lagrangian unavailable for family {spec.family!r}")
    x = np.asarray(x, dtype=float)
    q = np.asarray(q, dtype=float)
    return 0.5 * np.sum(q * q, axis=-1) + np.sum(spec.drift_at(x) * q, axis=-1) - spec.potential(x)


@dataclass
class ValidationReport:
    problem: str
    checks: dict[str, bool] = field(default_factory=dict)
    violations: list[str] = field(default_factory=list)
    growth_constant: float = float("nan")
    p_box: float = 0.0

    @property
    def ok(self) -> bool:
        return all(self.checks.values())


def validate_problem(problem: ProblemSpec, grid: TorusGrid, p_box: float = 5.0,
                     max_listed: int = 20) -> ValidationReport:
    """Check the standing assumptions on the grid; violations are reported, not raised."""
    if grid.dim != problem.dim:
        raise ValueError("grid and problem dimensions differ")
    report = ValidationReport(problem.name, p_box=p_box)
    x = grid.points
    flat_x = x.reshape(-1, grid.dim)

    def record(check: str, bad: np.ndarray, what: str):
        idx = np.flatnonzero(bad)
        report.checks[check] = idx.size == 0
        for i in idx[:max_listed]:
            report.violations.append(f"{check}: {what} at {grid.node_name(int(i))}")
        if idx.size > max_listed:
            report.violations.append(f"{check}: ... {idx.size - max_listed} more nodes")

    u0 = problem.initial(flat_x)
    psi = problem.obstacle(flat_x)
    record("compatibility", u0 > psi, "u0 > psi")

    a = problem.diffusion.diagonal_at(flat_x)
    record("diffusion_psd", np.any(a < 0, axis=-1), "negative diffusion coefficient")

    # D_pp H = I for the quadratic family; check against 2 theta numerically
    ham = problem.hamiltonian
    if ham.family != "quadratic-with-drift":
        report.checks["convexity"] = False
        report.violations.append(f"convexity: unsupported family {ham.family}")
    else:
        h = 1e-3
        p0 = np.zeros_like(flat_x)
        eigs = []
        for i in range(grid.dim):
            e = np.zeros(grid.dim)
            e[i] = h
            second = (ham.value(flat_x, p0 + e) - 2 * ham.value(flat_x, p0) + ham.value(flat_x, p0 - e)) / h**2
            eigs.append(second)
        record("convexity", np.min(eigs, axis=0) < 2 * ham.theta - 1e-6, "D_pp H < 2 theta")

    rng = np.random.default_rng(0)
    growth = 0.0
    for _ in range(8):
        p = rng.uniform(-p_box, p_box, size=flat_x.shape)
        _, _, gx = hamiltonian_eval(ham, flat_x, p)
        growth = max(growth, float(np.max(np.linalg.norm(gx, axis=-1) / (1 + np.sum(p * p, axis=-1)))))
    report.growth_constant = growth
    report.checks["growth"] = bool(np.isfinite(growth))
    return report


# ---------------------------------------------------------------------------
# key-value problem files

_TERM = re.compile(r"^(cos|sin)\s*\(\s*([-\d\s,]+)\)$")


def parse_trig_section(section: configparser.SectionProxy | dict, dim: int) -> TrigPoly:
    const = 0.0
    terms: dict[tuple[int, ...], list[float]] = {}
    for key, raw in section.items():
        key = key.strip().lower()
        value = float(raw)
        if key == "const":
            const = value
            continue
        m = _TERM.match(key)
        if not m:
            raise ValueError(f"unrecognised coefficient key {key!r}")
        k = tuple(int(s) for s in m.group(2).split(","))
        if len(k) != dim:
            raise ValueError(f"wavevector {k} does not match dimension {dim}")
        entry = terms.setdefault(k, [0.0, 0.0])
        entry[0 if m.group(1) == "cos" else 1] += value
    return TrigPoly(dim, const, tuple((k, a, b) for k, (a, b) in terms.items()))


def load_problem_text(text: str) -> ProblemSpec:
    """Parse a problem from the key-value format documented in the README."""
    cfg = configparser.ConfigParser(interpolation=None)
    cfg.optionxform = str
    cfg.read_string(text)
    if "problem" not in cfg:
        raise ValueError("missing [problem] section")
    head = cfg["problem"]
    dim = int(head.get("dim", "1"))
    if dim not in (1, 2):
        raise ValueError(f"unsupported dimension {dim}")

    def poly(name: str) -> TrigPoly:
        return parse_trig_section(cfg[name], dim) if name in cfg else TrigPoly(dim)

    drift = tuple(poly(f"drift.{i + 1}") for i in range(dim))
    form = head.get("diffusion", "zero")
    coeffs = tuple(poly(f"diffusion.{i + 1}") for i in range(dim))
    if form == "zero":
        diffusion = DiffusionSpec.zero(dim)
    elif form in ("constant-isotropic", "diagonal-variable"):
        diffusion = DiffusionSpec(form, coeffs)
    else:
        raise ValueError(f"unknown diffusion form {form!r}")
    if "obstacle" not in cfg or "initial" not in cfg:
        raise ValueError("problem needs [obstacle] and [initial] sections")
    grad_bound = head.get("grad_bound")
    return ProblemSpec(
        name=head.get("name", "custom"),
        hamiltonian=HamiltonianSpec(poly("potential"), drift),
        diffusion=diffusion,
        obstacle=poly("obstacle"),
        initial=poly("initial"),
        grad_bound=float(grad_bound) if grad_bound is not None else None,
        description=head.get("description", ""),
    )


def dump_problem_text(problem: ProblemSpec) -> str:
    lines = ["[problem]", f"name = {problem.name}", f"dim = {problem.dim}",
             f"diffusion = {problem.diffusion.form}"]
    if problem.grad_bound is not None:
        lines.append(f"grad_bound = {problem.grad_bound!r}")
    if problem.description:
        lines.append(f"description = {problem.description}")

    def section(title: str, p: TrigPoly):
        lines.extend(["", f"[{title}]", f"const = {p.const!r}"])
        for k, a, b in p.terms:
            ks = ",".join(str(i) for i in k)
            if a:
                lines.append(f"cos({ks}) = {a!r}")
            if b:
                lines.append(f"sin({ks}) = {b!r}")

    section("potential", problem.hamiltonian.potential)
    for i, b in enumerate(problem.hamiltonian.drift):
        section(f"drift.{i + 1}", b)
    if problem.diffusion.form != "zero":
        for i, a in enumerate(problem.diffusion.coefficients):
            section(f"diffusion.{i + 1}", a)
    section("obstacle", problem.obstacle)
    section("initial", problem.initial)
    return "\n".join(lines) + "\n"
