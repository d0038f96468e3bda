"""Builtin problems, addressable by string key."""
from __future__ import annotations

from .domain import DiffusionSpec, HamiltonianSpec, ProblemSpec, TrigPoly


def _poly1(const=0.0, cos=None, sin=None) -> TrigPoly:
    terms = {}
    for k, a in (cos or {}).items():
        terms.setdefault(k, [0.0, 0.0])[0] = a
    for k, b in (sin or {}).items():
        terms.setdefault(k, [0.0, 0.0])[1] = b
    return TrigPoly(1, const, tuple(((k,), a, b) for k, (a, b) in sorted(terms.items())))


def _quadratic_1d(potential: TrigPoly) -> HamiltonianSpec:
    return HamiltonianSpec(potential, (TrigPoly(1),))


def eikonal_cos_1d() -> ProblemSpec:
    # c_H = max V = 1; corrector slope sqrt(2(1 - cos)) <= 2
    return ProblemSpec(
        "eikonal-cos-1d",
        _quadratic_1d(_poly1(cos={1: 1.0})),
        DiffusionSpec.zero(1),
        obstacle=_poly1(0.5),
        initial=_poly1(-0.5),
        grad_bound=2.05,
        description="H = p^2/2 + cos(2 pi x), A = 0, psi = 1/2, u0 = psi - 1; c_H = 1",
    )


def viscous_cos_1d() -> ProblemSpec:
    return ProblemSpec(
        "viscous-cos-1d",
        _quadratic_1d(_poly1(cos={1: 1.0})),
        DiffusionSpec.isotropic(1, 0.05),
        obstacle=_poly1(0.5),
        initial=_poly1(-0.5),
        grad_bound=2.05,
        description="H = p^2/2 + cos(2 pi x), A = 0.05, psi = 1/2, u0 = psi - 1",
    )


def supercritical_1d() -> ProblemSpec:
    return ProblemSpec(
        "supercritical-1d",
        _quadratic_1d(_poly1(1.0)),
        DiffusionSpec.zero(1),
        obstacle=_poly1(0.0),
        initial=_poly1(0.0),
        grad_bound=1.0,
        description="H = p^2/2 + 1, psi = 0, u0 = 0; exact u = -t, c_H = 1",
    )


def subcritical_obstacle_1d() -> ProblemSpec:
    return ProblemSpec(
        "subcritical-obstacle-1d",
        _quadratic_1d(_poly1(-1.0)),
        DiffusionSpec.zero(1),
        obstacle=_poly1(0.0),
        initial=_poly1(-1.0),
        grad_bound=1.0,
        description="H = p^2/2 - 1, psi = 0, u0 = psi - 1; c_H = -1, V = psi",
    )


def critical_1d() -> ProblemSpec:
    return ProblemSpec(
        "critical-1d",
        _quadratic_1d(_poly1(0.0)),
        DiffusionSpec.zero(1),
        obstacle=_poly1(0.0),
        initial=_poly1(-1.0),
        grad_bound=1.0,
        description="H = p^2/2, psi = 0, u0 = -1; borderline c_H = 0",
    )


def obstacle_bump_1d() -> ProblemSpec:
    # c_H = -1/2 (constant potential); |DV| <= 1 cannot follow the steep flanks of psi,
    # so the limit leaves a non-contact region around the peak of psi
    return ProblemSpec(
        "obstacle-bump-1d",
        _quadratic_1d(_poly1(-0.5)),
        DiffusionSpec.diagonal([_poly1(0.02, cos={1: -0.02})]),
        obstacle=_poly1(cos={1: 0.4}),
        initial=_poly1(-1.0, cos={1: 0.4}),
        grad_bound=2.8,
        description=("H = p^2/2 - 1/2, a(x) = 0.04 sin^2(pi x) (degenerate at x = 0), "
                     "psi = 0.4 cos(2 pi x), u0 = psi - 1; c_H = -1/2"),
    )


def degenerate_diag_2d() -> ProblemSpec:
    potential = TrigPoly(2, -1.0, (((1, 0), 0.25, 0.0), ((0, 1), 0.25, 0.0)))
    drift = (TrigPoly(2, 0.0, (((0, 1), 0.0, 0.2),)), TrigPoly(2))
    a11 = TrigPoly(2, 0.02, (((2, 0), -0.02, 0.0),))  # 0.04 sin^2(2 pi x)
    a22 = TrigPoly(2, 0.02, (((0, 2), -0.02, 0.0),))  # 0.04 sin^2(2 pi y)
    psi = TrigPoly(2, 0.0, (((1, 1), 0.15, 0.0), ((1, -1), 0.15, 0.0)))  # 0.3 cos cos
    u0 = TrigPoly(2, -1.0, psi.terms)
    return ProblemSpec(
        "degenerate-diag-2d",
        HamiltonianSpec(potential, drift),
        DiffusionSpec.diagonal([a11, a22]),
        obstacle=psi,
        initial=u0,
        grad_bound=3.0,
        description=("H = |p - b|^2/2 - 1 + (cos 2pi x + cos 2pi y)/4, b = (0.2 sin 2pi y, 0), "
                     "A = diag(0.04 sin^2 2pi x, 0.04 sin^2 2pi y), psi = 0.3 cos 2pi x cos 2pi y"),
    )


CATALOG = {
    "eikonal-cos-1d": eikonal_cos_1d,
    "viscous-cos-1d": viscous_cos_1d,
    "supercritical-1d": supercritical_1d,
    "subcritical-obstacle-1d": subcritical_obstacle_1d,
    "critical-1d": critical_1d,
    "obstacle-bump-1d": obstacle_bump_1d,
    "degenerate-diag-2d": degenerate_diag_2d,
}

# closed-form ergodic constants where one is known (max V for the quadratic family with b = 0, A = 0
# or constant V); used as cross-checks only, never by the solvers
KNOWN_ERGODIC_CONSTANTS = {
    "eikonal-cos-1d": 1.0,
    "supercritical-1d": 1.0,
    "subcritical-obstacle-1d": -1.0,
    "critical-1d": 0.0,
    "obstacle-bump-1d": -0.5,
}


def get_problem(key: str) -> ProblemSpec:
    try:
        return CATALOG[key]()
    except KeyError:
        raise KeyError(f"unknown catalog problem {key!r}; known: {sorted(CATALOG)}") from None


def catalog_keys(dim: int | None = None) -> list[str]:
    return [k for k in CATALOG if dim is None or CATALOG[k]().dim == dim]
