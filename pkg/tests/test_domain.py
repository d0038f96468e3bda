import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from obstaclehj import CATALOG, build_grid, get_problem, validate_problem
from obstaclehj.domain import (
    DiffusionSpec,
    HamiltonianSpec,
    TrigPoly,
    dump_problem_text,
    hamiltonian_eval,
    lagrangian_eval,
    load_problem_text,
)

COS1 = TrigPoly(1, 0.0, (((1,), 1.0, 0.0),))


def test_build_grid_1d():
    g = build_grid(1, 8)
    assert g.size == 8 and g.spacing == 0.125


def test_build_grid_2d():
    g = build_grid(2, 16)
    assert g.size == 256 and g.spacing == 0.0625


@pytest.mark.parametrize("dim, n, msg", [(3, 16, "unsupported dimension"), (1, 0, "positive"), (1, -4, "positive")])
def test_build_grid_rejects(dim, n, msg):
    with pytest.raises(ValueError, match=msg):
        build_grid(dim, n)


@given(st.integers(8, 64), st.integers(-200, 200), st.sampled_from([-1, 1]))
def test_neighbor_wraps(n, i, step):
    g = build_grid(1, n)
    j = g.neighbor((i % n,), 0, step)[0]
    assert 0 <= j < n and (j - i - step) % n == 0


def test_spacing_times_n_is_one():
    for n in (8, 10, 100, 1024):
        assert build_grid(1, n).spacing * n == 1.0


def test_hamiltonian_zero_case():
    spec = HamiltonianSpec(TrigPoly(1), (TrigPoly(1),))
    v, gp, gx = hamiltonian_eval(spec, np.array([[0.3]]), np.array([[0.0]]))
    assert v[0] == 0 and gp[0, 0] == 0 and gx[0, 0] == 0


def test_hamiltonian_closed_form():
    spec = HamiltonianSpec(COS1, (TrigPoly(1),))
    v, gp, gx = hamiltonian_eval(spec, np.array([[0.0]]), np.array([[2.0]]))
    assert v[0] == pytest.approx(3.0)
    assert gp[0, 0] == pytest.approx(2.0)
    assert gx[0, 0] == pytest.approx(0.0, abs=1e-14)


def _fd_errors(spec, x, p, step):
    v, gp, gx = hamiltonian_eval(spec, x, p)
    err = 0.0
    for i in range(x.shape[-1]):
        e = np.zeros(x.shape[-1])
        e[i] = step
        dp = (spec.value(x, p + e) - spec.value(x, p - e)) / (2 * step)
        dx = (spec.value(x + e, p) - spec.value(x - e, p)) / (2 * step)
        err = max(err, float(np.max(np.abs(dp - gp[..., i]))), float(np.max(np.abs(dx - gx[..., i]))))
    return err


@pytest.mark.parametrize("key", ["eikonal-cos-1d", "degenerate-diag-2d"])
def test_hamiltonian_gradients_match_finite_differences(key, rng):
    spec = get_problem(key).hamiltonian
    dim = spec.dim
    x = rng.uniform(0, 1, size=(50, dim))
    p = rng.uniform(-3, 3, size=(50, dim))
    e1, e2 = _fd_errors(spec, x, p, 2e-4), _fd_errors(spec, x, p, 1e-4)
    assert e2 <= 1e-6
    assert e2 <= e1 / 3  # second order: halving the step cuts the error ~4x


def test_lagrangian_closed_forms():
    zero = HamiltonianSpec(TrigPoly(1), (TrigPoly(1),))
    assert lagrangian_eval(zero, np.array([[0.2]]), np.array([[0.0]]))[0] == 0
    minus_one = HamiltonianSpec(TrigPoly(1, -1.0), (TrigPoly(1),))
    assert lagrangian_eval(minus_one, np.array([[0.2]]), np.array([[0.0]]))[0] == 1.0


def test_lagrangian_rejects_other_families():
    spec = HamiltonianSpec(TrigPoly(1), (TrigPoly(1),), family="other")
    with pytest.raises(ValueError, match="unavailable"):
        lagrangian_eval(spec, np.array([[0.0]]), np.array([[0.0]]))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_legendre_sampling(seed):
    rng = np.random.default_rng(seed)
    spec = get_problem("degenerate-diag-2d").hamiltonian
    x = rng.uniform(0, 1, size=(1, 2))
    q = rng.uniform(-2, 2, size=(1, 2))
    L = lagrangian_eval(spec, x, q)[0]
    p = rng.uniform(-6, 6, size=(1000, 2))
    sampled = p @ q[0] - spec.value(np.repeat(x, 1000, axis=0), p)
    assert np.all(sampled <= L + 1e-12)
    p_star = q + spec.drift_at(x)
    assert abs(float(p_star[0] @ q[0] - spec.value(x, p_star)[0]) - L) <= 1e-10


@pytest.mark.parametrize("key", sorted(CATALOG))
@pytest.mark.parametrize("n", [8, 33, 128])
def test_catalog_validates(key, n):
    p = get_problem(key)
    assert validate_problem(p, build_grid(p.dim, n)).ok


def test_compatibility_violation_reported_everywhere():
    p = get_problem("eikonal-cos-1d")
    bad = p.with_initial(TrigPoly(1, p.obstacle.const + 0.1))
    rep = validate_problem(bad, build_grid(1, 16))
    assert not rep.checks["compatibility"]
    assert sum(v.startswith("compatibility") for v in rep.violations) == 16


def test_degenerate_diffusion_is_psd():
    sin2 = TrigPoly(1, 0.5, (((2,), -0.5, 0.0),))  # sin^2(2 pi x)
    p = get_problem("eikonal-cos-1d")
    p = type(p)(p.name, p.hamiltonian, DiffusionSpec.diagonal([sin2]), p.obstacle, p.initial, p.grad_bound)
    grid = build_grid(1, 16)
    a = p.diffusion.diagonal_at(grid.points.reshape(-1, 1))
    assert np.min(a) == pytest.approx(0.0, abs=1e-15)
    assert validate_problem(p, grid).checks["diffusion_psd"]


@pytest.mark.parametrize("key", sorted(CATALOG))
def test_problem_text_roundtrip(key):
    p = get_problem(key)
    assert load_problem_text(dump_problem_text(p)) == p


def test_problem_text_errors():
    with pytest.raises(ValueError, match="missing"):
        load_problem_text("[other]\na = 1\n")
    with pytest.raises(ValueError, match="unsupported"):
        load_problem_text("[problem]\ndim = 3\n")
