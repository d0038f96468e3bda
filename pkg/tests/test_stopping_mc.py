import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from obstaclehj import build_grid, get_problem
from obstaclehj.domain import HamiltonianSpec, ProblemSpec, TrigPoly
from obstaclehj.stopping_mc import (
    DiffusionRoot,
    PDEValue,
    contact_band,
    feedback_policy,
    mc_value_upper,
    never_stop,
    random_policy,
    simulate_paths,
    stop_immediately,
    verify_value_bounds,
    zero_policy,
)

SUB = "subcritical-obstacle-1d"  # A = 0, b = 0, V = -1, psi = 0, u0 = -1


@pytest.mark.parametrize("key", ["obstacle-bump-1d", "degenerate-diag-2d", "viscous-cos-1d"])
def test_diffusion_root_factorizes(key):
    p = get_problem(key)
    assert DiffusionRoot(p).factorization_error(build_grid(p.dim, 16)) <= 1e-12


@pytest.mark.parametrize("x", [0.0, 0.3, 0.77])
def test_immediate_stop_pays_obstacle(x):
    est, hw = mc_value_upper(get_problem(SUB), [x], 1.0, zero_policy(1), stop_immediately(), 100, seed=1)
    assert est == 0.0 and hw == 0.0


@pytest.mark.parametrize("t", [0.5, 1.0, 2.0])
def test_never_stop_frozen_path(t):
    est, hw = mc_value_upper(get_problem(SUB), [0.4], t, zero_policy(1), never_stop(), 100, seed=1)
    assert est == pytest.approx(t - 1.0, abs=1e-12)
    assert hw <= 1e-12


def test_stop_time_and_payoff_rule():
    p = get_problem("obstacle-bump-1d")
    t = 2.5  # contact region around x = 1/2 by then
    pde = PDEValue.solve(p, build_grid(1, 64), t)
    ens = simulate_paths(p, [0.3], t, zero_policy(1), contact_band(p, pde, t), 500, seed=3)[0]
    assert np.all((ens.stop_time >= 0) & (ens.stop_time <= t))
    early = ens.stop_time < t
    assert np.any(early)
    # early stops pay psi, which lies in [-0.4, 0.4]; the terminal payoff u0 = psi - 1 lies below -0.6
    assert np.all(ens.payoff[early] >= -0.4 - 1e-12)
    assert np.all(ens.payoff[~early] <= -0.6 + 1e-12)
    imm = simulate_paths(p, [0.3], t, zero_policy(1), stop_immediately(), 100, seed=3)[0]
    assert np.all(imm.stop_time == 0) and np.allclose(imm.payoff, p.obstacle(np.array([[0.3]])))
    never = simulate_paths(p, [0.3], t, zero_policy(1), never_stop(), 100, seed=3)[0]
    assert np.all(never.stop_time == t)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_seeded_determinism(seed):
    p = get_problem("viscous-cos-1d")
    a = mc_value_upper(p, [0.2], 0.5, random_policy(1), never_stop(), 200, seed)
    b = mc_value_upper(p, [0.2], 0.5, random_policy(1), never_stop(), 200, seed)
    assert a == b


def test_vectorized_starts_match_single_starts():
    p = get_problem("viscous-cos-1d")
    x = np.array([[0.1], [0.6]])
    both = simulate_paths(p, x, 0.5, zero_policy(1), never_stop(), 200, seed=9)
    first = simulate_paths(p, x[:1], 0.5, zero_policy(1), never_stop(), 200, seed=9)
    assert both[0].estimate() == first[0].estimate()


def test_half_width_shrinks_like_inverse_sqrt():
    p = get_problem("viscous-cos-1d")
    hws = [mc_value_upper(p, [0.3], 0.2, random_policy(1), never_stop(), M, seed=5)[1] for M in (1000, 10000, 100000)]
    for a, b in zip(hws, hws[1:]):
        assert b / a == pytest.approx(10**-0.5, rel=0.2)


def test_rejects_small_ensembles():
    with pytest.raises(ValueError, match="100"):
        mc_value_upper(get_problem(SUB), [0.0], 1.0, zero_policy(1), never_stop(), 99, seed=0)


def test_rejects_non_quadratic_family():
    p = get_problem(SUB)
    other = ProblemSpec(p.name, HamiltonianSpec(TrigPoly(1, -1.0), (TrigPoly(1),), family="other"),
                        p.diffusion, p.obstacle, p.initial)
    with pytest.raises(ValueError, match="Lagrangian"):
        mc_value_upper(other, [0.0], 1.0, zero_policy(1), never_stop(), 100, seed=0)


def test_feedback_exact_on_flat_problem():
    # u(x, t) = t - 1 for t < 1: zero gradient, no contact, the feedback path is the frozen path
    p = get_problem(SUB)
    g = build_grid(1, 64)
    pde = PDEValue.solve(p, g, 0.5)
    est, _ = mc_value_upper(p, [0.3], 0.5, feedback_policy(p, pde, 0.5), contact_band(p, pde, 0.5), 100, seed=0)
    assert est == pytest.approx(pde.at_node(19, 0.5), abs=1e-9)
    assert est == pytest.approx(-0.5, abs=1e-9)


def test_pde_value_interpolates_nodes():
    p = get_problem("obstacle-bump-1d")
    g = build_grid(1, 32)
    pde = PDEValue.solve(p, g, 0.5)
    x = g.points.reshape(-1, 1)
    assert np.allclose(pde.value(x, 0.5), [pde.at_node(i, 0.5) for i in range(32)], atol=1e-14)
    assert np.allclose(pde.value(x, 0.0), p.initial(x), atol=1e-14)


def test_value_bounds_small_battery():
    p = get_problem("obstacle-bump-1d")
    # N = 512: the PDE oracle's O(h) error at N = 128 is ~0.02, comparable to the slack
    rep = verify_value_bounds(p, build_grid(1, 512), 0.5, [64, 192, 320, 448], 2000, seed=2)
    assert rep.passed, rep.lines()
    assert len(rep.measured["rows"]) == 4 * 5
