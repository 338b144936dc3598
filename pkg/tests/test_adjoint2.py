from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from volterra_mp.adjoint1 import hessian_H, solve_first_adjoint
from volterra_mp.adjoint2 import (_p3_sweep, _p4_update, build_sources, constraint_residuals,
                                  quadratic_form_adjoint, solve_p1_q1, solve_p2_q2, solve_p3_p4,
                                  solve_second_adjoint, symmetry_defects)
from volterra_mp.errors import NoConvergence
from volterra_mp.forward import SpikeWindow
from volterra_mp.problem import CostFunctions, ExpKernel, freeze, registry_get, validate_h1_h2

A = np.array([[-0.3, 0.4], [0.1, 0.2]])
G = np.array([[0.2, -0.1], [0.3, 0.1]])


def _lead(s, x, u):
    return np.broadcast_shapes(np.shape(s), x.shape[:-1], u.shape[:-1])


def _beta(s, x, u):
    out = x @ A.T + u
    out[..., 0] += 0.1 * x[..., 0] * x[..., 1]
    return out


def _beta_x(s, x, u):
    J = np.zeros(_lead(s, x, u) + (2, 2)) + A
    J[..., 0, 0] += 0.1 * x[..., 1]
    J[..., 0, 1] += 0.1 * x[..., 0]
    return J


def _beta_xx(s, x, u):
    H = np.zeros(_lead(s, x, u) + (2, 2, 2))
    H[..., 0, 0, 1] = H[..., 0, 1, 0] = 0.1
    return H


def coupled_pair():
    """Two-dimensional problem with non-symmetric sensitivities in both coefficients."""
    base = registry_get("two_player_decoupled")
    return replace(
        base, name="coupled_pair", kb=ExpKernel(0.5), ks=ExpKernel(0.8),
        beta=_beta, beta_x=_beta_x, beta_xx=_beta_xx,
        gamma=lambda s, x, u: 0.2 + 0.3 * u + x @ G.T,
        gamma_x=lambda s, x, u: np.zeros(_lead(s, x, u) + (2, 2)) + G,
        gamma_xx=lambda s, x, u: np.zeros(_lead(s, x, u) + (2, 2, 2)),
    )


def _solve(tree, pr, N, u=0.0, probe=0.5, **kw):
    grid, noise, ctrl, X, be = tree(pr, N, u=u)
    fr = freeze(pr, grid, X, ctrl, np.full(pr.m, probe))
    first = solve_first_adjoint(fr, be)
    return grid, noise, X, fr, be, first, solve_second_adjoint(fr, first, be, **kw)


def test_coupled_pair_derivatives():
    from volterra_mp.timebase import make_grid
    assert validate_h1_h2(coupled_pair(), make_grid(1.0, 8)).ok


@pytest.mark.parametrize("name,params,N", [
    ("linear_scalar", {}, 5),
    ("linear_scalar", {}, 6),
    ("lq_control", {"kernel_decay": 0.7, "s_xu": 0.3}, 6),
    ("control_free_diffusion", {}, 6),
])
@pytest.mark.parametrize("exact_discrete", [True, False])
def test_dense_oracle(tree, name, params, N, exact_discrete):
    pr = registry_get(name, params)
    u = np.linspace(-0.3, 0.4, N)
    grid, noise, X, fr, be, first, sec = _solve(tree, pr, N, u=u, exact_discrete=exact_discrete)
    E, L = oracles.atom_operators(noise.dW, grid.dt)
    C = oracles.Coefficients(pr, grid, X, u)
    ref = oracles.second_adjoint(C, E, L, oracles.first_adjoint(C, E, L)["Hxx"], exact_discrete)
    assert np.max(np.abs(sec.P2[..., 0, 0] - ref["P2"])) <= 1e-10
    assert np.max(np.abs(sec.P3[..., 0, 0] - ref["P3"])) <= 1e-10
    assert np.max(np.abs(sec.P4[..., 0, 0] - ref["P4"])) <= 1e-10


@pytest.mark.parametrize("N", [4, 6])
def test_symmetry_and_constraints(tree, N):
    grid, noise, X, fr, be, first, sec = _solve(tree, coupled_pair(), N, u=0.1, probe=0.6)
    assert max(symmetry_defects(sec).values()) <= 1e-12
    assert max(constraint_residuals(sec, noise).values()) <= 1e-12
    assert np.max(np.abs(sec.P3[:, np.arange(N), np.arange(N)])) == 0.0
    assert max(sec.telemetry["outer_ratios"]) <= 0.5


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_iteration_maps_preserve_symmetry(seed):
    from conftest import tree_setup
    pr = coupled_pair()
    N = 4
    grid, noise, ctrl, X, be = tree_setup(pr, N, u=0.1)
    fr = freeze(pr, grid, X, ctrl, [0.5, 0.5])
    first = solve_first_adjoint(fr, be)
    P1, Q1 = solve_p1_q1(fr.h_xx, be)
    P2, Q2, _ = solve_p2_q2(fr, P1, Q1, be)
    src = build_sources(fr, first, P1, Q1, P2, Q2, be)
    rng = np.random.default_rng(seed)
    raw = rng.normal(size=(2**N, N, N, 2, 2))
    low = np.tril(np.ones((N, N), bool), -1)[None, :, :, None, None]
    P3 = np.where(low, raw, 0.0)
    P3 = P3 + np.swapaxes(np.swapaxes(P3, 1, 2), -1, -2)
    p4 = rng.normal(size=(2**N, N, 2, 2))
    p4 = p4 + np.swapaxes(p4, -1, -2)
    new3 = _p3_sweep(fr, src, P3, p4, be)
    new4 = _p4_update(fr, src, new3, p4, be, True)
    assert np.max(np.abs(new3 - np.swapaxes(np.swapaxes(new3, 1, 2), -1, -2))) <= 1e-12
    assert np.max(np.abs(new4 - np.swapaxes(new4, -1, -2))) <= 1e-12


def test_p1_q1_examples(tree):
    pr = registry_get("lq_control", {"h0": 2.5})
    grid, noise, ctrl, X, be = tree(pr, 5)
    P1, Q1 = solve_p1_q1(freeze(pr, grid, X, ctrl, 0.0).h_xx, be)
    assert np.all(P1 == 2.5) and np.max(np.abs(Q1)) <= 1e-14
    P1, Q1 = solve_p1_q1(np.zeros((32, 1, 1)), be)
    assert np.all(P1 == 0.0) and np.all(Q1 == 0.0)


def test_p1_q1_state_dependent(tree):
    pr = registry_get("linear_scalar")
    quartic = CostFunctions(
        g=pr.cost.g, g_x=pr.cost.g_x, g_xx=pr.cost.g_xx,
        h=lambda x: x[..., 0] ** 4 / 12.0, h_x=lambda x: x**3 / 3.0, h_xx=lambda x: (x**2)[..., None],
    )
    pr = replace(pr, cost=quartic)
    grid, noise, ctrl, X, be = tree(pr, 8)
    hxx = freeze(pr, grid, X, ctrl, 0.0).h_xx
    P1, Q1 = solve_p1_q1(hxx, be)
    for r in range(9):
        recon = P1[:, r] + sum(Q1[:, k] * noise.dW[:, k, None, None] for k in range(r, 8))
        assert np.max(np.abs(recon - hxx)) <= 1e-12
    assert np.all(P1 == np.swapaxes(P1, -1, -2))


def test_p2_vanishes_without_kernel_sensitivity(tree):
    _, _, _, _, _, _, sec = _solve(tree, registry_get("lq_control", {"a": 0.0, "s_x": 0.0}), 5)
    assert np.all(sec.P2 == 0.0)


def test_p2_deterministic_volterra(tree):
    a, kappa, h0 = 0.7, 0.5, 1.3
    pr = registry_get("lq_control", {"a": a, "s_x": 0.0, "kernel_decay": kappa, "h0": h0})
    N = 6
    grid, noise, X, fr, be, first, sec = _solve(tree, pr, N)
    t, dt = grid.nodes, grid.dt
    K = lambda j, k: np.exp(-kappa * (t[j] - t[k]))
    ref = np.zeros(N)
    for k in range(N - 1, -1, -1):
        ref[k] = K(N, k) * a * h0 + sum(K(j, k) * a * ref[j] * dt for j in range(k + 1, N))
    assert np.max(np.abs(sec.P2[..., 0, 0] - ref[None])) <= 1e-12


def test_sources_without_diffusion_sensitivity(tree):
    pr = registry_get("lq_control", {"s_x": 0.0, "kernel_decay": 0.3})
    N = 5
    grid, noise, ctrl, X, be = tree(pr, N)
    fr = freeze(pr, grid, X, ctrl, 0.5)
    first = solve_first_adjoint(fr, be)
    P1, Q1 = solve_p1_q1(fr.h_xx, be)
    P2, Q2, _ = solve_p2_q2(fr, P1, Q1, be)
    src = build_sources(fr, first, P1, Q1, P2, Q2, be, exact_discrete=False)
    assert np.allclose(src.H2, src.Hxx, atol=1e-15)
    for r in range(N):
        for s in range(r + 1, N):
            expect = fr.Kb[N, r] * fr.beta_x[:, r, 0, 0] * be.cond_exp(P2[:, s, 0, 0], r)
            assert np.allclose(src.H1[:, s, r, 0, 0], expect, atol=1e-14)


def test_hessian_quadratic_running_cost(tree):
    pr = registry_get("lq_control", {"q": 2.5})
    grid, noise, ctrl, X, be = tree(pr, 6)
    fr = freeze(pr, grid, X, ctrl, 0.5)
    H = hessian_H(fr, solve_first_adjoint(fr, be))
    assert np.all(H == 2.5)


def test_hessian_symmetric_adapted(tree):
    pr = registry_get("lq_control")
    grid, noise, ctrl, X, be = tree(pr, 6, u=0.2)
    H = hessian_H(freeze(pr, grid, X, ctrl, 0.5), solve_first_adjoint(freeze(pr, grid, X, ctrl, 0.5), be))
    assert np.max(np.abs(H - np.swapaxes(H, -1, -2))) <= 1e-12
    for k in range(6):
        blocks = H[:, k].reshape(2**k, -1)
        assert np.max(np.abs(blocks - blocks[:, :1])) <= 1e-12


def test_kernel_free_p3_p4(tree):
    pr = registry_get("lq_control", {"a": 0.0, "s_x": 0.0})
    grid, noise, ctrl, X, be = tree(pr, 5)
    fr = freeze(pr, grid, X, ctrl, 0.5)
    first = solve_first_adjoint(fr, be)
    P1, Q1 = solve_p1_q1(fr.h_xx, be)
    P2, Q2, _ = solve_p2_q2(fr, P1, Q1, be)
    src = build_sources(fr, first, P1, Q1, P2, Q2, be)
    P3, P4, tele = solve_p3_p4(fr, src, be)
    low = np.tril(np.ones((5, 5), bool), -1)
    assert np.array_equal(P3[:, low], src.H1[:, low])
    assert np.array_equal(P4, src.H2)
    assert tele["outer_iterations"] <= 2 and tele["outer_deltas"][-1] == 0.0


def test_zero_sources(tree):
    _, _, _, _, _, _, sec = _solve(tree, registry_get("projection_cost"), 5)
    assert np.all(sec.P3 == 0.0) and np.all(sec.P4 == 0.0)


def test_p3_p4_errors(tree):
    pr = registry_get("linear_scalar")
    grid, noise, ctrl, X, be = tree(pr, 5)
    fr = freeze(pr, grid, X, ctrl, 0.5)
    first = solve_first_adjoint(fr, be)
    P1, Q1 = solve_p1_q1(fr.h_xx, be)
    P2, Q2, _ = solve_p2_q2(fr, P1, Q1, be)
    src = build_sources(fr, first, P1, Q1, P2, Q2, be)
    with pytest.raises(NoConvergence):
        solve_p3_p4(fr, src, be, max_iter=1, tol=1e-300)
    with pytest.raises(ValueError):
        solve_p3_p4(fr, src, be, beta=-1.0)


def scaled_costs(pr, c):
    k = pr.cost
    return replace(pr, cost=CostFunctions(
        g=lambda s, x, u: c * k.g(s, x, u), g_x=lambda s, x, u: c * k.g_x(s, x, u),
        g_xx=lambda s, x, u: c * k.g_xx(s, x, u), h=lambda x: c * k.h(x),
        h_x=lambda x: c * k.h_x(x), h_xx=lambda x: c * k.h_xx(x)))


def test_source_scaling(tree):
    pr = registry_get("linear_scalar")
    c = 3.0
    scaled = scaled_costs(pr, c)
    base = _solve(tree, pr, 5)[-1]
    big = _solve(tree, scaled, 5)[-1]
    for key in ("P1", "P2", "P3", "P4"):
        assert np.allclose(getattr(big, key), c * getattr(base, key), rtol=1e-12, atol=1e-13)


def test_quadratic_form_examples(tree):
    kappa = 0.4
    pr = registry_get("lq_control", {"a": 0.0, "s_x": 0.0, "q": 0.0, "r": 0.0, "kernel_decay": kappa})
    N = 6
    grid, noise, X, fr, be, first, sec = _solve(tree, pr, N, probe=0.8)
    assert np.all(sec.P2 == 0.0) and np.all(sec.P3 == 0.0) and np.all(sec.P4 == 0.0)
    win = SpikeWindow(1, 3)
    expect = sum(np.mean((fr.Ks[N, r] * fr.d_gamma[:, r, 0]) ** 2) for r in range(1, 4)) * grid.dt
    assert quadratic_form_adjoint(sec, fr, win) == pytest.approx(expect, rel=1e-14)
    _, _, _, fr0, _, _, sec0 = _solve(tree, registry_get("linear_scalar"), N, probe=0.0)
    assert quadratic_form_adjoint(sec0, fr0, win) == 0.0
