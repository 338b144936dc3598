from dataclasses import replace

import numpy as np
import pytest

import oracles
from volterra_mp.hamiltonian import (build_context, build_sde_reduction, delta_H, eval_game_H, eval_H,
                                     eval_H_direct, first_order_bsde_residual, game_control,
                                     second_order_bsde_residual)
from volterra_mp.problem import ControlProcess, registry_get
from volterra_mp.spike import fit_slope
from volterra_mp.timebase import make_grid, sample_noise


def _ctx(name, N, u=0.0, params=None, **kw):
    pr = registry_get(name, params)
    grid = make_grid(pr.T, N)
    noise = sample_noise(grid, 2**N, "tree")
    if np.ndim(u) == 0:
        ctrl = ControlProcess.constant(np.full(pr.m, float(u)), N)
    else:
        ctrl = ControlProcess.deterministic(np.asarray(u, float).reshape(N, pr.m))
    return build_context(pr, grid, noise, ctrl, **kw)


def test_running_cost_only():
    ctx = _ctx("projection_cost", 5, u=0.1, params={"s0": 0.0})
    x = ctx.state[:, 2]
    for u in (-0.5, 0.3, 1.0):
        uu = np.full((32, 1), u)
        assert np.allclose(eval_H(ctx, 2, u), ctx.problem.g(0.4, x, uu))


def test_reference_increment_zero():
    ctx = _ctx("linear_scalar", 5, u=np.linspace(0, 0.5, 5))
    for k in range(5):
        assert np.all(delta_H(ctx, k, ctx.control.values[0, k]) == 0.0)


@pytest.mark.parametrize("name,params", [("linear_scalar", {}), ("lq_control", {"kernel_decay": 0.6})])
def test_aggregate_form_matches_literal(name, params):
    N = 6
    u = np.linspace(-0.2, 0.3, N)
    ctx = _ctx(name, N, u=u, params=params, second_order=False, method="picard")
    pr, grid, noise = ctx.problem, ctx.grid, ctx.noise
    E, L = oracles.atom_operators(noise.dW, grid.dt)
    ref = oracles.first_adjoint(oracles.Coefficients(pr, grid, ctx.state, u), E, L)
    t, dt = grid.nodes, grid.dt
    for k in range(N):
        for probe in (-1.0, 0.4):
            x = ctx.state[:, k]
            uu = np.full((2**N, 1), probe)
            lit = (pr.g(t[k], x, uu) + ref["eta"][:, k] * pr.b(t[N], t[k], x, uu)[:, 0]
                   + ref["zeta"][:, k] * pr.sigma(t[N], t[k], x, uu)[:, 0])
            acc = sum((ref["Y"][:, j] * pr.b(t[j], t[k], x, uu)[:, 0]
                       + ref["Z"][:, j, k] * pr.sigma(t[j], t[k], x, uu)[:, 0]) * dt for j in range(k + 1, N))
            lit = lit + (E[k] @ acc if k + 1 < N else 0.0)
            assert np.max(np.abs(eval_H(ctx, k, probe) - lit)) <= 1e-12
            assert np.max(np.abs(eval_H_direct(ctx, k, probe) - lit)) <= 1e-12


def test_affine_in_adjoints():
    ctx = _ctx("linear_scalar", 5, second_order=False, method="picard")
    f = ctx.first
    doubled = replace(ctx, first=replace(f, eta=2 * f.eta, zeta=2 * f.zeta, Y=2 * f.Y, Z=2 * f.Z))
    for k in range(5):
        g = ctx.problem.g(ctx.grid.nodes[k], ctx.state[:, k], np.full((32, 1), 0.7))
        h1 = eval_H_direct(ctx, k, 0.7)
        assert np.allclose(eval_H_direct(doubled, k, 0.7) - g, 2 * (h1 - g), atol=1e-13)


def test_direct_needs_z():
    ctx = _ctx("linear_scalar", 4, second_order=False, method="sweep")
    with pytest.raises(ValueError):
        eval_H_direct(ctx, 1, 0.5)


def test_reduced_form():
    ctx = _ctx("lq_control", 6, u=0.2)
    red = build_sde_reduction(ctx.first, ctx.second, ctx.frozen, ctx.backend)
    pr = ctx.problem
    for k in range(6):
        for probe in (-1.5, 0.0, 0.9):
            x, uu = ctx.state[:, k], np.full((64, 1), probe)
            reduced = (pr.g(0.0, x, uu) + np.sum(pr.beta(0.0, x, uu) * red.Mcal[:, k], axis=-1)
                       + np.sum(pr.gamma(0.0, x, uu) * red.Ncal[:, k], axis=-1))
            assert np.max(np.abs(eval_H(ctx, k, probe) - reduced)) <= 1e-10
    assert np.allclose(red.Mcal[:, 6], ctx.frozen.h_x)
    assert np.max(np.abs(red.Mscr - np.swapaxes(red.Mscr, -1, -2))) <= 1e-12


def test_reduction_bare_terminal():
    ctx = _ctx("lq_control", 5, params={"a": 0.0, "s_x": 0.0, "q": 0.0, "h0": 1.7})
    red = build_sde_reduction(ctx.first, ctx.second, ctx.frozen, ctx.backend)
    assert np.allclose(red.Mscr, 1.7, atol=1e-15)
    assert np.all(ctx.first.Y == 0.0)
    assert np.allclose(red.Mcal, ctx.first.eta) and np.allclose(red.Ncal, ctx.first.zeta)


def test_reduction_residuals():
    eps, second = [], []
    for N in (4, 6, 8, 10):
        ctx = _ctx("lq_control", N, u=0.2)
        red = build_sde_reduction(ctx.first, ctx.second, ctx.frozen, ctx.backend)
        assert first_order_bsde_residual(red, ctx.first, ctx.noise) <= 1e-10
        eps.append(ctx.grid.dt)
        second.append(second_order_bsde_residual(red, ctx.frozen, ctx.noise))
    assert fit_slope(eps, second).slope >= 1.0


def test_reduction_needs_t_independence():
    ctx = _ctx("linear_scalar", 4)
    with pytest.raises(ValueError):
        build_sde_reduction(ctx.first, ctx.second, ctx.frozen, ctx.backend)


# ------------------------------------------------------------------ games


def test_game_reference_and_decoupling():
    pr = registry_get("two_player_decoupled")
    grid = make_grid(1.0, 5)
    noise = sample_noise(grid, 32, "tree")
    ctrl = ControlProcess.constant([0.1, -0.2], 5)
    for l in (0, 1):
        ctx = build_context(pr, grid, noise, ctrl, player=l, second_order=False)
        ref = eval_game_H(ctx, 2, ctrl.values[0, 2, l])
        assert np.array_equal(ref, eval_H(ctx, 2, ctrl.values[0, 2]))
        other = game_control(ctx, 2, 0.9, (1 - l,))
        assert np.allclose(eval_H(ctx, 2, other), ref, atol=1e-14)
        assert not np.allclose(eval_game_H(ctx, 2, 0.9), ref)


def test_zero_sum_sign_flip():
    pr = registry_get("zero_sum_bilinear")
    grid = make_grid(1.0, 5)
    noise = sample_noise(grid, 32, "tree")
    ctrl = ControlProcess.constant([0.3, -0.4], 5)
    c1 = build_context(pr, grid, noise, ctrl, player=0, second_order=False)
    c2 = build_context(pr, grid, noise, ctrl, player=1, second_order=False)
    for k in range(5):
        for u in ([0.5, 0.5], [-1.0, 0.2]):
            assert np.max(np.abs(eval_H(c1, k, u) + eval_H(c2, k, u))) <= 1e-14


def test_game_errors():
    ctx = _ctx("linear_scalar", 3, second_order=False)
    with pytest.raises(ValueError):
        eval_game_H(ctx, 1, 0.0)
    pr = registry_get("two_player_decoupled")
    grid = make_grid(1.0, 3)
    noise = sample_noise(grid, 8, "tree")
    with pytest.raises(ValueError):
        build_context(pr, grid, noise, ControlProcess.constant([0.0, 0.0], 3), player=2)
