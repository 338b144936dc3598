"""Hamiltonian evaluation, the SDE reduction and per-player game Hamiltonians."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adjoint1 import FirstAdjoint, hessian_H, solve_first_adjoint
from .adjoint2 import SecondAdjoint, second_order_block, solve_second_adjoint
from .forward import solve_fsvie
from .martingale import RegressionConfig, make_backend
from .problem import ControlProcess, FrozenCoefficients, Problem, freeze, freeze_player
from .timebase import NoiseEnsemble, TimeGrid

Array = np.ndarray


@dataclass
class HamiltonianContext:
    """Reference pair, adjoints and backend on one shared grid and ensemble.

    ``problem`` carries the cost of the player the adjoints were built for.
    """

    problem: Problem
    grid: TimeGrid
    noise: NoiseEnsemble
    control: ControlProcess
    state: Array = field(repr=False)
    frozen: FrozenCoefficients = field(repr=False)
    backend: object = field(repr=False)
    first: FirstAdjoint = field(repr=False)
    second: SecondAdjoint | None = field(default=None, repr=False)
    player: int | None = None

    @property
    def M(self) -> int:
        return self.noise.M

    def reference_u(self, k: int) -> Array:
        u = self.control.values[:, k]
        return np.broadcast_to(u, (self.M, u.shape[-1]))


def build_context(problem: Problem, grid: TimeGrid, noise: NoiseEnsemble, control: ControlProcess,
                  player: int | None = None, second_order: bool = True, method: str = "auto",
                  regression: RegressionConfig | None = None, exact_discrete: bool = True,
                  backend=None, beta="auto") -> HamiltonianContext:
    """Simulate the reference state and solve the adjoint systems along it."""
    X = solve_fsvie(problem, grid, noise, control).values
    if backend is None:
        backend = make_backend(noise, X, regression)
    frozen = freeze(problem, grid, X, control, control.values[0, 0])
    cost_problem = problem
    if player is not None:
        frozen = freeze_player(problem, frozen, X, control, player)
        cost_problem = problem.for_player(player)
    first = solve_first_adjoint(frozen, backend, method=method)
    second = None
    if second_order:
        second = solve_second_adjoint(frozen, first, backend, beta=beta, exact_discrete=exact_discrete)
    return HamiltonianContext(cost_problem, grid, noise, control, X, frozen, backend, first, second, player)


def _as_paths(u, M: int, m: int) -> Array:
    u = np.asarray(u, float)
    if u.ndim <= 1:
        u = np.broadcast_to(u, (m,))
    return np.broadcast_to(u, (M, m))


def eval_H(ctx: HamiltonianContext, k: int, u) -> Array:
    """Per-path Hamiltonian at ``t_k`` through the kernel aggregates ``p``, ``q``.

    With separable kernels the adjoint-weighted sums collapse to
    ``g + <p(k), beta(t_k, X, u)> + <q(k), gamma(t_k, X, u)>``.
    """
    pr = ctx.problem
    s = ctx.grid.nodes[k]
    x = ctx.state[:, k]
    uu = _as_paths(u, ctx.M, pr.m)
    g = np.broadcast_to(np.asarray(pr.g(s, x, uu), float), (ctx.M,))
    return g + np.einsum("mi,mi->m", ctx.first.p[:, k], pr.beta(s, x, uu)) \
        + np.einsum("mi,mi->m", ctx.first.q[:, k], pr.gamma(s, x, uu))


def eval_H_direct(ctx: HamiltonianContext, k: int, u) -> Array:
    """Literal evaluation with ``eta``, ``zeta``, ``Y`` and ``Z`` (needs ``Z`` stored)."""
    if ctx.first.Z is None:
        raise ValueError("direct evaluation needs Z on the full square")
    pr, first, grid = ctx.problem, ctx.first, ctx.grid
    N, dt, t = grid.N, grid.dt, grid.nodes
    x = ctx.state[:, k]
    uu = _as_paths(u, ctx.M, pr.m)
    val = (np.asarray(pr.g(t[k], x, uu), float)
           + np.einsum("mi,mi->m", first.eta[:, k], pr.b(t[N], t[k], x, uu))
           + np.einsum("mi,mi->m", first.zeta[:, k], pr.sigma(t[N], t[k], x, uu)))
    acc = np.zeros(ctx.M)
    for j in range(k + 1, N):
        acc = acc + (np.einsum("mi,mi->m", first.Y[:, j], pr.b(t[j], t[k], x, uu))
                     + np.einsum("mi,mi->m", first.Z[:, j, k], pr.sigma(t[j], t[k], x, uu))) * dt
    return val + ctx.backend.cond_exp(acc, k)


def delta_H(ctx: HamiltonianContext, k: int, u) -> Array:
    return eval_H(ctx, k, u) - eval_H(ctx, k, ctx.reference_u(k))


def delta_gamma(ctx: HamiltonianContext, k: int, u) -> Array:
    pr = ctx.problem
    s, x = ctx.grid.nodes[k], ctx.state[:, k]
    return pr.gamma(s, x, _as_paths(u, ctx.M, pr.m)) - pr.gamma(s, x, ctx.reference_u(k))


def second_order_term(ctx: HamiltonianContext, k: int, u) -> Array:
    """Per-path ``sum_{t,s>k} dsigma(t,k)^T Pi_ts(k) dsigma(s,k)`` for probe ``u``."""
    if ctx.second is None:
        raise ValueError("context was built without the second-order adjoints")
    return second_order_block(ctx.second, delta_gamma(ctx, k, u), k)


def game_control(ctx: HamiltonianContext, k: int, u_l, slot) -> Array:
    """Reference control at ``t_k`` with the entries in ``slot`` replaced by ``u_l``."""
    full = np.array(ctx.reference_u(k))
    full[:, list(slot)] = np.broadcast_to(np.asarray(u_l, float), (ctx.M, len(slot)))
    return full


def eval_game_H(ctx: HamiltonianContext, k: int, u_l, slot=None) -> Array:
    """Player Hamiltonian with the player's own control slot replaced by ``u_l``."""
    if ctx.player is None:
        raise ValueError("context is not a per-player game context")
    if slot is None:
        slots = ctx.problem.slots
        if not 0 <= ctx.player < len(slots):
            raise ValueError(f"player index {ctx.player} out of range")
        slot = slots[ctx.player]
    return eval_H(ctx, k, game_control(ctx, k, u_l, slot))


# ---------------------------------------------------------- SDE reduction


@dataclass
class SdeReduction:
    Mcal: Array = field(repr=False)   # first-order (M, N+1, n)
    Ncal: Array = field(repr=False)   # (M, N, n)
    Mscr: Array = field(repr=False)   # second-order (M, N+1, n, n)
    Nscr: Array = field(repr=False)   # (M, N, n, n)
    Hxx: Array = field(repr=False)


def build_sde_reduction(first: FirstAdjoint, second: SecondAdjoint, frozen: FrozenCoefficients,
                        backend) -> SdeReduction:
    """Aggregates of the classical (t-independent) case."""
    if frozen.kb_decay != 0.0 or frozen.ks_decay != 0.0:
        raise ValueError("SDE reduction needs coefficients independent of the outer time t")
    N, dt = frozen.grid.N, frozen.grid.dt
    M, n = first.eta.shape[0], first.eta.shape[-1]
    Y = first.Y
    Mcal = np.empty((M, N + 1, n))
    Ncal = np.empty((M, N, n))
    Mcal[:, N] = first.eta[:, N]
    for k in range(N):
        later = Y[:, k + 1:].sum(axis=1) * dt
        Mcal[:, k] = first.eta[:, k] + backend.cond_exp(later, k)
        if first.Z is not None:
            zsum = first.Z[:, k + 1:, k].sum(axis=1) * dt
        else:
            zsum = backend.integrand(later, k)
        Ncal[:, k] = first.zeta[:, k] + zsum

    P1, P2, P3, P4 = second.P1, second.P2, second.P3, second.P4
    Mscr = np.empty((M, N + 1, n, n))
    Nscr = np.empty((M, N, n, n))
    Mscr[:, N] = P1[:, N]
    T = lambda A: np.swapaxes(A, -1, -2)
    for k in range(N):
        sl = slice(k + 1, N)
        G = (P1[:, N] + (P2[:, sl] + T(P2[:, sl])).sum(axis=1) * dt
             + P3[:, sl, sl].sum(axis=(1, 2)) * dt * dt + P4[:, sl].sum(axis=1) * dt)
        Mscr[:, k] = backend.cond_exp(G, k)
        nq = second.Q1[:, k] + (second.Q2[:, sl, k] + T(second.Q2[:, sl, k])).sum(axis=1) * dt \
            + second.Q4[:, sl, k].sum(axis=1) * dt
        if second.Q3 is not None:
            nq = nq + second.Q3[:, sl, sl, k].sum(axis=(1, 2)) * dt * dt
        else:
            nq = nq + backend.integrand(P3[:, sl, sl].sum(axis=(1, 2)), k) * dt * dt
        Nscr[:, k] = nq
    return SdeReduction(Mcal, Ncal, Mscr, Nscr, hessian_H(frozen, first))


def first_order_bsde_residual(red: SdeReduction, first: FirstAdjoint, noise: NoiseEnsemble) -> float:
    """``max |M(k) - M(k+1) - Y(k+1) dt + N(k) dW_{k+1}|`` (exact on the tree)."""
    N, dt = noise.grid.N, noise.grid.dt
    worst = 0.0
    for k in range(N):
        y = first.Y[:, k + 1] * dt if k + 1 < N else 0.0
        r = red.Mcal[:, k] - red.Mcal[:, k + 1] - y + red.Ncal[:, k] * noise.dW[:, k, None]
        worst = max(worst, float(np.max(np.abs(r), initial=0.0)))
    return worst


def second_order_bsde_residual(red: SdeReduction, frozen: FrozenCoefficients, noise: NoiseEnsemble) -> float:
    """Root-mean-square one-step residual of the classical second-order BSDE.

    ``dM = -(b_x^T M + sigma_x^T N + M b_x + N sigma_x + H_xx + sigma_x^T M sigma_x) dt + N dW``
    holds for the discrete aggregates up to O(dt); the generator is taken at
    the later node, matching the backward recursion of the blocks.
    """
    N, dt = noise.grid.N, noise.grid.dt
    bx, sx = frozen.beta_x, frozen.gamma_x
    T = lambda A: np.swapaxes(A, -1, -2)
    total = 0.0
    for k in range(N):
        r = red.Mscr[:, k] - red.Mscr[:, k + 1] + red.Nscr[:, k] * noise.dW[:, k, None, None]
        j = k + 1
        if j < N:
            Mj, Nj = red.Mscr[:, j], red.Nscr[:, j]
            gen = (T(bx[:, j]) @ Mj + T(sx[:, j]) @ Nj + Mj @ bx[:, j] + Nj @ sx[:, j] + red.Hxx[:, j]
                   + T(sx[:, j]) @ Mj @ sx[:, j])
            r = r - gen * dt
        total += float(np.mean(np.sum(r**2, axis=(-1, -2))))
    return float(np.sqrt(total))


def classical_condition(ctx: HamiltonianContext, red: SdeReduction, k: int, u) -> Array:
    """Per-path classical maximum-condition left side at ``t_k``.

    The second-order term enters as ``1/2 dsigma^T M dsigma``.
    """
    pr = ctx.problem
    s, x = ctx.grid.nodes[k], ctx.state[:, k]
    uu = _as_paths(u, ctx.M, pr.m)
    ub = ctx.reference_u(k)
    dg = np.asarray(pr.g(s, x, uu), float) - np.asarray(pr.g(s, x, ub), float)
    db = pr.beta(s, x, uu) - pr.beta(s, x, ub)
    ds = pr.gamma(s, x, uu) - pr.gamma(s, x, ub)
    return (dg + np.einsum("mi,mi->m", db, red.Mcal[:, k]) + np.einsum("mi,mi->m", ds, red.Ncal[:, k])
            + 0.5 * np.einsum("mi,mij,mj->m", ds, red.Mscr[:, k], ds))
