"""First-order adjoint system: the martingale pair (eta, zeta) and the Type-II BSVIE (Y, Z).

Discrete conventions (``k < N`` throughout):

    eta(k)  = E_k[h_x]
    zeta(k) = E_k[h_x dW_{k+1}] / dt
    Y(k)    = E_k[f(k)]
    f(k)    = g_x(k) + b_x(T,t_k)^T h_x + sigma_x(T,t_k)^T zeta(k)
              + sum_{k<j<N} (b_x(t_j,t_k)^T Y(j) + sigma_x(t_j,t_k)^T Z(j,k)) dt
    Z(j,k)  = E_k[Y(j) dW_{k+1}] / dt           for k < j   (M-solution)
    Z(k,j)  = E_j[f(k) dW_{j+1}] / dt           for j >= k

With these, the duality identity for the variational equations is exact on
the tree.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NoConvergence
from .martingale import project
from .problem import FrozenCoefficients

Array = np.ndarray


@dataclass
class FirstAdjoint:
    eta: Array = field(repr=False)     # (M, N+1, n)
    zeta: Array = field(repr=False)    # (M, N, n)
    Y: Array = field(repr=False)       # (M, N, n)
    Z: Array | None = field(repr=False)  # (M, N, N, n), Z[:, j, k] = Z(t_j, t_k)
    p: Array = field(repr=False)       # (M, N, n) drift aggregate
    q: Array = field(repr=False)       # (M, N, n) diffusion aggregate
    telemetry: dict = field(default_factory=dict)


def lipschitz_constant(frozen: FrozenCoefficients) -> float:
    """``8 |sigma_x|^2 + 4 |b_x|^2 T`` with grid-max operator norms."""
    T = frozen.grid.T
    kb = float(np.max(np.abs(frozen.Kb), initial=0.0)) or 1.0
    ks = float(np.max(np.abs(frozen.Ks), initial=0.0)) or 1.0
    bx = kb * float(np.max(np.linalg.norm(np.asarray(frozen.beta_x), ord=2, axis=(-2, -1)), initial=0.0))
    sx = ks * float(np.max(np.linalg.norm(np.asarray(frozen.gamma_x), ord=2, axis=(-2, -1)), initial=0.0))
    return 8.0 * sx**2 + 4.0 * bx**2 * T


def auto_beta(frozen: FrozenCoefficients) -> float:
    return 2.0 * lipschitz_constant(frozen)


def beta_norm(values: Array, dt: float, beta: float, kind: str = "time") -> float:
    """Squared discrete beta-norm.

    ``kind="time"``: ``E sum_k exp(beta t_k) |f(k)|^2 dt`` for ``[path, k, ...]``.
    ``kind="square"``: ``E sum_{s,r} exp(beta (t_s + t_r)) |F(s, r)|^2 dt^2``
    for ``[path, s, r, ...]``.
    """
    if beta < 0:
        raise ValueError("beta must be >= 0")
    f = np.asarray(values, float)
    if kind == "time":
        K = f.shape[1]
        w = np.exp(beta * dt * np.arange(K))
        sq = (f.reshape(f.shape[0], K, -1) ** 2).sum(axis=-1).mean(axis=0)
        return float(np.sum(w * sq) * dt)
    if kind == "square":
        S, R = f.shape[1], f.shape[2]
        w = np.exp(beta * dt * (np.arange(S)[:, None] + np.arange(R)[None, :]))
        sq = (f.reshape(f.shape[0], S, R, -1) ** 2).sum(axis=-1).mean(axis=0)
        return float(np.sum(w * sq) * dt * dt)
    raise ValueError(f"unknown norm kind {kind!r}")


def solve_eta_zeta(h_x: Array, backend) -> tuple[Array, Array]:
    """Martingale representation of the terminal gradient."""
    N = backend.N
    rep = project(np.asarray(h_x, float), N, backend)
    eta = np.moveaxis(rep.Pi, 0, 1)
    zeta = np.moveaxis(rep.Lam, 0, 1)
    return eta, zeta


def _tmat(A, v):
    # A^T applied to the leading trailing axis of v (vector or matrix valued)
    return np.einsum("mji,mj...->mi...", A, v)


class _Pass:
    """One application of the discrete Type-II map to an iterate ``Y``."""

    def __init__(self, frozen, base, Y, backend):
        N, dt = frozen.grid.N, frozen.grid.dt
        self.F = np.empty_like(base)
        self.Y = np.empty_like(base)
        self.agg_b = np.zeros_like(base)
        self.agg_s = np.zeros_like(base)
        for k in range(N):
            f = np.array(base[:, k])
            if k + 1 < N:
                later = Y[:, k + 1:]
                wb = frozen.Kb[k + 1:N, k] * dt
                ws = frozen.Ks[k + 1:N, k] * dt
                Zk = backend.integrand(later, k)
                self.agg_b[:, k] = np.einsum("mj...,j->m...", later, wb)
                self.agg_s[:, k] = np.einsum("mj...,j->m...", Zk, ws)
                f = f + _tmat(frozen.beta_x[:, k], self.agg_b[:, k]) + _tmat(frozen.gamma_x[:, k], self.agg_s[:, k])
            self.F[:, k] = f
            self.Y[:, k] = backend.cond_exp(f, k)


def _z_square(F, Y, backend):
    """``Z[:, j, k]``: integrand of ``Y(j)`` for ``k < j`` and of ``F(j)`` for ``k >= j``."""
    N = Y.shape[1]
    Z = np.empty((Y.shape[0], N) + Y.shape[1:])
    for k in range(N):
        stack = np.concatenate([F[:, :k + 1], Y[:, k + 1:]], axis=1)
        Z[:, :, k] = backend.integrand(stack, k)
    return Z


def solve_bsvie(frozen: FrozenCoefficients, base: Array, backend, tol: float, max_iter: int, beta: float,
                init: Array | None = None, what: str = "solve_bsvie"):
    """Picard iteration for ``Y(k) = E_k[base(k) + sum_{j>k} (b_x(j,k)^T Y(j) + sigma_x(j,k)^T Z(j,k)) dt]``.

    ``base`` is indexed ``[path, k, ...]`` and may be vector or matrix
    valued; ``Z(j, k)`` on ``k < j`` is taken from the M-solution constraint.
    Returns the final pass (``Y``, free terms ``F`` and the kernel
    aggregates) together with telemetry.
    """
    dt = frozen.grid.dt
    Y = np.zeros_like(base) if init is None else np.array(init, float)
    deltas, ratios = [], []
    for it in range(1, max_iter + 1):
        step = _Pass(frozen, base, Y, backend)
        delta = beta_norm(step.Y - Y, dt, beta)
        if deltas and deltas[-1] > 0:
            ratios.append(delta / deltas[-1])
        deltas.append(delta)
        Y = step.Y
        if np.sqrt(delta) < tol:
            break
    else:
        raise NoConvergence(what, max_iter, ratios[-1] if ratios else float("nan"), deltas[-1])
    final = _Pass(frozen, base, Y, backend)
    return final, {"iterations": it, "deltas": deltas, "ratios": ratios}


def _tmat4(A, v):
    # A[:, k]^T v for every k, v constant in k
    return np.einsum("mkji,mj->mki", A, v)


def _sweep(frozen, eta, zeta, backend):
    """Backward recursion on the kernel aggregates (exponential kernels)."""
    N, dt = frozen.grid.N, frozen.grid.dt
    rb = float(np.exp(-frozen.kb_decay * dt))
    rs = float(np.exp(-frozen.ks_decay * dt))
    h_x = np.asarray(eta[:, N])
    M, n = h_x.shape
    Y = np.empty((M, N, n))
    p = np.empty((M, N, n))
    q = np.empty((M, N, n))
    Pb_next, Ps_next, Y_next = h_x, h_x, np.zeros((M, n))
    for k in range(N - 1, -1, -1):
        tb = Pb_next + Y_next * dt
        ts = Ps_next + Y_next * dt
        p[:, k] = rb * backend.cond_exp(tb, k)
        q[:, k] = rs * backend.integrand(ts, k)
        Y[:, k] = frozen.g_x[:, k] + _tmat(frozen.beta_x[:, k], p[:, k]) + _tmat(frozen.gamma_x[:, k], q[:, k])
        Pb_next = p[:, k]
        Ps_next = p[:, k] if rs == rb else rs * backend.cond_exp(ts, k)
        Y_next = Y[:, k]
    return Y, p, q


def solve_type2_bsvie(frozen: FrozenCoefficients, eta: Array, zeta: Array, backend, tol: float | None = None,
                      max_iter: int = 200, method: str = "auto", beta: float | None = None,
                      Y0: Array | None = None) -> FirstAdjoint:
    """Solve for ``(Y, Z)``.

    ``method="picard"`` runs the fixed-point iteration and stores ``Z`` on the
    full square; ``method="sweep"`` solves the same discrete equations by one
    backward pass over the kernel aggregates, without storing ``Z``.
    """
    if tol is None:
        tol = 1e-10 if backend.exact else 1e-6
    if tol <= 0:
        raise ValueError("tol must be positive")
    N, M, n = frozen.grid.N, eta.shape[0], eta.shape[2]
    if method == "auto":
        method = "picard" if M * N * N * n <= 4_000_000 else "sweep"
    if beta is None:
        beta = auto_beta(frozen)
    eta = np.asarray(eta)
    if method == "picard":
        N = frozen.grid.N
        base = (np.asarray(frozen.g_x)
                + frozen.Kb[N, :N][None, :, None] * _tmat4(frozen.beta_x, eta[:, N])
                + frozen.Ks[N, :N][None, :, None] * np.einsum("mkji,mkj->mki", frozen.gamma_x, zeta))
        final, tele = solve_bsvie(frozen, base, backend, tol, max_iter, beta, Y0, "solve_type2_bsvie")
        Y = final.Y
        Z = _z_square(final.F, Y, backend)
        p = np.empty_like(Y)
        for k in range(N):
            p[:, k] = backend.cond_exp(frozen.Kb[N, k] * eta[:, N] + final.agg_b[:, k], k)
        q = frozen.Ks[N, :N][None, :, None] * zeta + final.agg_s
    elif method == "sweep":
        Y, p, q = _sweep(frozen, eta, zeta, backend)
        Z, tele = None, {"iterations": 1, "deltas": [], "ratios": []}
    else:
        raise ValueError(f"unknown method {method!r}")
    tele.update(method=method, beta=beta, tol=tol)
    return FirstAdjoint(eta, zeta, Y, Z, p, q, tele)


def solve_first_adjoint(frozen: FrozenCoefficients, backend, **kw) -> FirstAdjoint:
    eta, zeta = solve_eta_zeta(frozen.h_x, backend)
    return solve_type2_bsvie(frozen, eta, zeta, backend, **kw)


def m_solution_residual(adj: FirstAdjoint, noise) -> float:
    """``max |Y(j) - E[Y(j)] - sum_{k<j} Z(j,k) dW_{k+1}|``."""
    if adj.Z is None:
        raise ValueError("Z is not stored for sweep solutions")
    N = adj.Y.shape[1]
    worst = 0.0
    for j in range(N):
        recon = adj.Y[:, j].mean(axis=0) + np.einsum("mkn,mk->mn", adj.Z[:, j, :j], noise.dW[:, :j])
        worst = max(worst, float(np.max(np.abs(adj.Y[:, j] - recon), initial=0.0)))
    return worst


def hessian_H(frozen: FrozenCoefficients, adj: FirstAdjoint) -> Array:
    """x-Hessian of the Hamiltonian along the reference pair, ``(M, N, n, n)``."""
    return (np.asarray(frozen.g_xx)
            + np.einsum("mki,mkijl->mkjl", adj.p, frozen.beta_xx)
            + np.einsum("mki,mkijl->mkjl", adj.q, frozen.gamma_xx))
