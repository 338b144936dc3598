"""Second-order adjoint system and its quadratic-form representation.

The discrete system comes from the quadratic value function of the first
variational equation. At level ``r`` the future blocks are collected in a
symmetric block matrix ``G`` indexed by ``t, s in (r, N]``:

    G[N, N] = h_xx                G[t, N] = dt P2(t)      G[N, s] = dt P2(s)^T
    G[t, t] = dt P4(t)            G[t, s] = dt^2 P3(s, t)   (t != s, both < N)

With ``Pi_ts(r) = E_r G[t, s]`` and ``Lam_ts(r) = E_r[G[t, s] dW_{r+1}] / dt``:

    P3(theta, r) = sum_{s>r} (b_x(s,r)^T Pi_{s,theta} + sigma_x(s,r)^T Lam_{s,theta}) / dt
    P4(r) = H_xx(r) + sum_{t,s>r} sigma_t^T Pi_ts sigma_s
            + dt * sum_{t,s>r} (b_t^T Pi_ts b_s + b_t^T Lam_ts sigma_s + sigma_t^T Lam_ts b_s)

The terms carrying ``G[N, .]`` form the sources ``H1`` and ``H2``. The last
line is an O(dt) correction that makes the representation exact on the
tree; ``exact_discrete=False`` drops it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adjoint1 import FirstAdjoint, auto_beta, beta_norm, hessian_H, solve_bsvie
from .errors import InternalConsistency, NoConvergence
from .forward import SpikeWindow
from .martingale import project
from .problem import FrozenCoefficients

Array = np.ndarray

__all__ = [
    "SecondAdjoint", "SecondAdjointSources", "beta_norm", "build_sources", "constraint_residuals",
    "quadratic_form_adjoint", "second_order_block", "solve_p1_q1", "solve_p2_q2", "solve_p3_p4",
    "solve_second_adjoint", "symmetry_defects",
]


def _T(A):
    return np.swapaxes(A, -1, -2)


@dataclass
class SecondAdjointSources:
    H1: Array = field(repr=False)   # (M, N, N, n, n), H1[:, s, r] for s > r
    H2: Array = field(repr=False)   # (M, N, n, n)
    Hxx: Array = field(repr=False)  # (M, N, n, n)


@dataclass
class SecondAdjoint:
    P1: Array = field(repr=False)   # (M, N+1, n, n)
    Q1: Array = field(repr=False)   # (M, N, n, n)
    P2: Array = field(repr=False)   # (M, N, n, n)
    Q2: Array = field(repr=False)   # (M, N, N, n, n), Q2[:, s, k]
    P3: Array = field(repr=False)   # (M, N, N, n, n), zero diagonal
    Q3: Array | None = field(repr=False)  # (M, N, N, N, n, n), Q3[:, s, t, v] for v < min(s, t)
    P4: Array = field(repr=False)   # (M, N, n, n)
    Q4: Array = field(repr=False)   # (M, N, N, n, n), Q4[:, s, k] for k < s
    S: Array = field(repr=False)    # (M, N, n, n), sigma-kernel weighted sum of Pi(r)
    dt: float = 0.0
    telemetry: dict = field(default_factory=dict)


# ------------------------------------------------------------- P1 and P2


def solve_p1_q1(h_xx: Array, backend) -> tuple[Array, Array]:
    h_xx = np.asarray(h_xx, float)
    rep = project(h_xx, backend.N, backend)
    return np.moveaxis(rep.Pi, 0, 1), np.moveaxis(rep.Lam, 0, 1)


def solve_p2_q2(frozen: FrozenCoefficients, P1: Array, Q1: Array, backend, tol: float | None = None,
                max_iter: int = 200, beta: float | None = None) -> tuple[Array, Array, dict]:
    """Type-II BSVIE for ``P2`` with ``Q2`` on the full square."""
    from .adjoint1 import _z_square

    N = frozen.grid.N
    if tol is None:
        tol = 1e-10 if backend.exact else 1e-6
    if beta is None:
        beta = auto_beta(frozen)
    base = (frozen.Kb[N, :N][None, :, None, None] * np.einsum("mkji,mkjl->mkil", frozen.beta_x, P1[:, :N])
            + frozen.Ks[N, :N][None, :, None, None] * np.einsum("mkji,mkjl->mkil", frozen.gamma_x, Q1))
    final, tele = solve_bsvie(frozen, base, backend, tol, max_iter, beta, what="solve_p2_q2")
    return final.Y, _z_square(final.F, final.Y, backend), tele


# ------------------------------------------------------------ block maps


def _assemble(P2: Array | None, P3: Array | None, P4: Array | None, h_xx: Array | None, dt: float,
              M: int, N: int, n: int) -> Array:
    G = np.zeros((M, N + 1, N + 1, n, n))
    if h_xx is not None:
        G[:, N, N] = h_xx
    if P2 is not None:
        G[:, :N, N] = dt * P2
        G[:, N, :N] = dt * _T(P2)
    if P3 is not None:
        G[:, :N, :N] = dt * dt * np.swapaxes(P3, 1, 2)
    if P4 is not None:
        idx = np.arange(N)
        G[:, idx, idx] = G[:, idx, idx] + dt * P4
    return G


class _Level:
    """Conditioned blocks of ``G`` at level ``r`` and the kernel weights."""

    def __init__(self, frozen, G, r, backend):
        dt = frozen.grid.dt
        Gr = G[:, r + 1:, r + 1:]
        self.Pi = backend.cond_exp(Gr, r)
        self.Lam = backend.integrand(Gr, r)
        self.kb = frozen.Kb[r + 1:, r]
        self.ks = frozen.Ks[r + 1:, r]
        self.bx = frozen.beta_x[:, r]
        self.sx = frozen.gamma_x[:, r]
        self.dt = dt

    def p3_column(self):
        """``P3(theta, r)`` for ``theta = r+1 .. N-1``."""
        A = np.einsum("s,msqij->mqij", self.kb, self.Pi)
        B = np.einsum("s,msqij->mqij", self.ks, self.Lam)
        col = np.einsum("mki,mqkj->mqij", self.bx, A) + np.einsum("mki,mqkj->mqij", self.sx, B)
        return col[:, :-1] / self.dt

    def sigma_weighted(self):
        return np.einsum("t,s,mtsij->mij", self.ks, self.ks, self.Pi)

    def p4_value(self, exact_discrete):
        S = self.sigma_weighted()
        out = _T(self.sx) @ S @ self.sx
        if exact_discrete:
            Abb = np.einsum("t,s,mtsij->mij", self.kb, self.kb, self.Pi)
            Abs = np.einsum("t,s,mtsij->mij", self.kb, self.ks, self.Lam)
            Asb = np.einsum("t,s,mtsij->mij", self.ks, self.kb, self.Lam)
            out = out + self.dt * (_T(self.bx) @ Abb @ self.bx + _T(self.bx) @ Abs @ self.sx
                                   + _T(self.sx) @ Asb @ self.bx)
        return out, S


def build_sources(frozen: FrozenCoefficients, first: FirstAdjoint, P1: Array, Q1: Array, P2: Array, Q2: Array,
                  backend, exact_discrete: bool = True) -> SecondAdjointSources:
    """``H1``, ``H2`` and ``H_xx``: everything in the P3/P4 equations not involving P3, P4."""
    del Q1, Q2  # recovered from G by the shared backend
    N, dt = frozen.grid.N, frozen.grid.dt
    M, n = P1.shape[0], P1.shape[-1]
    Hxx = hessian_H(frozen, first)
    G = _assemble(P2, None, None, P1[:, N], dt, M, N, n)
    H1 = np.zeros((M, N, N, n, n))
    H2 = np.empty((M, N, n, n))
    for r in range(N):
        lev = _Level(frozen, G, r, backend)
        H1[:, r + 1:, r] = lev.p3_column()
        val, _ = lev.p4_value(exact_discrete)
        H2[:, r] = Hxx[:, r] + val
    return SecondAdjointSources(H1, H2, Hxx)


# ------------------------------------------------------------- P3 and P4


def _mirror(P3):
    """Fill the ``s < r`` half from ``P3(s, r) = P3(r, s)^T``."""
    low = np.tril(np.ones(P3.shape[1:3], bool), k=-1)
    out = np.where(low[None, :, :, None, None], P3, 0.0)
    return out + _T(np.swapaxes(out, 1, 2))


def _p3_sweep(frozen, sources, P3, p4, backend):
    N, dt = frozen.grid.N, frozen.grid.dt
    M, n = p4.shape[0], p4.shape[-1]
    G = _assemble(None, P3, p4, None, dt, M, N, n)
    new = np.array(sources.H1)
    for r in range(N - 1):
        new[:, r + 1:, r] += _Level(frozen, G, r, backend).p3_column()
    return _mirror(new)


def _p4_update(frozen, sources, P3, p4, backend, exact_discrete):
    N, dt = frozen.grid.N, frozen.grid.dt
    M, n = p4.shape[0], p4.shape[-1]
    G = _assemble(None, P3, p4, None, dt, M, N, n)
    new = np.array(sources.H2)
    for r in range(N - 1):
        val, _ = _Level(frozen, G, r, backend).p4_value(exact_discrete)
        new[:, r] += val
    return new


def _check_symmetric(A, what, tol=1e-8):
    defect = float(np.max(np.abs(A - _T(A)), initial=0.0))
    if defect > tol:
        raise InternalConsistency(f"{what} is not symmetric (defect {defect:.3e})")
    return 0.5 * (A + _T(A))


def solve_p3_p4(frozen: FrozenCoefficients, sources: SecondAdjointSources, backend, beta: float | str = "auto",
                tol: float | None = None, max_iter: int = 200, exact_discrete: bool = True):
    """Outer Picard on ``p4`` with an inner Jacobi iteration for ``P3``.

    Returns ``(P3, P4, telemetry)``; the telemetry records squared beta-norm
    deltas and their successive ratios for both loops.
    """
    N, dt = frozen.grid.N, frozen.grid.dt
    if tol is None:
        tol = 1e-12 if backend.exact else 1e-6
    if beta == "auto":
        beta = auto_beta(frozen)
    beta = float(beta)
    if beta < 0:
        raise ValueError("beta must be >= 0")
    M, n = sources.H2.shape[0], sources.H2.shape[-1]
    p4 = np.zeros((M, N, n, n))
    P3 = np.zeros((M, N, N, n, n))
    outer_deltas, outer_ratios, inner_counts, inner_ratios = [], [], [], []
    for outer in range(1, max_iter + 1):
        deltas = []
        for inner in range(1, max_iter + 1):
            P3_new = _p3_sweep(frozen, sources, P3, p4, backend)
            d = beta_norm(P3_new - P3, dt, beta, kind="square")
            if deltas and deltas[-1] > 0:
                inner_ratios.append(d / deltas[-1])
            deltas.append(d)
            P3 = P3_new
            if np.sqrt(d) < tol:
                break
        else:
            raise NoConvergence("solve_p3_p4 (inner P3 loop)", max_iter,
                                inner_ratios[-1] if inner_ratios else float("nan"), deltas[-1])
        inner_counts.append(inner)
        P4 = _check_symmetric(_p4_update(frozen, sources, P3, p4, backend, exact_discrete), "P4")
        d = beta_norm(P4 - p4, dt, beta)
        if outer_deltas and outer_deltas[-1] > 0:
            outer_ratios.append(d / outer_deltas[-1])
        outer_deltas.append(d)
        p4 = P4
        if np.sqrt(d) < tol:
            break
    else:
        raise NoConvergence("solve_p3_p4", max_iter, outer_ratios[-1] if outer_ratios else float("nan"),
                            outer_deltas[-1])
    # P3 consistent with the final P4
    P3 = _p3_sweep(frozen, sources, P3, p4, backend)
    tele = {"beta": beta, "tol": tol, "outer_iterations": outer, "outer_deltas": outer_deltas,
            "outer_ratios": outer_ratios, "inner_iterations": inner_counts, "inner_ratios": inner_ratios}
    return P3, p4, tele


# ------------------------------------------------------------- assembly


def _integrands_upper(P, backend):
    """``Q[:, s, k] = E_k[P(s) dW_{k+1}] / dt`` for ``k < s``, zero elsewhere."""
    M, N = P.shape[:2]
    Q = np.zeros((M, N, N) + P.shape[2:])
    for k in range(N - 1):
        Q[:, k + 1:, k] = backend.integrand(P[:, k + 1:], k)
    return Q


def _q3(P3, backend):
    M, N = P3.shape[:2]
    Q3 = np.zeros((M, N, N, N) + P3.shape[3:])
    for v in range(N - 1):
        Q3[:, v + 1:, v + 1:, v] = backend.integrand(P3[:, v + 1:, v + 1:], v)
    return Q3


def solve_second_adjoint(frozen: FrozenCoefficients, first: FirstAdjoint, backend, beta: float | str = "auto",
                         tol: float | None = None, max_iter: int = 200, exact_discrete: bool = True,
                         store_q3: bool | None = None) -> SecondAdjoint:
    N, dt = frozen.grid.N, frozen.grid.dt
    P1, Q1 = solve_p1_q1(frozen.h_xx, backend)
    P1 = _check_symmetric(P1, "P1")
    P2, Q2, tele2 = solve_p2_q2(frozen, P1, Q1, backend)
    sources = build_sources(frozen, first, P1, Q1, P2, Q2, backend, exact_discrete)
    P3, P4, tele = solve_p3_p4(frozen, sources, backend, beta, tol, max_iter, exact_discrete)
    M, n = P4.shape[0], P4.shape[-1]
    if store_q3 is None:
        store_q3 = M * N**3 * n * n <= 20_000_000
    G = _assemble(P2, P3, P4, P1[:, N], dt, M, N, n)
    S = np.zeros((M, N, n, n))
    for r in range(N):
        S[:, r] = _Level(frozen, G, r, backend).sigma_weighted()
    tele["p2"] = tele2
    tele["exact_discrete"] = exact_discrete
    return SecondAdjoint(P1, Q1, P2, Q2, P3, _q3(P3, backend) if store_q3 else None, P4,
                         _integrands_upper(P4, backend), S, dt, tele)


def second_order_block(second: SecondAdjoint, d_gamma: Array, r: int, Ks: Array | None = None) -> Array:
    """Per-path ``sum_{t,s>r} dsigma(t,r)^T Pi_ts(r) dsigma(s,r)`` with ``dsigma = K_s * d_gamma``."""
    d = np.broadcast_to(np.asarray(d_gamma, float), second.S[:, r].shape[:-1])
    return np.einsum("mi,mij,mj->m", d, second.S[:, r], d)


def quadratic_form_adjoint(second: SecondAdjoint, frozen: FrozenCoefficients, window: SpikeWindow) -> float:
    """Adjoint representation of the second-order cost term for a spike window."""
    N = frozen.grid.N
    window.check(N, allow_empty=True)
    total = 0.0
    for r in range(window.tau, window.tau + window.width):
        total += float(np.mean(second_order_block(second, frozen.d_gamma[:, r], r)))
    return total * frozen.grid.dt


# ------------------------------------------------------------ diagnostics


def _recon(P, Q, dW, level):
    # P - E[P] - sum_{k<level} Q_k dW_{k+1}, Q indexed [path, k, ...]
    acc = P.mean(axis=0, keepdims=True)
    for k in range(level):
        acc = acc + Q[:, k] * dW[:, k].reshape((-1,) + (1,) * (P.ndim - 1))
    return float(np.max(np.abs(P - acc), initial=0.0))


def constraint_residuals(second: SecondAdjoint, noise) -> dict:
    """Max residual of each ``P = E[P] + sum Q dW`` identity."""
    dW = noise.dW
    N = second.P2.shape[1]
    out = {"P1": max(_recon(second.P1[:, k], second.Q1, dW, k) for k in range(N + 1))}
    out["P2"] = max(_recon(second.P2[:, s], second.Q2[:, s], dW, s) for s in range(N))
    out["P4"] = max(_recon(second.P4[:, s], second.Q4[:, s], dW, s) for s in range(N))
    if second.Q3 is not None:
        out["P3"] = max(_recon(second.P3[:, s, t], second.Q3[:, s, t], dW, min(s, t))
                        for s in range(N) for t in range(N) if s != t)
    return out


def symmetry_defects(second: SecondAdjoint) -> dict:
    out = {
        "P1": float(np.max(np.abs(second.P1 - _T(second.P1)), initial=0.0)),
        "Q1": float(np.max(np.abs(second.Q1 - _T(second.Q1)), initial=0.0)),
        "P4": float(np.max(np.abs(second.P4 - _T(second.P4)), initial=0.0)),
        "P3_swap": float(np.max(np.abs(second.P3 - _T(np.swapaxes(second.P3, 1, 2))), initial=0.0)),
    }
    if second.Q3 is not None:
        out["Q3_swap"] = float(np.max(np.abs(second.Q3 - _T(np.swapaxes(second.Q3, 1, 2))), initial=0.0))
    return out
