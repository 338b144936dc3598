"""Problem registry, admissible controls and frozen coefficients.

Every registry problem has separable Volterra coefficients

    b(t, s, x, u) = K_b(t, s) * beta(s, x, u)
    sigma(t, s, x, u) = K_s(t, s) * gamma(s, x, u)

with exponential scalar kernels ``K(t, s) = exp(-kappa (t - s))``. A kernel
with ``kappa = 0`` makes the coefficient independent of ``t``, which is the
classical SDE case.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .timebase import NoiseEnsemble, TimeGrid

Array = np.ndarray


@dataclass(frozen=True)
class ExpKernel:
    decay: float = 0.0

    def __call__(self, t, s):
        return np.exp(-self.decay * (np.asarray(t, float) - np.asarray(s, float)))

    def matrix(self, grid: TimeGrid) -> Array:
        """``K[j, k] = K(t_j, t_k)`` for ``k < j``, zero elsewhere."""
        t = grid.nodes
        return np.tril(self(t[:, None], t[None, :]), k=-1)

    @property
    def constant(self) -> bool:
        return self.decay == 0.0


@dataclass(frozen=True)
class CostFunctions:
    g: Callable
    g_x: Callable
    g_xx: Callable
    h: Callable
    h_x: Callable
    h_xx: Callable


@dataclass(frozen=True)
class Problem:
    """Controlled Volterra problem with coded derivatives.

    Local factors take ``(s, x, u)`` with ``x`` of shape ``(..., n)`` and
    ``u`` of shape ``(..., m)``. Jacobians are indexed ``[..., i, j] =
    d f_i / d x_j`` and Hessians ``[..., i, j, l]``.
    """

    name: str
    n: int
    m: int
    T: float
    phi: Callable
    kb: ExpKernel
    ks: ExpKernel
    beta: Callable
    beta_x: Callable
    beta_xx: Callable
    gamma: Callable
    gamma_x: Callable
    gamma_xx: Callable
    cost: CostFunctions
    probes: tuple = ()
    box: tuple | None = None
    params: dict = field(default_factory=dict)
    players: tuple = ()
    slots: tuple = ()

    # coefficient evaluators in the (t, s, x, u) form
    def b(self, t, s, x, u):
        return _kern(self.kb, t, s, 1) * self.beta(s, x, u)

    def b_x(self, t, s, x, u):
        return _kern(self.kb, t, s, 2) * self.beta_x(s, x, u)

    def b_xx(self, t, s, x, u):
        return _kern(self.kb, t, s, 3) * self.beta_xx(s, x, u)

    def sigma(self, t, s, x, u):
        return _kern(self.ks, t, s, 1) * self.gamma(s, x, u)

    def sigma_x(self, t, s, x, u):
        return _kern(self.ks, t, s, 2) * self.gamma_x(s, x, u)

    def sigma_xx(self, t, s, x, u):
        return _kern(self.ks, t, s, 3) * self.gamma_xx(s, x, u)

    def g(self, s, x, u):
        return self.cost.g(s, x, u)

    def g_x(self, s, x, u):
        return self.cost.g_x(s, x, u)

    def g_xx(self, s, x, u):
        return self.cost.g_xx(s, x, u)

    def h(self, x):
        return self.cost.h(x)

    def h_x(self, x):
        return self.cost.h_x(x)

    def h_xx(self, x):
        return self.cost.h_xx(x)

    @property
    def t_independent(self) -> bool:
        return self.kb.constant and self.ks.constant

    @property
    def n_players(self) -> int:
        return len(self.players)

    def for_player(self, l: int) -> "Problem":
        if not 0 <= l < len(self.players):
            raise ValueError(f"player index {l} out of range for {len(self.players)} players")
        return replace(self, name=f"{self.name}[{l}]", cost=self.players[l])


def _kern(kernel: ExpKernel, t, s, trailing: int):
    k = np.asarray(kernel(t, s))
    return k.reshape(k.shape + (1,) * trailing)


def _lead(s, x, u):
    return np.broadcast_shapes(np.shape(s), np.shape(x)[:-1], np.shape(u)[:-1])


def _full(value, s, x, u, tail=()):
    return np.broadcast_to(np.asarray(value, float), _lead(s, x, u) + tail)


@dataclass
class ControlProcess:
    """Control values indexed ``[path, k, component]`` for ``k < N``.

    A leading axis of length one means the control is deterministic.
    """

    values: Array

    @classmethod
    def constant(cls, u, N: int) -> "ControlProcess":
        u = np.atleast_1d(np.asarray(u, float))
        return cls(np.broadcast_to(u, (1, N, u.size)).copy())

    @classmethod
    def deterministic(cls, seq) -> "ControlProcess":
        seq = np.asarray(seq, float)
        if seq.ndim == 1:
            seq = seq[:, None]
        return cls(seq[None].copy())

    @property
    def N(self) -> int:
        return self.values.shape[1]

    @property
    def m(self) -> int:
        return self.values.shape[2]

    def full(self, M: int) -> Array:
        return np.broadcast_to(self.values, (M,) + self.values.shape[1:])

    def is_adapted(self, noise: NoiseEnsemble, tol: float = 0.0) -> bool:
        if self.values.shape[0] == 1 or noise.mode != "tree":
            return True
        N, M = noise.grid.N, noise.M
        for k in range(N):
            blocks = self.values[:, k].reshape(2**k, M // 2**k, -1)
            if np.max(np.abs(blocks - blocks[:, :1]), initial=0.0) > tol:
                return False
        return True


# ---------------------------------------------------------------- registry


def _scalar_quadratic_cost(q: float, r: float, h0: float, u_center: float = 0.0) -> CostFunctions:
    return CostFunctions(
        g=lambda s, x, u: 0.5 * q * x[..., 0] ** 2 + 0.5 * r * (u[..., 0] - u_center) ** 2,
        g_x=lambda s, x, u: np.broadcast_to(q * x, _lead(s, x, u) + (1,)),
        g_xx=lambda s, x, u: _full(q, s, x, u, (1, 1)),
        h=lambda x: 0.5 * h0 * x[..., 0] ** 2,
        h_x=lambda x: h0 * x,
        h_xx=lambda x: np.broadcast_to(np.asarray(h0, float), x.shape[:-1] + (1, 1)),
    )


def _affine_scalar(c0, cx, cu, cxu):
    """Factor ``c0 + cx x + cu u + cxu x u`` for scalar state and control."""
    f = lambda s, x, u: (c0 + cx * x[..., 0] + cu * u[..., 0] + cxu * x[..., 0] * u[..., 0])[..., None]
    fx = lambda s, x, u: np.broadcast_to(cx + cxu * u[..., 0], _lead(s, x, u))[..., None, None]
    fxx = lambda s, x, u: _full(0.0, s, x, u, (1, 1, 1))
    return f, fx, fxx


def _constant_phi(x0, n=1):
    x0 = np.broadcast_to(np.asarray(x0, float), (n,)).copy()
    return lambda t: x0


_DEFAULTS = {
    "linear_scalar": dict(
        T=1.0, x0=1.0, a=0.5, kernel_decay=1.0, sigma_decay=None, b_u=1.0,
        s0=0.3, s_x=0.2, s_u=0.5, s_xu=0.3, q=1.0, r=0.5, h0=1.0,
    ),
    "control_free_diffusion": dict(
        T=1.0, x0=0.5, a=0.8, b_u=1.0, s0=0.3, s_x=0.2, q=1.0, r=0.5, h0=1.0,
    ),
    "lq_control": dict(
        T=1.0, x0=1.0, a=-0.5, b_u=1.0, s0=0.2, s_x=0.3, s_u=0.4, s_xu=0.0,
        q=1.0, r=1.0, h0=1.0, kernel_decay=0.0,
    ),
    "projection_cost": dict(T=1.0, x0=0.0, c=0.3, s0=0.5),
    "two_player_decoupled": dict(
        T=1.0, x0=1.0, a1=-0.3, a2=0.2, s0=0.2, s_u=0.3, q=1.0, r=1.0, h0=1.0,
    ),
    "zero_sum_bilinear": dict(T=1.0, x0=0.0, a=1.0, c=1.0, rho=0.5, lam=0.5, s0=0.3),
}

_PROBES = {
    "linear_scalar": np.linspace(-1.0, 1.0, 9),
    "control_free_diffusion": np.linspace(-1.0, 1.0, 9),
    "lq_control": np.linspace(-2.0, 2.0, 17),
    "projection_cost": np.linspace(-1.0, 1.0, 21),
}


def registry_names() -> tuple[str, ...]:
    return tuple(_DEFAULTS)


def registry_get(name: str, params: dict | None = None) -> Problem:
    """Build a registry problem, overriding defaults with ``params``."""
    if name not in _DEFAULTS:
        raise KeyError(f"unknown problem {name!r}; known: {', '.join(_DEFAULTS)}")
    p = dict(_DEFAULTS[name])
    for key, val in (params or {}).items():
        if key not in p:
            raise ValueError(f"invalid parameter {key!r} for problem {name!r}")
        if val is not None and not np.isfinite(float(val)):
            raise ValueError(f"parameter {key!r} must be finite")
        p[key] = None if val is None else float(val)
    if p["T"] <= 0:
        raise ValueError("parameter 'T' must be positive")
    build = globals()[f"_build_{name}"]
    prob = build(p)
    probes = _PROBES.get(name)
    if probes is not None and not prob.probes:
        prob = replace(prob, probes=tuple(np.array([v]) for v in probes))
    return replace(prob, params=p)


def _build_linear_scalar(p) -> Problem:
    kappa = p["kernel_decay"]
    if kappa < 0:
        raise ValueError("parameter 'kernel_decay' must be >= 0")
    kappa_s = kappa if p["sigma_decay"] is None else p["sigma_decay"]
    beta = _affine_scalar(0.0, p["a"], p["b_u"], 0.0)
    gamma = _affine_scalar(p["s0"], p["s_x"], p["s_u"], p["s_xu"])
    return Problem(
        "linear_scalar", 1, 1, p["T"], _constant_phi(p["x0"]), ExpKernel(kappa), ExpKernel(kappa_s),
        *beta, *gamma, _scalar_quadratic_cost(p["q"], p["r"], p["h0"]),
    )


def _build_control_free_diffusion(p) -> Problem:
    a, bu = p["a"], p["b_u"]
    beta = (
        lambda s, x, u: (a * np.sin(x[..., 0]) + bu * u[..., 0])[..., None],
        lambda s, x, u: np.broadcast_to(a * np.cos(x[..., 0]), _lead(s, x, u))[..., None, None],
        lambda s, x, u: np.broadcast_to(-a * np.sin(x[..., 0]), _lead(s, x, u))[..., None, None, None],
    )
    gamma = _affine_scalar(p["s0"], p["s_x"], 0.0, 0.0)
    return Problem(
        "control_free_diffusion", 1, 1, p["T"], _constant_phi(p["x0"]), ExpKernel(0.0), ExpKernel(0.0),
        *beta, *gamma, _scalar_quadratic_cost(p["q"], p["r"], p["h0"]),
    )


def _build_lq_control(p) -> Problem:
    if p["kernel_decay"] < 0:
        raise ValueError("parameter 'kernel_decay' must be >= 0")
    beta = _affine_scalar(0.0, p["a"], p["b_u"], 0.0)
    gamma = _affine_scalar(p["s0"], p["s_x"], p["s_u"], p["s_xu"])
    k = ExpKernel(p["kernel_decay"])
    return Problem(
        "lq_control", 1, 1, p["T"], _constant_phi(p["x0"]), k, k,
        *beta, *gamma, _scalar_quadratic_cost(p["q"], p["r"], p["h0"]),
    )


def _build_projection_cost(p) -> Problem:
    c = p["c"]
    cost = CostFunctions(
        g=lambda s, x, u: np.broadcast_to((u[..., 0] - c) ** 2, _lead(s, x, u)),
        g_x=lambda s, x, u: _full(0.0, s, x, u, (1,)),
        g_xx=lambda s, x, u: _full(0.0, s, x, u, (1, 1)),
        h=lambda x: np.zeros(x.shape[:-1]),
        h_x=lambda x: np.zeros(x.shape),
        h_xx=lambda x: np.zeros(x.shape[:-1] + (1, 1)),
    )
    zero = _affine_scalar(0.0, 0.0, 0.0, 0.0)
    gamma = _affine_scalar(p["s0"], 0.0, 0.0, 0.0)
    return Problem(
        "projection_cost", 1, 1, p["T"], _constant_phi(p["x0"]), ExpKernel(0.0), ExpKernel(0.0),
        *zero, *gamma, cost,
    )


def _build_two_player_decoupled(p) -> Problem:
    a = np.array([p["a1"], p["a2"]])
    s0, su = p["s0"], p["s_u"]
    q, r, h0 = p["q"], p["r"], p["h0"]

    def player(l):
        e = np.zeros(2)
        e[l] = 1.0
        E = np.outer(e, e)
        return CostFunctions(
            g=lambda s, x, u: 0.5 * q * x[..., l] ** 2 + 0.5 * r * u[..., l] ** 2,
            g_x=lambda s, x, u: np.broadcast_to(q * x * e, _lead(s, x, u) + (2,)),
            g_xx=lambda s, x, u: _full(q * E, s, x, u, (2, 2)),
            h=lambda x: 0.5 * h0 * x[..., l] ** 2,
            h_x=lambda x: h0 * x * e,
            h_xx=lambda x: np.broadcast_to(h0 * E, x.shape[:-1] + (2, 2)),
        )

    players = (player(0), player(1))
    return Problem(
        "two_player_decoupled", 2, 2, p["T"], _constant_phi(p["x0"], 2), ExpKernel(0.0), ExpKernel(0.0),
        beta=lambda s, x, u: a * x + u,
        beta_x=lambda s, x, u: _full(np.diag(a), s, x, u, (2, 2)),
        beta_xx=lambda s, x, u: _full(0.0, s, x, u, (2, 2, 2)),
        gamma=lambda s, x, u: s0 + su * u + 0.0 * x,
        gamma_x=lambda s, x, u: _full(0.0, s, x, u, (2, 2)),
        gamma_xx=lambda s, x, u: _full(0.0, s, x, u, (2, 2, 2)),
        cost=players[0],
        probes=tuple(np.array([v]) for v in np.linspace(-1.0, 1.0, 21)),
        players=players,
        slots=((0,), (1,)),
    )


def _build_zero_sum_bilinear(p) -> Problem:
    a, c, rho, lam = p["a"], p["c"], p["rho"], p["lam"]

    def player(sign):
        return CostFunctions(
            g=lambda s, x, u: sign * np.broadcast_to(
                0.5 * a * u[..., 0] ** 2 - 0.5 * c * u[..., 1] ** 2 + rho * u[..., 0] * u[..., 1], _lead(s, x, u)
            ),
            g_x=lambda s, x, u: _full(0.0, s, x, u, (1,)),
            g_xx=lambda s, x, u: _full(0.0, s, x, u, (1, 1)),
            h=lambda x: sign * lam * x[..., 0],
            h_x=lambda x: np.broadcast_to(sign * lam, x.shape),
            h_xx=lambda x: np.zeros(x.shape[:-1] + (1, 1)),
        )

    players = (player(1.0), player(-1.0))
    s0 = p["s0"]
    return Problem(
        "zero_sum_bilinear", 1, 2, p["T"], _constant_phi(p["x0"]), ExpKernel(0.0), ExpKernel(0.0),
        beta=lambda s, x, u: (u[..., 0] - u[..., 1] + 0.0 * x[..., 0])[..., None],
        beta_x=lambda s, x, u: _full(0.0, s, x, u, (1, 1)),
        beta_xx=lambda s, x, u: _full(0.0, s, x, u, (1, 1, 1)),
        gamma=lambda s, x, u: _full(s0, s, x, u, (1,)),
        gamma_x=lambda s, x, u: _full(0.0, s, x, u, (1, 1)),
        gamma_xx=lambda s, x, u: _full(0.0, s, x, u, (1, 1, 1)),
        cost=players[0],
        probes=tuple(np.array([v]) for v in np.round(np.linspace(-1.0, 1.0, 21), 10)),
        players=players,
        slots=((0,), (1,)),
    )


# ------------------------------------------------------- H1/H2 validation


@dataclass
class ValidationReport:
    max_rel_error: dict
    max_abs: dict
    tolerance: float
    failures: list

    @property
    def ok(self) -> bool:
        return not self.failures


def _fd_jacobian(f, x, eps):
    """Central differences of ``f`` w.r.t. the last axis of ``x``."""
    cols = []
    for j in range(x.shape[-1]):
        dx = np.zeros_like(x)
        dx[..., j] = eps
        cols.append((np.asarray(f(x + dx)) - np.asarray(f(x - dx))) / (2 * eps))
    return np.stack(cols, axis=-1)


def validate_h1_h2(problem: Problem, grid: TimeGrid, probe_count: int = 64, seed: int = 0,
                   step: float = 1e-5, tolerance: float = 1e-6) -> ValidationReport:
    """Compare coded derivatives with central finite differences.

    Second derivatives are differenced from the coded first derivatives.
    """
    if probe_count < 1:
        raise ValueError("probe_count must be >= 1")
    rng = np.random.default_rng(seed)
    n, m = problem.n, problem.m
    tt = rng.uniform(0, grid.T, probe_count)
    ss = tt * rng.uniform(0, 1, probe_count)
    xs = rng.normal(0, 1, (probe_count, n))
    if problem.probes:
        pool = np.stack([np.broadcast_to(np.asarray(v, float), (m,)) for v in problem.probes])
        us = pool[rng.integers(0, len(pool), probe_count)]
    else:
        us = rng.normal(0, 1, (probe_count, m))

    checks = {
        "b_x": (problem.b_x(tt, ss, xs, us), _fd_jacobian(lambda x: problem.b(tt, ss, x, us), xs, step)),
        "sigma_x": (problem.sigma_x(tt, ss, xs, us), _fd_jacobian(lambda x: problem.sigma(tt, ss, x, us), xs, step)),
        "b_xx": (problem.b_xx(tt, ss, xs, us), _fd_jacobian(lambda x: problem.b_x(tt, ss, x, us), xs, step)),
        "sigma_xx": (problem.sigma_xx(tt, ss, xs, us),
                     _fd_jacobian(lambda x: problem.sigma_x(tt, ss, x, us), xs, step)),
        "g_x": (problem.g_x(ss, xs, us), _fd_jacobian(lambda x: problem.g(ss, x, us), xs, step)),
        "g_xx": (problem.g_xx(ss, xs, us), _fd_jacobian(lambda x: problem.g_x(ss, x, us), xs, step)),
        "h_x": (problem.h_x(xs), _fd_jacobian(problem.h, xs, step)),
        "h_xx": (problem.h_xx(xs), _fd_jacobian(problem.h_x, xs, step)),
    }
    rel, mx, failures = {}, {}, []
    for key, (coded, fd) in checks.items():
        coded = np.asarray(coded, float)
        err = np.abs(coded - fd) / np.maximum(1.0, np.abs(fd))
        rel[key] = float(err.max(initial=0.0))
        mx[key] = float(np.abs(coded).max(initial=0.0))
        if not rel[key] <= tolerance:
            failures.append(key)
    for key in ("b_xx", "sigma_xx"):
        H = np.asarray(checks[key][0])
        if np.max(np.abs(H - np.swapaxes(H, -1, -2)), initial=0.0) > 1e-12:
            failures.append(f"{key}_symmetry")
    for key in ("g_xx", "h_xx"):
        H = np.asarray(checks[key][0])
        if np.max(np.abs(H - np.swapaxes(H, -1, -2)), initial=0.0) > 1e-12:
            failures.append(f"{key}_symmetry")
    return ValidationReport(rel, mx, tolerance, failures)


# ------------------------------------------------------------ freezing


@dataclass(frozen=True)
class FrozenCoefficients:
    """Coefficient derivatives along a reference pair, plus spike deltas.

    Local arrays are indexed ``[path, k]`` for ``k < N`` and hold the
    factor part of the separable coefficients; the two-parameter values are
    ``b_x(t_j, t_k) = Kb[j, k] * beta_x[:, k]`` and likewise for sigma.
    """

    grid: TimeGrid
    Kb: Array
    Ks: Array
    kb_decay: float
    ks_decay: float
    beta_x: Array
    gamma_x: Array
    beta_xx: Array
    gamma_xx: Array
    g_x: Array
    g_xx: Array
    h_x: Array
    h_xx: Array
    d_beta: Array
    d_gamma: Array
    d_beta_x: Array
    d_gamma_x: Array
    d_g: Array
    probe_u: Array

    @property
    def n(self) -> int:
        return self.h_x.shape[-1]

    @property
    def M(self) -> int:
        return self.h_x.shape[0]

    def _dense(self, K, local):
        # (M, N+1, N, ...) with zeros on k >= j
        N = self.grid.N
        tail = local.shape[2:]
        Kx = K[:, :N].reshape((1, N + 1, N) + (1,) * len(tail))
        return Kx * np.asarray(local)[:, None]

    def b_x_dense(self):
        return self._dense(self.Kb, self.beta_x)

    def sigma_x_dense(self):
        return self._dense(self.Ks, self.gamma_x)

    def b_xx_dense(self):
        return self._dense(self.Kb, self.beta_xx)

    def sigma_xx_dense(self):
        return self._dense(self.Ks, self.gamma_xx)

    def delta_b_dense(self):
        return self._dense(self.Kb, self.d_beta)

    def delta_sigma_dense(self):
        return self._dense(self.Ks, self.d_gamma)

    def with_costs(self, h_x, h_xx, g_x, g_xx, d_g) -> "FrozenCoefficients":
        return replace(self, h_x=h_x, h_xx=h_xx, g_x=g_x, g_xx=g_xx, d_g=d_g)


def freeze(problem: Problem, grid: TimeGrid, state: Array, control: ControlProcess, probe_u) -> FrozenCoefficients:
    """Evaluate all derivatives along ``(X̄, ū)`` and the deltas for ``probe_u``."""
    X = np.asarray(getattr(state, "values", state), float)
    M, N = X.shape[0], grid.N
    if X.shape[1:] != (N + 1, problem.n):
        raise ValueError(f"state shape {X.shape} does not match grid N={N} and n={problem.n}")
    if control.N != N or control.m != problem.m:
        raise ValueError(f"control shape {control.values.shape} does not match grid N={N} and m={problem.m}")
    probe = np.broadcast_to(np.asarray(probe_u, float), (problem.m,))
    s = grid.nodes[:N][None, :]
    x = X[:, :N]
    u = control.values
    up = np.broadcast_to(probe, u.shape)

    def full(a, tail):
        return np.broadcast_to(np.asarray(a, float), (M, N) + tail)

    n = problem.n
    return FrozenCoefficients(
        grid=grid,
        Kb=problem.kb.matrix(grid),
        Ks=problem.ks.matrix(grid),
        kb_decay=problem.kb.decay,
        ks_decay=problem.ks.decay,
        beta_x=full(problem.beta_x(s, x, u), (n, n)),
        gamma_x=full(problem.gamma_x(s, x, u), (n, n)),
        beta_xx=full(problem.beta_xx(s, x, u), (n, n, n)),
        gamma_xx=full(problem.gamma_xx(s, x, u), (n, n, n)),
        g_x=full(problem.g_x(s, x, u), (n,)),
        g_xx=full(problem.g_xx(s, x, u), (n, n)),
        h_x=np.broadcast_to(np.asarray(problem.h_x(X[:, N]), float), (M, n)),
        h_xx=np.broadcast_to(np.asarray(problem.h_xx(X[:, N]), float), (M, n, n)),
        d_beta=full(problem.beta(s, x, up) - problem.beta(s, x, u), (n,)),
        d_gamma=full(problem.gamma(s, x, up) - problem.gamma(s, x, u), (n,)),
        d_beta_x=full(problem.beta_x(s, x, up) - problem.beta_x(s, x, u), (n, n)),
        d_gamma_x=full(problem.gamma_x(s, x, up) - problem.gamma_x(s, x, u), (n, n)),
        d_g=full(problem.g(s, x, up) - problem.g(s, x, u), ()),
        probe_u=probe.copy(),
    )


def freeze_player(problem: Problem, frozen: FrozenCoefficients, state: Array, control: ControlProcess,
                  l: int) -> FrozenCoefficients:
    """Swap in player ``l``'s cost derivatives, keeping the dynamics."""
    pl = problem.for_player(l)
    X = np.asarray(getattr(state, "values", state), float)
    grid = frozen.grid
    M, N, n = X.shape[0], grid.N, problem.n
    s = grid.nodes[:N][None, :]
    x, u = X[:, :N], control.values
    up = np.broadcast_to(frozen.probe_u, u.shape)
    return frozen.with_costs(
        h_x=np.broadcast_to(np.asarray(pl.h_x(X[:, N]), float), (M, n)),
        h_xx=np.broadcast_to(np.asarray(pl.h_xx(X[:, N]), float), (M, n, n)),
        g_x=np.broadcast_to(np.asarray(pl.g_x(s, x, u), float), (M, N, n)),
        g_xx=np.broadcast_to(np.asarray(pl.g_xx(s, x, u), float), (M, N, n, n)),
        d_g=np.broadcast_to(np.asarray(pl.g(s, x, up) - pl.g(s, x, u), float), (M, N)),
    )
