"""Left-point Euler solvers for the state, variational and auxiliary equations."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalBlowup
from .problem import ControlProcess, FrozenCoefficients, Problem
from .timebase import NoiseEnsemble, TimeGrid

Array = np.ndarray


@dataclass
class StateEnsemble:
    values: Array = field(repr=False)  # (M, N+1, n)
    provenance: dict = field(default_factory=dict)

    @property
    def terminal(self) -> Array:
        return self.values[:, -1]


@dataclass
class TwoParamEnsemble:
    """``values[:, j, r] = F(t_j, t_r)`` for ``r <= j``; entries with ``r > j`` are zero."""

    values: Array = field(repr=False)  # (M, N+1, N+1, n)


@dataclass(frozen=True)
class SpikeWindow:
    """Half-open index range ``[tau, tau + width)``; ``eps = width * dt``."""

    tau: int
    width: int

    def indicator(self, N: int) -> Array:
        ind = np.zeros(N)
        ind[self.tau:self.tau + self.width] = 1.0
        return ind

    def check(self, N: int, allow_empty: bool = False):
        if self.width < 0 or (self.width == 0 and not allow_empty):
            raise ValueError(f"spike window width must be positive, got {self.width}")
        if self.tau < 0 or self.tau + self.width > N:
            raise ValueError(f"spike window [{self.tau}, {self.tau + self.width}) outside 0..{N}")


def _matvec(A, x):
    return np.einsum("...ij,...j->...i", A, x)


def _quad(H, x):
    # component i of the vector (x^T H_i x)
    return np.einsum("...ijl,...j,...l->...i", H, x, x)


def _check_finite(what, arr, step):
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(arr.reshape(arr.shape[0], -1)))[0, 0]
        raise NumericalBlowup(what, int(bad), step)


class _KernelSum:
    """Running ``S(j) = sum_{k<j} K(t_j, t_k) term_k`` for an exponential kernel."""

    def __init__(self, decay: float, dt: float, shape):
        self.factor = float(np.exp(-decay * dt))
        self.value = np.zeros(shape)

    def push(self, term):
        self.value = self.factor * (self.value + term)


def _kernels(problem_or_frozen, grid: TimeGrid):
    if isinstance(problem_or_frozen, FrozenCoefficients):
        return problem_or_frozen.kb_decay, problem_or_frozen.ks_decay
    return problem_or_frozen.kb.decay, problem_or_frozen.ks.decay


def solve_fsvie(problem: Problem, grid: TimeGrid, noise: NoiseEnsemble, control: ControlProcess) -> StateEnsemble:
    """``X(t_j) = phi(t_j) + sum_{k<j} b(t_j,t_k,X_k,u_k) dt + sigma(t_j,t_k,X_k,u_k) dW_{k+1}``."""
    N, M, n, dt = grid.N, noise.M, problem.n, grid.dt
    if noise.grid != grid:
        raise ValueError("noise ensemble was generated on a different grid")
    if control.N != N or control.m != problem.m:
        raise ValueError("control dimensions do not match the problem/grid")
    X = np.empty((M, N + 1, n))
    t = grid.nodes
    X[:, 0] = problem.phi(0.0)
    Sb = _KernelSum(problem.kb.decay, dt, (M, n))
    Ss = _KernelSum(problem.ks.decay, dt, (M, n))
    u = control.values
    for k in range(N):
        uk = u[:, k] if u.shape[0] == M else np.broadcast_to(u[0, k], (M, problem.m))
        Sb.push(problem.beta(t[k], X[:, k], uk) * dt)
        Ss.push(problem.gamma(t[k], X[:, k], uk) * noise.dW[:, k, None])
        X[:, k + 1] = problem.phi(t[k + 1]) + Sb.value + Ss.value
        _check_finite("solve_fsvie", X[:, k + 1], k + 1)
    return StateEnsemble(X, {"problem": problem.name, "seed": noise.seed, "mode": noise.mode})


def linear_volterra(frozen: FrozenCoefficients, noise: NoiseEnsemble, drift_forcing, diffusion_forcing,
                    what: str = "linear_volterra") -> Array:
    """Solve ``xi(t_j) = sum_{k<j} b_x(t_j,t_k)xi_k dt + sigma_x(t_j,t_k)xi_k dW + forcing``.

    ``drift_forcing(k, xi_k)`` and ``diffusion_forcing(k, xi_k)`` return the
    extra drift and diffusion integrands at step ``k`` (or ``None``).
    """
    grid = frozen.grid
    N, dt, M, n = grid.N, grid.dt, noise.M, frozen.n
    db, ds = _kernels(frozen, grid)
    xi = np.zeros((M, N + 1, n))
    Sb = _KernelSum(db, dt, (M, n))
    Ss = _KernelSum(ds, dt, (M, n))
    for k in range(N):
        x = xi[:, k]
        fb = _matvec(frozen.beta_x[:, k], x)
        fs = _matvec(frozen.gamma_x[:, k], x)
        extra_b = drift_forcing(k, x)
        extra_s = diffusion_forcing(k, x)
        if extra_b is not None:
            fb = fb + extra_b
        if extra_s is not None:
            fs = fs + extra_s
        Sb.push(fb * dt)
        Ss.push(fs * noise.dW[:, k, None])
        xi[:, k + 1] = Sb.value + Ss.value
        _check_finite(what, xi[:, k + 1], k + 1)
    return xi


def solve_x1(frozen: FrozenCoefficients, grid: TimeGrid, noise: NoiseEnsemble, window: SpikeWindow) -> StateEnsemble:
    """First variational equation, forced by ``delta sigma`` on the window."""
    window.check(grid.N)
    ind = window.indicator(grid.N)

    def diff(k, x):
        return frozen.d_gamma[:, k] if ind[k] else None

    xi = linear_volterra(frozen, noise, lambda k, x: None, diff, "solve_x1")
    return StateEnsemble(xi, {"equation": "x1", "tau": window.tau, "width": window.width})


def solve_x2(frozen: FrozenCoefficients, grid: TimeGrid, noise: NoiseEnsemble, window: SpikeWindow,
             x1: StateEnsemble) -> StateEnsemble:
    """Second variational equation driven by ``X1``."""
    window.check(grid.N, allow_empty=True)
    ind = window.indicator(grid.N)
    X1 = x1.values

    def drift(k, x):
        f = 0.5 * _quad(frozen.beta_xx[:, k], X1[:, k])
        if ind[k]:
            f = f + frozen.d_beta[:, k]
        return f

    def diff(k, x):
        f = 0.5 * _quad(frozen.gamma_xx[:, k], X1[:, k])
        if ind[k]:
            f = f + _matvec(frozen.d_gamma_x[:, k], X1[:, k])
        return f

    xi = linear_volterra(frozen, noise, drift, diff, "solve_x2")
    return StateEnsemble(xi, {"equation": "x2", "tau": window.tau, "width": window.width})


def solve_aux_x1(frozen: FrozenCoefficients, grid: TimeGrid, noise: NoiseEnsemble, window: SpikeWindow,
                 x1: StateEnsemble) -> TwoParamEnsemble:
    """``F(t_j, t_r) = sum_{k<r} b_x(t_j,t_k) X1_k dt + [sigma_x(t_j,t_k) X1_k + d(t_j,t_k)] dW_{k+1}``."""
    window.check(grid.N)
    N, dt = grid.N, grid.dt
    X1 = x1.values[:, :N]
    ind = window.indicator(N)
    tb = _matvec(frozen.beta_x, X1) * dt
    ts = (_matvec(frozen.gamma_x, X1) + frozen.d_gamma * ind[None, :, None]) * noise.dW[:, :, None]
    contrib = (frozen.Kb[None, :, :N, None] * tb[:, None]
               + frozen.Ks[None, :, :N, None] * ts[:, None])  # (M, N+1, N, n)
    out = np.zeros(contrib.shape[:2] + (N + 1, contrib.shape[-1]))
    np.cumsum(contrib, axis=2, out=out[:, :, 1:])
    mask = np.tril(np.ones((N + 1, N + 1), bool))
    out *= mask[None, :, :, None]
    return TwoParamEnsemble(out)


def path_costs(problem: Problem, grid: TimeGrid, state: StateEnsemble | Array, control: ControlProcess) -> Array:
    """Per-path ``h(X(T)) + sum_{k<N} g(t_k, X_k, u_k) dt``."""
    X = np.asarray(getattr(state, "values", state))
    N = grid.N
    s = grid.nodes[:N][None, :]
    running = np.asarray(problem.g(s, X[:, :N], control.values), float)
    running = np.broadcast_to(running, (X.shape[0], N))
    return np.asarray(problem.h(X[:, N]), float) + running.sum(axis=1) * grid.dt


def cost_eval(problem: Problem, grid: TimeGrid, state: StateEnsemble | Array, control: ControlProcess,
              noise: NoiseEnsemble | None = None) -> tuple[float, float]:
    """Weighted path average of the cost and its Monte Carlo standard error."""
    c = path_costs(problem, grid, state, control)
    if not np.all(np.isfinite(c)):
        raise NumericalBlowup("cost_eval", int(np.argmax(~np.isfinite(c))), grid.N)
    J = float(np.mean(c))
    if noise is not None and noise.mode == "tree":
        return J, 0.0
    se = float(np.std(c, ddof=1) / np.sqrt(c.size)) if c.size > 1 else 0.0
    return J, se
