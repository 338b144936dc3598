"""Spike-variation experiments: cost expansion and convergence orders."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adjoint1 import hessian_H, solve_first_adjoint
from .adjoint2 import quadratic_form_adjoint, solve_second_adjoint
from .forward import SpikeWindow, path_costs, solve_fsvie, solve_x1, solve_x2
from .martingale import RegressionConfig, make_backend
from .problem import ControlProcess, FrozenCoefficients, Problem, freeze
from .timebase import NoiseEnsemble, TimeGrid

Array = np.ndarray

# quantities whose log-log slope against eps is reported
SLOPE_KEYS = ("dev0", "dev1", "x2", "dev2", "residual", "residual_pathwise", "jdiff")


@dataclass(frozen=True)
class SpikeSpec:
    tau: int
    widths: tuple
    probe: tuple

    def check(self, N: int):
        if not self.widths:
            raise ValueError("spike sweep needs at least one width")
        if self.tau < 0 or self.tau + max(self.widths) > N:
            raise ValueError(f"spike windows starting at {self.tau} with widths up to {max(self.widths)} exceed N={N}")
        if min(self.widths) < 0:
            raise ValueError("spike widths must be non-negative")


@dataclass
class SlopeFit:
    slope: float
    intercept: float
    r2: float
    ci: tuple | None = None
    exact_zero: bool = False

    def as_dict(self):
        fin = lambda v: v if np.isfinite(v) else None
        return {"slope": fin(self.slope), "intercept": fin(self.intercept), "r2": fin(self.r2),
                "ci": None if self.ci is None else list(self.ci), "exact_zero": self.exact_zero}


@dataclass
class SpikeReport:
    problem: str
    tau: int
    probe: list
    mode: str
    rows: list = field(default_factory=list)
    slopes: dict = field(default_factory=dict)

    def column(self, key):
        return np.array([row[key] for row in self.rows], float)


def make_spike_control(ubar: ControlProcess, tau: int, width: int, u) -> ControlProcess:
    """``u`` on ``[tau, tau + width)``, ``ubar`` elsewhere."""
    N = ubar.N
    SpikeWindow(tau, width).check(N, allow_empty=True)
    vals = np.array(ubar.values, float)
    u = np.broadcast_to(np.asarray(u, float), (ubar.m,))
    vals[:, tau:tau + width] = u
    return ControlProcess(vals)


def direct_quadratic_form(frozen: FrozenCoefficients, Hxx: Array, x1, per_path: bool = False):
    """``E[X1(T)^T h_xx X1(T) + sum_k X1_k^T H_xx(k) X1_k dt]``."""
    X = np.asarray(getattr(x1, "values", x1))
    N, dt = frozen.grid.N, frozen.grid.dt
    vals = (np.einsum("mi,mij,mj->m", X[:, N], frozen.h_xx, X[:, N])
            + np.einsum("mki,mkij,mkj->m", X[:, :N], Hxx, X[:, :N]) * dt)
    return vals if per_path else float(np.mean(vals))


def fit_slope(eps, values, zero_floor: float = 1e-28) -> SlopeFit:
    """Least squares of ``log|values|`` on ``log eps``.

    A column at or below ``zero_floor`` everywhere is reported as an exact
    zero (infinite slope). Isolated zeros are dropped from the fit.
    """
    eps = np.asarray(eps, float)
    v = np.abs(np.asarray(values, float))
    if not np.all(np.isfinite(v)):
        return SlopeFit(float("nan"), float("nan"), float("nan"))
    if np.all(v <= zero_floor):
        return SlopeFit(float("inf"), float("nan"), 1.0, exact_zero=True)
    keep = v > zero_floor
    eps, v = eps[keep], v[keep]
    if len(eps) < 2:
        return SlopeFit(float("nan"), float("nan"), float("nan"))
    x, y = np.log(eps), np.log(v)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum(resid**2) / ss if ss > 0 else 1.0
    return SlopeFit(float(slope), float(intercept), float(r2))


def _pathwise_remainder(frozen, first, jd, xi, X1, tau, w, dt):
    """Per-path cost change minus its first- and second-order Taylor terms.

    With ``xi = X1 + X2`` this is ``jd - [h_x xi(T) + sum g_x xi dt + sum_W dg dt]
    - 1/2 [X1 h_xx X1 (T) + sum X1 g_xx X1 dt] + sum_W q dsigma_x X1 dt``. By
    discrete duality its mean equals the mean of the literal residual
    ``jd - dH - e_direct/2`` (exactly on the tree), while the path-by-path
    cancellation removes most of the Monte Carlo noise.
    """
    N = frozen.grid.N
    W = slice(tau, tau + w)
    lin = (np.einsum("mi,mi->m", frozen.h_x, xi[:, N])
           + np.einsum("mki,mki->m", frozen.g_x, xi[:, :N]) * dt
           + frozen.d_g[:, W].sum(axis=1) * dt)
    quad = (np.einsum("mi,mij,mj->m", X1[:, N], frozen.h_xx, X1[:, N])
            + np.einsum("mki,mkij,mkj->m", X1[:, :N], frozen.g_xx, X1[:, :N]) * dt)
    cross = np.einsum("mki,mkij,mkj->m", first.q[:, W], frozen.d_gamma_x[:, W], X1[:, W]) * dt
    return jd - lin - 0.5 * quad + cross


def _block_sums(per_path: Array, block: int) -> Array:
    M = per_path.shape[0]
    nb = M // block
    return per_path[: nb * block].reshape((nb, block) + per_path.shape[1:]).sum(axis=1)


def expansion_report(problem: Problem, ubar: ControlProcess, spec: SpikeSpec, grid: TimeGrid,
                     noise: NoiseEnsemble, regression: RegressionConfig | None = None,
                     adjoint_form: bool | None = None, bootstrap: int = 200, block: int = 256,
                     seed: int = 0, method: str = "auto") -> SpikeReport:
    """Run the spike sweep and fit convergence orders.

    Columns per width: ``jdiff`` (cost change), ``dH`` (window sum of the
    expected Hamiltonian increment), ``e_direct`` and ``e_adjoint`` (the two
    forms of the second-order term), ``residual`` (``jdiff - dH - e_direct/2``)
    and the sup-in-time mean-square deviations ``dev0`` (``X^eps - X``),
    ``dev1`` (minus ``X1``), ``x2`` and ``dev2`` (minus ``X1 + X2``).
    """
    N, dt = grid.N, grid.dt
    spec.check(N)
    tree = noise.mode == "tree"
    if adjoint_form is None:
        adjoint_form = tree and N <= 10
    Xbar = solve_fsvie(problem, grid, noise, ubar).values
    backend = make_backend(noise, Xbar, regression)
    frozen = freeze(problem, grid, Xbar, ubar, np.asarray(spec.probe, float))
    first = solve_first_adjoint(frozen, backend, method=method)
    Hxx = hessian_H(frozen, first)
    second = solve_second_adjoint(frozen, first, backend) if adjoint_form else None
    cost_bar = path_costs(problem, grid, Xbar, ubar)
    # per-path Hamiltonian increment at every step for the fixed probe
    dH_path = (frozen.d_g + np.einsum("mki,mki->mk", first.p, frozen.d_beta)
               + np.einsum("mki,mki->mk", first.q, frozen.d_gamma))

    report = SpikeReport(problem.name, spec.tau, list(np.atleast_1d(spec.probe).astype(float)), noise.mode)
    per_path_store = []
    for w in spec.widths:
        try:
            ueps = make_spike_control(ubar, spec.tau, w, spec.probe)
            Xeps = solve_fsvie(problem, grid, noise, ueps).values
            win = SpikeWindow(spec.tau, w)
            x1 = solve_x1(frozen, grid, noise, win)
            x2 = solve_x2(frozen, grid, noise, win, x1)
        except Exception as exc:  # attach the offending width
            raise type(exc)(f"{exc} (spike width {w})") from exc
        X1, X2 = x1.values, x2.values
        D = Xeps - Xbar
        sq = lambda A: np.sum(A**2, axis=-1)
        dev = {"dev0": sq(D), "dev1": sq(D - X1), "x2": sq(X2), "dev2": sq(D - X1 - X2)}
        jd = path_costs(problem, grid, Xeps, ueps) - cost_bar
        dh = dH_path[:, spec.tau:spec.tau + w].sum(axis=1) * dt
        ed = direct_quadratic_form(frozen, Hxx, x1, per_path=True)
        res = jd - dh - 0.5 * ed
        res_path = _pathwise_remainder(frozen, first, jd, X1 + X2, X1, spec.tau, w, dt)
        row = {"width": int(w), "eps": w * dt}
        for key, arr in dev.items():
            row[key] = float(np.max(arr.mean(axis=0)))
        row.update(jdiff=float(jd.mean()), dH=float(dh.mean()), e_direct=float(ed.mean()),
                   residual=float(res.mean()), residual_pathwise=float(res_path.mean()))
        if second is not None:
            row["e_adjoint"] = quadratic_form_adjoint(second, frozen, win)
            row["e_gap"] = row["e_direct"] - row["e_adjoint"]
        if not tree:
            sd = lambda a: float(np.std(a, ddof=1) / np.sqrt(a.size))
            row.update(jdiff_se=sd(jd), residual_se=sd(res), residual_pathwise_se=sd(res_path),
                       dH_se=sd(dh), e_direct_se=sd(ed))
            per_path_store.append({**{k: _block_sums(v, block) for k, v in dev.items()},
                                   "residual": _block_sums(res, block), "jdiff": _block_sums(jd, block),
                                   "residual_pathwise": _block_sums(res_path, block)})
        report.rows.append(row)
        del Xeps, x1, x2, X1, X2, D, dev

    eps = report.column("eps")
    for key in SLOPE_KEYS:
        if key in report.rows[0]:
            report.slopes[key] = fit_slope(eps, report.column(key))
    if not tree and bootstrap > 0 and per_path_store:
        _bootstrap_slopes(report, per_path_store, eps, bootstrap, block, seed)
    return report


def _bootstrap_slopes(report, store, eps, resamples, block, seed):
    """Percentile intervals from resampling path blocks jointly across widths."""
    rng = np.random.default_rng(seed)
    nb = store[0]["residual"].shape[0]
    draws = {key: [] for key in store[0]}
    for _ in range(resamples):
        idx = rng.integers(0, nb, nb)
        for key in draws:
            vals = []
            for st in store:
                agg = st[key][idx].sum(axis=0) / (nb * block)
                vals.append(np.max(agg) if np.ndim(agg) else agg)
            draws[key].append(fit_slope(eps, vals).slope)
    for key, sl in draws.items():
        sl = np.asarray(sl)
        sl = sl[np.isfinite(sl)]
        if key in report.slopes and sl.size:
            report.slopes[key].ci = (float(np.percentile(sl, 2.5)), float(np.percentile(sl, 97.5)))
