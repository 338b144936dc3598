"""Maximum-principle and game-equilibrium checkers, plus candidate finders."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.optimize

from .forward import cost_eval, solve_fsvie
from .hamiltonian import (
    HamiltonianContext,
    build_context,
    build_sde_reduction,
    classical_condition,
    delta_H,
    eval_H,
    first_order_bsde_residual,
    game_control,
    second_order_bsde_residual,
    second_order_term,
)
from .martingale import RegressionConfig
from .problem import ControlProcess, Problem
from .timebase import NoiseEnsemble, TimeGrid

Array = np.ndarray

TREE_TOL = 1e-6
MC_SIGMAS = 3.0


def _mean_se(vals: Array, exact: bool) -> tuple[float, float]:
    vals = np.asarray(vals, float)
    if exact or vals.size < 2:
        return float(np.mean(vals)), 0.0
    return float(np.mean(vals)), float(np.std(vals, ddof=1) / np.sqrt(vals.size))


def default_taus(N: int) -> list[int]:
    return sorted({max(N // 8, 0), N // 4, N // 2})


# ------------------------------------------------------------ single player


def mp_lhs(ctx: HamiltonianContext, tau: int, u, slot=None) -> tuple[float, float]:
    """Expected ``Delta H(tau)`` plus half the expected second-order block.

    ``slot`` restricts the probe to some control components (game checks);
    returns the value and its Monte Carlo standard error (0 on the tree).
    """
    if not 0 <= tau < ctx.grid.N:
        raise ValueError(f"tau index {tau} outside 0..{ctx.grid.N - 1}")
    full = game_control(ctx, tau, u, slot) if slot is not None else u
    vals = delta_H(ctx, tau, full)
    if ctx.second is not None:
        vals = vals + 0.5 * second_order_term(ctx, tau, full)
    return _mean_se(vals, ctx.backend.exact)


@dataclass
class MpScanResult:
    taus: list
    probes: list
    values: Array = field(repr=False)   # (len(taus), len(probes))
    errors: Array = field(repr=False)   # standard errors, same shape
    tol: float
    thresholds: Array = field(repr=False)
    player: int | None = None

    @property
    def minima(self) -> list[float]:
        return [float(v) for v in self.values.min(axis=1)]

    @property
    def argmin(self) -> list[list[float]]:
        return [list(map(float, self.probes[i])) for i in self.values.argmin(axis=1)]

    @property
    def violations(self) -> list[dict]:
        out = []
        for a, tau in enumerate(self.taus):
            for b, u in enumerate(self.probes):
                if self.values[a, b] < -self.thresholds[a, b]:
                    out.append({"tau": int(tau), "probe": list(map(float, u)), "value": float(self.values[a, b])})
        return out

    @property
    def passed(self) -> bool:
        return not self.violations

    @property
    def verdict(self) -> str:
        return "PASS" if self.passed else "FAIL"

    def as_dict(self) -> dict:
        return {
            "verdict": self.verdict, "player": self.player, "tol": self.tol,
            "taus": [int(t) for t in self.taus], "probes": [list(map(float, u)) for u in self.probes],
            "values": self.values.tolist(), "std_errors": self.errors.tolist(),
            "minima": self.minima, "argmin": self.argmin, "violations": self.violations,
        }


def _probe_list(problem: Problem, probes, width: int) -> list[Array]:
    if probes is None:
        probes = problem.probes
    if probes is None or len(probes) == 0:
        raise ValueError(f"problem {problem.name!r} has no probe list; pass probes explicitly")
    return [np.broadcast_to(np.atleast_1d(np.asarray(u, float)), (width,)).copy() for u in probes]


def scan_context(ctx: HamiltonianContext, taus, probes, tol: float | None = None, slot=None) -> MpScanResult:
    width = ctx.problem.m if slot is None else len(slot)
    probes = _probe_list(ctx.problem, probes, width)
    taus = list(taus)
    vals = np.empty((len(taus), len(probes)))
    errs = np.empty_like(vals)
    for a, tau in enumerate(taus):
        for b, u in enumerate(probes):
            vals[a, b], errs[a, b] = mp_lhs(ctx, tau, u, slot)
    exact = ctx.backend.exact
    if tol is None:
        tol = TREE_TOL if exact else 0.0
    thresholds = np.maximum(tol, (0.0 if exact else MC_SIGMAS) * errs)
    return MpScanResult(taus, probes, vals, errs, float(tol), thresholds, ctx.player)


def mp_scan(problem: Problem, ubar: ControlProcess, taus, probes, grid: TimeGrid, noise: NoiseEnsemble,
            tol: float | None = None, regression: RegressionConfig | None = None,
            exact_discrete: bool = True) -> MpScanResult:
    """Scan the maximum-condition left side over ``(tau, probe)``.

    PASS when every entry is at least ``-tol`` (tree default ``1e-6``) or,
    in Monte Carlo mode, at least minus three standard errors.
    """
    ctx = build_context(problem, grid, noise, ubar, regression=regression, exact_discrete=exact_discrete)
    return scan_context(ctx, taus, probes, tol)


# ------------------------------------------------------------------- games


@dataclass
class NashResult:
    players: list

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.players)

    @property
    def verdict(self) -> str:
        return "PASS" if self.passed else "FAIL"

    def as_dict(self) -> dict:
        return {"verdict": self.verdict, "players": [r.as_dict() for r in self.players]}


def nash_check(problem: Problem, ubar: ControlProcess, grid: TimeGrid, noise: NoiseEnsemble, taus,
               probes=None, tol: float | None = None, regression: RegressionConfig | None = None,
               exact_discrete: bool = True) -> NashResult:
    """Per-player maximum condition with the other players held at the candidate.

    ``probes`` is a list of per-player probe lists (defaults to the problem's
    probes). A problem without players is checked as a one-player game.
    """
    if not problem.players:
        return NashResult([mp_scan(problem, ubar, taus, probes, grid, noise, tol, regression, exact_discrete)])
    results = []
    for l, slot in enumerate(problem.slots):
        ctx = build_context(problem, grid, noise, ubar, player=l, regression=regression,
                            exact_discrete=exact_discrete)
        plist = None if probes is None else probes[l]
        results.append(scan_context(ctx, taus, plist, tol, slot))
    return NashResult(results)


@dataclass
class SaddleResult:
    taus: list
    reference: list      # H(tau, u1bar, u2bar) per tau
    upper: Array = field(repr=False)   # H(tau, u1bar, u2) over probes2
    lower: Array = field(repr=False)   # H(tau, u1, u2bar) over probes1
    probes1: list = field(default_factory=list)
    probes2: list = field(default_factory=list)
    tol: float = TREE_TOL
    slack: Array | None = field(default=None, repr=False)   # per-tau MC allowance

    def _margins(self):
        ref = np.asarray(self.reference)[:, None]
        return ref - self.upper, self.lower - ref

    @property
    def violations(self) -> list[dict]:
        left, right = self._margins()
        allow = self.tol if self.slack is None else np.maximum(self.tol, self.slack)[:, None]
        allow = np.broadcast_to(allow, (len(self.taus), 1))
        out = []
        for a, tau in enumerate(self.taus):
            for b, u in enumerate(self.probes2):
                if left[a, b] < -allow[a, 0]:
                    out.append({"tau": int(tau), "side": "player2", "probe": list(map(float, u)),
                                "margin": float(left[a, b])})
            for b, u in enumerate(self.probes1):
                if right[a, b] < -allow[a, 0]:
                    out.append({"tau": int(tau), "side": "player1", "probe": list(map(float, u)),
                                "margin": float(right[a, b])})
        return out

    @property
    def passed(self) -> bool:
        return not self.violations

    @property
    def verdict(self) -> str:
        return "PASS" if self.passed else "FAIL"

    def as_dict(self) -> dict:
        left, right = self._margins()
        return {"verdict": self.verdict, "tol": self.tol, "taus": [int(t) for t in self.taus],
                "reference": list(map(float, self.reference)), "upper": self.upper.tolist(),
                "lower": self.lower.tolist(), "min_margin_player2": left.min(axis=1).tolist(),
                "min_margin_player1": right.min(axis=1).tolist(), "violations": self.violations}


def game_H(ctx: HamiltonianContext, tau: int, u_full: Array) -> Array:
    """Per-path ``H + 1/2`` second-order block for a full control vector."""
    vals = eval_H(ctx, tau, u_full)
    if ctx.second is not None:
        vals = vals + 0.5 * second_order_term(ctx, tau, u_full)
    return vals


def saddle_check(problem: Problem, ubar: ControlProcess, grid: TimeGrid, noise: NoiseEnsemble, taus,
                 probes1=None, probes2=None, tol: float | None = None,
                 regression: RegressionConfig | None = None, exact_discrete: bool = True) -> SaddleResult:
    """Minimax condition ``H(u1bar, u2) <= H(u1bar, u2bar) <= H(u1, u2bar)``.

    Adjoints are built from the first player's cost; the first player
    minimizes and the second maximizes it.
    """
    if len(problem.slots) != 2:
        raise ValueError("saddle_check needs a two-player game")
    ctx = build_context(problem, grid, noise, ubar, player=0, regression=regression,
                        exact_discrete=exact_discrete)
    s1, s2 = problem.slots
    p1 = _probe_list(problem, probes1, len(s1))
    p2 = _probe_list(problem, probes2, len(s2))
    taus = list(taus)
    ref, upper, lower, slack = [], np.empty((len(taus), len(p2))), np.empty((len(taus), len(p1))), []
    exact = ctx.backend.exact
    for a, tau in enumerate(taus):
        base = game_H(ctx, tau, ctx.reference_u(tau))
        ref.append(float(np.mean(base)))
        worst_se = 0.0
        for b, u in enumerate(p2):
            vals = game_H(ctx, tau, game_control(ctx, tau, u, s2))
            upper[a, b] = np.mean(vals)
            worst_se = max(worst_se, _mean_se(vals - base, exact)[1])
        for b, u in enumerate(p1):
            vals = game_H(ctx, tau, game_control(ctx, tau, u, s1))
            lower[a, b] = np.mean(vals)
            worst_se = max(worst_se, _mean_se(vals - base, exact)[1])
        slack.append(MC_SIGMAS * worst_se)
    if tol is None:
        tol = TREE_TOL if exact else 0.0
    return SaddleResult(taus, ref, upper, lower, p1, p2, float(tol), None if exact else np.asarray(slack))


# ------------------------------------------------------------ SDE crosscheck


@dataclass
class SdeCrossCheck:
    taus: list
    probes: list
    volterra: Array = field(repr=False)
    classical: Array = field(repr=False)
    first_order_residual: float
    second_order_residual: float

    @property
    def max_discrepancy(self) -> float:
        return float(np.max(np.abs(self.volterra - self.classical), initial=0.0))

    def as_dict(self) -> dict:
        return {"taus": [int(t) for t in self.taus], "probes": [list(map(float, u)) for u in self.probes],
                "volterra": self.volterra.tolist(), "classical": self.classical.tolist(),
                "max_discrepancy": self.max_discrepancy,
                "first_order_bsde_residual": self.first_order_residual,
                "second_order_bsde_residual": self.second_order_residual}


def sde_crosscheck(problem: Problem, ubar: ControlProcess, grid: TimeGrid, noise: NoiseEnsemble, taus,
                   probes=None, regression: RegressionConfig | None = None,
                   exact_discrete: bool = True) -> SdeCrossCheck:
    """Compare the Volterra left side with the classical SDE maximum condition."""
    if not problem.t_independent:
        raise ValueError(f"problem {problem.name!r} has kernels depending on the outer time")
    ctx = build_context(problem, grid, noise, ubar, regression=regression, exact_discrete=exact_discrete)
    red = build_sde_reduction(ctx.first, ctx.second, ctx.frozen, ctx.backend)
    plist = _probe_list(problem, probes, problem.m)
    taus = list(taus)
    vol = np.empty((len(taus), len(plist)))
    cla = np.empty_like(vol)
    for a, tau in enumerate(taus):
        for b, u in enumerate(plist):
            vol[a, b] = mp_lhs(ctx, tau, u)[0]
            cla[a, b] = float(np.mean(classical_condition(ctx, red, tau, u)))
    return SdeCrossCheck(taus, plist, vol, cla, first_order_bsde_residual(red, ctx.first, noise),
                         second_order_bsde_residual(red, ctx.frozen, noise))


# -------------------------------------------------------- candidate finders


def _player_problem(problem: Problem, player: int | None) -> Problem:
    return problem if player is None else problem.for_player(player)


def control_gradient(problem: Problem, control: ControlProcess, grid: TimeGrid, noise: NoiseEnsemble,
                     player: int | None = None, slot=None, step: float = 1e-4) -> Array:
    """``dJ/du_k = E[H_u(t_k)] dt`` for a deterministic control, shape ``(N, len(slot))``.

    Exact on the tree by discrete duality; ``H_u`` is a central difference of
    the Hamiltonian, which is exact for controls entering at most quadratically.
    """
    ctx = build_context(problem, grid, noise, control, player=player, second_order=False)
    slot = list(range(problem.m)) if slot is None else list(slot)
    N, dt = grid.N, grid.dt
    grad = np.empty((N, len(slot)))
    for k in range(N):
        ref = np.array(ctx.reference_u(k))
        for c, comp in enumerate(slot):
            up, dn = ref.copy(), ref.copy()
            up[:, comp] += step
            dn[:, comp] -= step
            grad[k, c] = np.mean(eval_H(ctx, k, up) - eval_H(ctx, k, dn)) / (2 * step) * dt
    return grad


def optimal_deterministic_control(problem: Problem, grid: TimeGrid, noise: NoiseEnsemble,
                                  start: ControlProcess | None = None, player: int | None = None, slot=None,
                                  gtol: float = 1e-11, max_iter: int = 500) -> tuple[ControlProcess, dict]:
    """Minimize the cost over deterministic control sequences.

    L-BFGS-B on the adjoint gradient, with the problem's box as bounds. Only
    the components in ``slot`` move (the rest stay at ``start``), and
    ``player`` selects whose cost is minimized.
    """
    N, m = grid.N, problem.m
    slot = list(range(m)) if slot is None else list(slot)
    if start is not None and start.values.shape[0] != 1:
        raise ValueError("optimizer works on deterministic controls")
    base = (start or ControlProcess.constant(np.zeros(m), N)).values[0].copy()
    cost_problem = _player_problem(problem, player)

    def to_control(z):
        seq = base.copy()
        seq[:, slot] = z.reshape(N, len(slot))
        return ControlProcess(seq[None])

    def fun(z):
        c = to_control(z)
        J = cost_eval(cost_problem, grid, solve_fsvie(problem, grid, noise, c), c)[0]
        return J, control_gradient(problem, c, grid, noise, player, slot).ravel()

    bounds = None if problem.box is None else [problem.box] * (N * len(slot))
    res = scipy.optimize.minimize(fun, base[:, slot].ravel(), jac=True, method="L-BFGS-B", bounds=bounds,
                                  options={"gtol": gtol, "ftol": 0.0, "maxiter": max_iter})
    _, g = fun(res.x)
    return to_control(res.x), {"iterations": int(res.nit), "grad_max": float(np.max(np.abs(g))),
                               "cost": float(res.fun), "message": str(res.message)}


def best_response_equilibrium(problem: Problem, grid: TimeGrid, noise: NoiseEnsemble,
                              start: ControlProcess | None = None, rounds: int = 10,
                              tol: float = 1e-10) -> tuple[ControlProcess, dict]:
    """Iterate per-player deterministic best responses until the candidate settles."""
    if not problem.players:
        raise ValueError("best responses need a game problem")
    ctrl = start or ControlProcess.constant(np.zeros(problem.m), grid.N)
    moves = []
    for _ in range(rounds):
        prev = ctrl.values.copy()
        for l, slot in enumerate(problem.slots):
            ctrl, _info = optimal_deterministic_control(problem, grid, noise, ctrl, player=l, slot=slot)
        moves.append(float(np.max(np.abs(ctrl.values - prev))))
        if moves[-1] < tol:
            break
    return ctrl, {"rounds": len(moves), "moves": moves}


def grid_minimax(problem: Problem, grid: TimeGrid, noise: NoiseEnsemble, grid1=None, grid2=None) -> dict:
    """Exhaustive minimax of the first player's cost over constant controls.

    Returns the minimax and maximin pairs and values; they coincide when the
    grid contains a saddle point.
    """
    if len(problem.slots) != 2:
        raise ValueError("grid_minimax needs a two-player game")
    s1, s2 = problem.slots
    g1 = _probe_list(problem, grid1, len(s1))
    g2 = _probe_list(problem, grid2, len(s2))
    cost = _player_problem(problem, 0)
    table = np.empty((len(g1), len(g2)))
    for i, a in enumerate(g1):
        for j, b in enumerate(g2):
            u = np.zeros(problem.m)
            u[list(s1)], u[list(s2)] = a, b
            c = ControlProcess.constant(u, grid.N)
            table[i, j] = cost_eval(cost, grid, solve_fsvie(problem, grid, noise, c), c)[0]
    i_star = int(np.argmin(table.max(axis=1)))
    j_star = int(np.argmax(table.min(axis=0)))
    upper = float(table.max(axis=1)[i_star])
    lower = float(table.min(axis=0)[j_star])
    u = np.zeros(problem.m)
    u[list(s1)], u[list(s2)] = g1[i_star], g2[j_star]
    return {"u1": g1[i_star], "u2": g2[j_star], "upper": upper, "lower": lower,
            "is_saddle": bool(abs(upper - lower) <= 1e-12 * max(1.0, abs(upper))),
            "control": ControlProcess.constant(u, grid.N), "table": table}
