"""Config-driven experiment runner.

Usage::

    volterra-mp SUBCOMMAND [--config PATH] [--out DIR] [--seed S] [--mode tree|mc]
                           [--paths M] [--grid N]

Config schema (JSON, every key optional)::

    {
      "problem":  "lq_control" | {"name": "lq_control", "params": {...}},
      "grid":     {"N": 8},
      "mode":     "tree" | "mc",
      "paths":    256,                  # tree mode requires 2**N
      "seed":     0,
      "backend":  {"kind": "exact" | "regression", "degree": 2, "ridge": 1e-8},
      "control":  {"kind": "constant", "value": [0.0]}
                | {"kind": "sequence", "values": [[...], ...]}
                | {"kind": "optimal" | "equilibrium" | "minimax"},
                  optional "shift" (added afterwards) and "swap" (exchange two players' values),
      "experiment": {...}               # per subcommand, see EXPERIMENT_KEYS
    }

Exit status: 0 success or PASS, 2 verification FAIL, 1 error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .adjoint1 import hessian_H, m_solution_residual, solve_first_adjoint, solve_type2_bsvie
from .adjoint2 import constraint_residuals, quadratic_form_adjoint, solve_second_adjoint, symmetry_defects
from .forward import SpikeWindow, cost_eval, solve_fsvie, solve_x1
from .hamiltonian import build_context, eval_H, eval_H_direct
from .martingale import RegressionConfig, make_backend
from .problem import ControlProcess, freeze, registry_get
from .spike import SpikeSpec, direct_quadratic_form, expansion_report
from .timebase import MAX_TREE_STEPS, make_grid, sample_noise
from . import verify

SCHEMA_VERSION = "1.0"
COMMANDS = ("simulate", "adjoint", "spike-sweep", "mp-check", "game-check", "sde-crosscheck", "oracle-compare")
TOP_KEYS = {"problem", "grid", "mode", "paths", "seed", "backend", "control", "experiment"}
EXPERIMENT_KEYS = {
    "simulate": set(),
    "adjoint": {"second_order", "method", "beta", "tol"},
    "spike-sweep": {"taus", "widths", "probe", "bootstrap", "block"},
    "mp-check": {"taus", "probes", "tol"},
    "game-check": {"check", "taus", "probes", "probes1", "probes2", "tol"},
    "sde-crosscheck": {"taus", "probes", "tol"},
    "oracle-compare": {"widths", "tau", "probe", "tol"},
}
SPIKE_COLUMNS = ("tau", "width", "eps", "jdiff", "dH", "e_direct", "e_adjoint", "e_gap", "residual", "residual_pathwise",
                 "dev0", "dev1", "x2", "dev2", "jdiff_se", "residual_se", "residual_pathwise_se")


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"config key {key!r}: {message}")
        self.key = key


@dataclass
class RunConfig:
    command: str
    problem: str
    params: dict
    N: int
    mode: str
    paths: int
    seed: int
    backend: dict
    control: dict
    experiment: dict = field(default_factory=dict)

    def resolved(self) -> dict:
        return {"command": self.command, "problem": {"name": self.problem, "params": self.params},
                "grid": {"N": self.N}, "mode": self.mode, "paths": self.paths, "seed": self.seed,
                "backend": self.backend, "control": self.control, "experiment": self.experiment}


def _int(key, value, minimum=None):
    if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
        raise ConfigError(key, f"expected an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(key, f"must be >= {minimum}")
    return int(value)


def resolve_config(command: str, raw: dict, seed=None, mode=None, paths=None, grid=None) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    for key in raw:
        if key not in TOP_KEYS:
            raise ConfigError(key, f"unknown key; expected one of {sorted(TOP_KEYS)}")
    prob = raw.get("problem", "lq_control")
    if isinstance(prob, str):
        name, params = prob, {}
    elif isinstance(prob, dict):
        extra = set(prob) - {"name", "params"}
        if extra:
            raise ConfigError(f"problem.{sorted(extra)[0]}", "unknown key")
        name, params = prob.get("name"), dict(prob.get("params") or {})
    else:
        raise ConfigError("problem", "expected a name or an object")
    try:
        registry_get(name, params)
    except KeyError as exc:
        raise ConfigError("problem.name", str(exc.args[0])) from None
    except ValueError as exc:
        raise ConfigError("problem.params", str(exc)) from None

    g = raw.get("grid", {})
    if not isinstance(g, dict) or set(g) - {"N"}:
        raise ConfigError("grid", "expected an object with key 'N'")
    N = _int("grid.N", grid if grid is not None else g.get("N", 6), 1)
    mode = mode or raw.get("mode", "tree")
    if mode not in ("tree", "mc"):
        raise ConfigError("mode", f"expected 'tree' or 'mc', got {mode!r}")
    if mode == "tree" and N > MAX_TREE_STEPS:
        raise ConfigError("grid.N", f"tree mode enumerates 2**N paths; N={N} exceeds {MAX_TREE_STEPS}")
    default_paths = 2**N if mode == "tree" else 2**14
    M = _int("paths", paths if paths is not None else raw.get("paths", default_paths), 1)
    if mode == "tree" and M != 2**N:
        raise ConfigError("paths", f"tree mode needs paths = 2**N = {2**N}, got {M}")
    s = _int("seed", seed if seed is not None else raw.get("seed", 0), 0)

    backend = dict(raw.get("backend", {}))
    kind = backend.setdefault("kind", "exact" if mode == "tree" else "regression")
    if kind not in ("exact", "regression"):
        raise ConfigError("backend.kind", f"expected 'exact' or 'regression', got {kind!r}")
    if (mode == "tree") != (kind == "exact"):
        raise ConfigError("backend.kind", f"mode {mode!r} is incompatible with backend {kind!r}")
    for key in set(backend) - {"kind", "degree", "ridge"}:
        raise ConfigError(f"backend.{key}", "unknown key")
    if kind == "regression":
        try:
            RegressionConfig(int(backend.get("degree", 2)), float(backend.get("ridge", 1e-8)))
        except ValueError as exc:
            raise ConfigError("backend", str(exc)) from None

    control = dict(raw.get("control", {"kind": "constant", "value": 0.0}))
    if control.get("kind") not in ("constant", "sequence", "optimal", "equilibrium", "minimax"):
        raise ConfigError("control.kind", f"unsupported control kind {control.get('kind')!r}")
    for key in set(control) - {"kind", "value", "values", "shift", "swap"}:
        raise ConfigError(f"control.{key}", "unknown key")

    exp = dict(raw.get("experiment", {}))
    for key in exp:
        if key not in EXPERIMENT_KEYS[command]:
            raise ConfigError(f"experiment.{key}", f"not a parameter of {command!r}")
    return RunConfig(command, name, params, N, mode, M, s, backend, control, exp)


# ------------------------------------------------------------ construction


def _setup(cfg: RunConfig):
    problem = registry_get(cfg.problem, cfg.params)
    grid = make_grid(problem.T, cfg.N)
    noise = sample_noise(grid, cfg.paths, "tree" if cfg.mode == "tree" else "gaussian", cfg.seed)
    regression = None
    if cfg.backend["kind"] == "regression":
        regression = RegressionConfig(int(cfg.backend.get("degree", 2)), float(cfg.backend.get("ridge", 1e-8)))
    return problem, grid, noise, regression


def _build_control(cfg: RunConfig, problem, grid, noise) -> tuple[ControlProcess, dict]:
    spec, N, m = cfg.control, grid.N, problem.m
    kind, info = spec["kind"], {}
    if kind == "constant":
        value = np.atleast_1d(np.asarray(spec.get("value", 0.0), float))
        if value.size not in (1, m):
            raise ConfigError("control.value", f"expected 1 or {m} entries")
        ctrl = ControlProcess.constant(np.broadcast_to(value, (m,)), N)
    elif kind == "sequence":
        seq = np.asarray(spec.get("values"), float)
        if seq.ndim == 1:
            seq = seq[:, None]
        if seq.shape != (N, m):
            raise ConfigError("control.values", f"expected shape ({N}, {m}), got {seq.shape}")
        ctrl = ControlProcess.deterministic(seq)
    elif kind == "optimal":
        ctrl, opt = verify.optimal_deterministic_control(problem, grid, noise)
        info = {k: opt[k] for k in ("iterations", "grad_max", "cost")}
    elif kind == "equilibrium":
        ctrl, info = verify.best_response_equilibrium(problem, grid, noise)
    else:
        mm = verify.grid_minimax(problem, grid, noise)
        ctrl = mm["control"]
        info = {"upper": mm["upper"], "lower": mm["lower"], "is_saddle": mm["is_saddle"]}
    vals = np.array(ctrl.values)
    if spec.get("swap"):
        if len(problem.slots) != 2:
            raise ConfigError("control.swap", "needs a two-player problem")
        s1, s2 = (list(s) for s in problem.slots)
        vals[..., s1], vals[..., s2] = ctrl.values[..., s2], ctrl.values[..., s1]
    if "shift" in spec:
        vals = vals + np.asarray(spec["shift"], float)
    info["values"] = vals[0].tolist()
    return ControlProcess(vals), info


def _taus(exp, N, key="taus"):
    taus = [int(t) for t in exp.get(key, verify.default_taus(N))]
    for t in taus:
        if not 0 <= t < N:
            raise ConfigError(f"experiment.{key}", f"tau index {t} outside 0..{N - 1}")
    return taus


def _default_widths(N: int) -> list[int]:
    widths = [w for w in (32, 16, 8, 4, 2, 1) if w <= max(N // 4, 1)]
    return widths[:5]


# ------------------------------------------------------------- experiments


def run_simulate(cfg, problem, grid, noise, regression, ctrl):
    X = solve_fsvie(problem, grid, noise, ctrl).values
    J, se = cost_eval(problem, grid, X, ctrl, noise)
    table = [{"k": k, "t": float(grid.nodes[k]), "mean": float(X[:, k, 0].mean()), "std": float(X[:, k, 0].std())}
             for k in range(grid.N + 1)]
    return {"cost": J, "cost_se": se, "terminal_mean": X[:, -1].mean(axis=0).tolist()}, None, {"state": table}


def run_adjoint(cfg, problem, grid, noise, regression, ctrl):
    exp = cfg.experiment
    X = solve_fsvie(problem, grid, noise, ctrl).values
    backend = make_backend(noise, X, regression)
    frozen = freeze(problem, grid, X, ctrl, ctrl.values[0, 0])
    kw = {"method": exp.get("method", "auto")}
    if "tol" in exp:
        kw["tol"] = float(exp["tol"])
    if "beta" in exp:
        kw["beta"] = float(exp["beta"])
    first = solve_first_adjoint(frozen, backend, **kw)
    res = {"first": _telemetry(first.telemetry)}
    rows = [{"k": k, "p_mean": float(first.p[:, k, 0].mean()), "q_mean": float(first.q[:, k, 0].mean()),
             "Y_mean": float(first.Y[:, k, 0].mean())} for k in range(grid.N)]
    if first.Z is not None and backend.exact:
        res["m_solution_residual"] = m_solution_residual(first, noise)
    if exp.get("second_order", grid.N <= 10 and backend.exact):
        second = solve_second_adjoint(frozen, first, backend, beta=exp.get("beta", "auto"))
        res["second"] = _telemetry(second.telemetry)
        if backend.exact:
            res["constraint_residuals"] = constraint_residuals(second, noise)
            res["symmetry_defects"] = symmetry_defects(second)
        for k, row in enumerate(rows):
            row["S_mean"] = float(second.S[:, k, 0, 0].mean())
    return res, None, {"adjoint": rows}


def run_spike(cfg, problem, grid, noise, regression, ctrl):
    exp = cfg.experiment
    N = grid.N
    taus = _taus(exp, N) if "taus" in exp else sorted({max(N // 8, 0), N // 4, N // 2})
    widths = [int(w) for w in exp.get("widths", _default_widths(N))]
    probe = np.atleast_1d(np.asarray(exp.get("probe", problem.probes[-1] if problem.probes else 1.0), float))
    out, rows = [], []
    for tau in taus:
        spec = SpikeSpec(tau, tuple(widths), tuple(np.broadcast_to(probe, (problem.m,))))
        try:
            spec.check(N)
        except ValueError as exc:
            raise ConfigError("experiment.widths", str(exc)) from None
        rep = expansion_report(problem, ctrl, spec, grid, noise, regression,
                               bootstrap=int(exp.get("bootstrap", 200)), block=int(exp.get("block", 256)),
                               seed=cfg.seed)
        out.append({"tau": tau, "rows": rep.rows, "slopes": {k: v.as_dict() for k, v in rep.slopes.items()}})
        rows += [{"tau": tau, **r} for r in rep.rows]
    return {"probe": probe.tolist(), "sweeps": out}, None, {"spike": rows}


def run_mp(cfg, problem, grid, noise, regression, ctrl):
    exp = cfg.experiment
    res = verify.mp_scan(problem, ctrl, _taus(exp, grid.N), exp.get("probes"), grid, noise,
                         exp.get("tol"), regression)
    return res.as_dict(), res.passed, {"mp_scan": _scan_rows(res)}


def run_game(cfg, problem, grid, noise, regression, ctrl):
    exp = cfg.experiment
    if not problem.players:
        raise ConfigError("problem.name", f"{problem.name!r} is not a game")
    check = exp.get("check", "saddle" if problem.name == "zero_sum_bilinear" else "nash")
    taus = _taus(exp, grid.N)
    if check == "nash":
        res = verify.nash_check(problem, ctrl, grid, noise, taus, exp.get("probes"), exp.get("tol"), regression)
        rows = [r for p in res.players for r in _scan_rows(p)]
        return {"check": "nash", **res.as_dict()}, res.passed, {"nash": rows}
    if check == "saddle":
        res = verify.saddle_check(problem, ctrl, grid, noise, taus, exp.get("probes1"), exp.get("probes2"),
                                  exp.get("tol"), regression)
        rows = []
        left, right = res._margins()
        for a, tau in enumerate(res.taus):
            rows += [{"tau": tau, "side": "player2", "probe": float(u[0]), "margin": float(left[a, b])}
                     for b, u in enumerate(res.probes2)]
            rows += [{"tau": tau, "side": "player1", "probe": float(u[0]), "margin": float(right[a, b])}
                     for b, u in enumerate(res.probes1)]
        return {"check": "saddle", **res.as_dict()}, res.passed, {"saddle": rows}
    raise ConfigError("experiment.check", f"expected 'nash' or 'saddle', got {check!r}")


def run_sde(cfg, problem, grid, noise, regression, ctrl):
    exp = cfg.experiment
    if not problem.t_independent:
        raise ConfigError("problem.params", "SDE cross-check needs kernels independent of the outer time")
    res = verify.sde_crosscheck(problem, ctrl, grid, noise, _taus(exp, grid.N), exp.get("probes"), regression)
    tol = float(exp.get("tol", 1e-8))
    ok = res.max_discrepancy <= tol
    rows = [{"tau": t, "probe": float(u[0]), "volterra": float(res.volterra[a, b]),
             "classical": float(res.classical[a, b])}
            for a, t in enumerate(res.taus) for b, u in enumerate(res.probes)]
    return {**res.as_dict(), "tol": tol, "verdict": "PASS" if ok else "FAIL"}, ok, {"sde": rows}


def run_oracle(cfg, problem, grid, noise, regression, ctrl):
    """Cross-check independent evaluation routes that must agree on the grid."""
    exp = cfg.experiment
    N = grid.N
    tol = float(exp.get("tol", 1e-10 if noise.mode == "tree" else 1e-6))
    tau = int(exp.get("tau", N // 4))
    probe = np.atleast_1d(np.asarray(exp.get("probe", problem.probes[-1] if problem.probes else 1.0), float))
    ctx = build_context(problem, grid, noise, ctrl, method="picard", regression=regression)
    checks = {}
    sweep = solve_type2_bsvie(ctx.frozen, ctx.first.eta, ctx.first.zeta, ctx.backend, method="sweep")
    checks["picard_vs_sweep_p"] = float(np.max(np.abs(sweep.p - ctx.first.p)))
    checks["picard_vs_sweep_q"] = float(np.max(np.abs(sweep.q - ctx.first.q)))
    checks["hamiltonian_aggregate_vs_literal"] = max(
        float(np.max(np.abs(eval_H(ctx, k, probe) - eval_H_direct(ctx, k, probe)))) for k in range(N))
    frozen = freeze(problem, grid, ctx.state, ctrl, np.broadcast_to(probe, (problem.m,)))
    first = solve_first_adjoint(frozen, ctx.backend, method="picard")
    second = solve_second_adjoint(frozen, first, ctx.backend)
    Hxx = hessian_H(frozen, first)
    win = SpikeWindow(tau, 1)
    x1 = solve_x1(frozen, grid, noise, win)
    checks["quadratic_form_single_step"] = abs(direct_quadratic_form(frozen, Hxx, x1)
                                               - quadratic_form_adjoint(second, frozen, win))
    rows = []
    for w in exp.get("widths", [w for w in (4, 2, 1) if tau + w <= N]):
        win = SpikeWindow(tau, int(w))
        x1 = solve_x1(frozen, grid, noise, win)
        d, a = direct_quadratic_form(frozen, Hxx, x1), quadratic_form_adjoint(second, frozen, win)
        rows.append({"width": int(w), "eps": w * grid.dt, "e_direct": d, "e_adjoint": a, "gap": d - a})
    exact = {k: v for k, v in checks.items()}
    if noise.mode == "tree":
        exact["m_solution_residual"] = m_solution_residual(first, noise)
        exact.update({f"constraint_{k}": v for k, v in constraint_residuals(second, noise).items()})
    ok = all(v <= tol for v in exact.values())
    return {"tol": tol, "checks": exact, "verdict": "PASS" if ok else "FAIL"}, ok, {"quadratic_form": rows}


RUNNERS = {
    "simulate": run_simulate, "adjoint": run_adjoint, "spike-sweep": run_spike, "mp-check": run_mp,
    "game-check": run_game, "sde-crosscheck": run_sde, "oracle-compare": run_oracle,
}


# ------------------------------------------------------------ serialization


def _scan_rows(res: verify.MpScanResult) -> list[dict]:
    return [{"player": "" if res.player is None else res.player, "tau": t, "probe": float(u[0]),
             "value": float(res.values[a, b]), "std_error": float(res.errors[a, b])}
            for a, t in enumerate(res.taus) for b, u in enumerate(res.probes)]


def _telemetry(tele: dict) -> dict:
    keep = ("iterations", "ratios", "outer_iterations", "outer_ratios", "inner_iterations", "inner_ratios",
            "method", "beta", "tol")
    return {k: v for k, v in tele.items() if k in keep}


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def write_outputs(out: Path, report: dict, tables: dict):
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.json", "w") as fh:
        json.dump(_clean(report), fh, indent=2, sort_keys=True)
        fh.write("\n")
    for name, rows in tables.items():
        cols = list(SPIKE_COLUMNS) if name == "spike" else []
        for row in rows:
            cols += [c for c in row if c not in cols]
        with open(out / f"{name}.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=cols, restval="", lineterminator="\n")
            writer.writeheader()
            for row in rows:
                writer.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v)
                                 for k, v in row.items()})


def run(command: str, raw: dict, out: Path, **overrides) -> int:
    cfg = resolve_config(command, raw, **overrides)
    problem, grid, noise, regression = _setup(cfg)
    ctrl, control_info = _build_control(cfg, problem, grid, noise)
    results, passed, tables = RUNNERS[command](cfg, problem, grid, noise, regression, ctrl)
    report = {
        "schema_version": SCHEMA_VERSION, "version": __version__, "command": command,
        "config": cfg.resolved(), "seed": cfg.seed, "control": control_info, "results": results,
        "verdict": None if passed is None else ("PASS" if passed else "FAIL"),
    }
    write_outputs(out, report, tables)
    return 0 if passed is None or passed else 2


def _summary(out: Path) -> str:
    verdict = json.loads((out / "report.json").read_text()).get("verdict")
    return verdict or "done"


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="volterra-mp", description=__doc__.split("\n")[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", type=Path, help="JSON run configuration")
    parser.add_argument("--out", type=Path, default=Path("out"), help="output directory (default: out)")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--mode", choices=("tree", "mc"))
    parser.add_argument("--paths", type=int)
    parser.add_argument("--grid", type=int, help="number of time steps N")
    args = parser.parse_args(argv)
    try:
        raw = {}
        if args.config is not None:
            try:
                raw = json.loads(args.config.read_text())
            except json.JSONDecodeError as exc:
                raise ConfigError("<file>", f"invalid JSON: {exc}") from None
        status = run(args.command, raw, args.out, seed=args.seed, mode=args.mode, paths=args.paths,
                     grid=args.grid)
    except Exception as exc:  # every failure maps to exit status 1
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"{args.command}: {_summary(args.out)} -> {args.out / 'report.json'}")
    return status


if __name__ == "__main__":
    sys.exit(main())
