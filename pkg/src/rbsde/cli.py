"""Command-line experiment runner.

    rbsde solve    --config cfg.json --out DIR    penalized and/or reflected solve
    rbsde analyze  --config cfg.json --out DIR    value field, gradient and supersolution checks
    rbsde control  --config cfg.json --out DIR    control/stopping verification
    rbsde oracle   --config cfg.json --out DIR    binomial Bermudan put reference
    rbsde validate --config cfg.json --out DIR    sampled hypothesis checks

Exit codes: 0 pass, 1 config/runtime error, 2 check failure, 3 non-convergence.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from dataclasses import replace

import numpy as np

from . import __version__
from .analysis import (SolverConfig, check_covariation, check_lipschitz, check_supersolution,
                       dominant_direction, estimate_zeta, evaluate_u, value_field)
from .backward import solve_rbsde, solve_reflected
from .config import ConfigError, ExperimentConfig, build, load_config
from .control import optimal_stopping_rule, stopping_boundary, validate_control, \
    verify_fundamental_relation
from .forward import simulate, write_paths_csv
from .model import TimeGrid, validate_model
from .oracle import binomial_oracle
from .presets import PRESETS

EXIT_OK, EXIT_ERROR, EXIT_CHECK, EXIT_WARN = 0, 1, 2, 3


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


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(_clean(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


class Run:
    """Resolved experiment: config, preset, grid and output directory."""

    def __init__(self, cfg: ExperimentConfig, threads: int, dump_paths: bool):
        self.cfg = cfg
        self.preset = build(cfg)
        self.threads = max(1, threads)
        self.dump_paths = dump_paths
        T = cfg.grid.T if cfg.grid.T is not None else self.preset.horizon
        n_steps = cfg.grid.n_steps if cfg.grid.n_steps is not None else self.preset.n_steps
        self.grid = TimeGrid(cfg.grid.s, T, n_steps)
        self.basis = cfg.basis_spec(self.preset.basis)
        self.out = cfg.output_dir
        os.makedirs(self.out, exist_ok=True)
        self.files: list[str] = []

    @property
    def model(self):
        return self.preset.model

    @property
    def problem(self):
        return self.preset.problem

    def solver_config(self, scheme="reflected") -> SolverConfig:
        return SolverConfig(T=self.grid.T, n_steps=self.grid.n_steps, n_paths=self.cfg.n_paths,
                            seed=self.cfg.seed, basis=self.basis, scheme=scheme,
                            schedule=self.cfg.penalty_schedule(),
                            penalty_kind=self.cfg.penalty_kind, n_workers=self.threads)

    def simulate(self):
        paths = simulate(self.model, self.grid, self.preset.x0, self.cfg.n_paths, self.cfg.seed,
                         self.threads)
        if self.dump_paths:
            with open(self.path("paths.csv"), "w") as fh:
                write_paths_csv(paths, fh)
        return paths

    def path(self, name):
        self.files.append(name)
        return os.path.join(self.out, name)

    def finish(self, command, summary, checks, warn=False):
        summary = dict(summary)
        summary["checks"] = checks
        summary["passed"] = all(c["pass"] for c in checks.values())
        _write_json(self.path("summary.json"), summary)
        manifest = {"command": command, "config_sha256": self.cfg.digest(),
                    "seed": self.cfg.seed, "version": __version__,
                    "config": self.cfg.to_dict(), "files": sorted(set(self.files + ["manifest.json"]))}
        _write_json(os.path.join(self.out, "manifest.json"), manifest)
        if not summary["passed"]:
            return EXIT_CHECK
        return EXIT_WARN if warn else EXIT_OK


def _is_bermudan(run: Run) -> bool:
    return run.cfg.preset in ("bermudan_put",) and run.cfg.custom is None


def _oracle_for(run: Run):
    p = run.preset.params
    return binomial_oracle(p["spot"], p["strike"], p["rate"], p["vol"], p["T"], p["n_dates"])


def _reflected_invariants(sol, paths, problem):
    grid = paths.grid
    h = np.column_stack([problem.obstacle(grid.time(i), paths.states[:, i])
                         for i in range(grid.n_steps + 1)])
    # under the terminal fallback the obstacle binds before T only
    last = grid.n_steps if problem.terminal_fallback else grid.n_steps + 1
    dominance = bool(np.all(sol.y[:, :last] >= h[:, :last]))
    skorokhod = float(np.sum(sol.k_increments * (sol.y[:, :-1] - h[:, :-1])))
    return {"pass": dominance and skorokhod == 0.0, "dominance": dominance,
            "skorokhod_sum": skorokhod, "k_nonnegative": bool(np.all(sol.k_increments >= 0))}


def cmd_solve(run: Run) -> int:
    paths = run.simulate()
    cfg = run.cfg
    summary = {"preset": run.preset.name, "x0": run.preset.x0, "n_paths": cfg.n_paths,
               "n_steps": run.grid.n_steps, "scheme": cfg.scheme}
    checks = {}
    warn = False
    y0 = {}
    if cfg.scheme in ("reflected", "both"):
        sol_r = solve_reflected(paths, run.problem, run.basis)
        summary["reflected"] = {"y0": sol_r.y0, "se": sol_r.y0_se, "k_mean": np.mean(sol_r.k_total)}
        checks["reflected_invariants"] = _reflected_invariants(sol_r, paths, run.problem)
        y0["reflected"] = sol_r.y0
        if _is_bermudan(run):
            rule = optimal_stopping_rule(sol_r, paths, run.problem)
            bnd = stopping_boundary(paths, rule, run.problem, y=sol_r.y)
            _write_boundary(run, bnd)
    if cfg.scheme in ("penalized", "both"):
        sol_p, trace = solve_rbsde(paths, run.problem, cfg.penalty_schedule(), run.basis,
                                   cfg.penalty_kind)
        _write_csv(run.path("trace.csv"), ["level", "y0", "se"], trace.rows())
        summary["penalized"] = {"y0": sol_p.y0, "se": sol_p.y0_se, "converged": trace.converged,
                                "final_level": trace.levels[-1]}
        y0["penalized"] = sol_p.y0
        warn = not trace.converged
    if len(y0) == 2:
        gap = abs(y0["reflected"] - y0["penalized"])
        summary["scheme_gap"] = gap
        checks["scheme_agreement"] = {"pass": gap <= 0.015 * abs(y0["reflected"]),
                                      "relative_gap": gap / max(abs(y0["reflected"]), 1e-300)}
    if _is_bermudan(run) and run.grid.s == 0.0:
        ref = _oracle_for(run).price
        summary["oracle_price"] = ref
        for k, v in y0.items():
            rel = abs(v / ref - 1.0)
            checks[f"oracle_{k}"] = {"pass": rel <= 0.01, "relative_error": rel}
    if cfg.preset == "frozen" and cfg.custom is None:
        x = np.atleast_2d(run.preset.x0)
        exact = float(max(run.problem.terminal(x)[0], run.problem.obstacle(run.grid.s, x)[0]))
        for k, v in y0.items():
            checks[f"frozen_{k}"] = {"pass": abs(v - exact) <= 2e-2, "exact": exact, "value": v}
    return run.finish("solve", summary, checks, warn)


def _write_boundary(run, bnd, oracle=None):
    times = run.grid.times if oracle is None else oracle.exercise_times
    rows = []
    for i, t in enumerate(times):
        row = [float(t), float(bnd[i]) if bnd is not None else float("nan")]
        if oracle is not None:
            row.append(float(oracle.boundary[i]))
        rows.append(row)
    header = ["time", "boundary"] + (["oracle_boundary"] if oracle is not None else [])
    _write_csv(run.path("boundary.csv"), header, rows)


def _default_points(run: Run):
    if run.cfg.eval_points is not None:
        return [np.atleast_1d(np.asarray(p, dtype=float)) for p in run.cfg.eval_points]
    if run.cfg.preset == "frozen":
        return [np.array([v]) for v in np.linspace(0.0, 2.0, 11)]
    if run.cfg.preset in ("bermudan_put", "control_stop"):
        return [np.array([v]) for v in (80.0, 90.0, 100.0, 110.0, 120.0)]
    return [run.preset.x0]


def cmd_analyze(run: Run) -> int:
    cfg = run.cfg
    sc = run.solver_config()
    s = run.grid.s
    pts = _default_points(run)
    field = value_field(run.model, run.problem, [(s, x) for x in pts], sc)
    with open(run.path("value_field.csv"), "w", newline="") as fh:
        field.to_csv(fh)
    h = np.array([run.problem.obstacle(s, np.atleast_2d(x))[0] for x in pts])
    checks = {"obstacle_dominance": {
        "pass": bool(np.all(field.values >= h - 3.0 * field.std_errors)),
        "min_slack_in_se": float(np.min((field.values - h) / np.maximum(field.std_errors, 1e-300)))}}
    summary = {"preset": run.preset.name, "points": pts, "u": field.values,
               "se": field.std_errors}
    if cfg.preset == "frozen" and cfg.custom is None:
        exact = np.array([max(run.problem.terminal(np.atleast_2d(x))[0], hh)
                          for x, hh in zip(pts, h)])
        err = float(np.max(np.abs(field.values - exact)))
        checks["frozen_max"] = {"pass": err <= 2e-2, "max_abs_error": err}
    if cfg.analysis.zeta:
        paths = run.simulate()
        sol = solve_reflected(paths, run.problem, run.basis)
        zeta = estimate_zeta(sol, paths)
        xi = dominant_direction(zeta, paths)
        res = check_covariation(sol, paths, zeta, xi)
        with open(run.path("zeta_field.csv"), "w", newline="") as fh:
            zeta.to_csv(fh, np.vstack(pts))
        summary["covariation"] = {"xi": xi, "residual": res}
        checks["covariation"] = {"pass": res <= 0.15, "residual": res}
    if cfg.analysis.supersolution:
        t_mid = run.grid.time(run.grid.n_steps // 2)
        rep = check_supersolution(run.model, run.problem, s, t_mid, run.preset.x0, sc)
        summary["supersolution"] = {"t": t_mid, "slack": rep.slack, "se": rep.se}
        checks["supersolution"] = {"pass": rep.passed, "slack": rep.slack, "se": rep.se}
    if cfg.analysis.lipschitz and len(pts) > 1:
        pairs = [(pts[i], pts[i + 1]) for i in range(len(pts) - 1)]
        rep = check_lipschitz(lambda s_, x: evaluate_u(run.model, run.problem, s_, x, sc), s,
                              pairs, run.problem.growth_m)
        summary["lipschitz"] = {"max_ratio": rep.max_ratio, "ratios": rep.ratios,
                                "resolved": rep.resolved}
    return run.finish("analyze", summary, checks)


def cmd_control(run: Run) -> int:
    cp = run.preset.control
    if cp is None:
        raise ConfigError(f"preset {run.preset.name!r} has no control problem")
    cfg = run.cfg
    summary = {"preset": run.preset.name}
    checks = {}
    if cfg.control.verify or cfg.control.closed_loop:
        rep = verify_fundamental_relation(run.model, cp, run.problem, run.grid.s, run.preset.x0,
                                          cfg.control.n_random_controls, cfg.seed,
                                          run.solver_config())
        summary["verification"] = rep
        if cfg.control.verify:
            ok = sum(t["pass"] for t in rep["trials"])
            checks["fundamental_inequality"] = {"pass": ok == len(rep["trials"]),
                                                "passed_trials": ok, "trials": len(rep["trials"])}
        if cfg.control.closed_loop:
            checks["closed_loop_equality"] = {"pass": rep["closed_loop"]["pass"],
                                              "relative_gap": rep["closed_loop"]["relative_gap"]}
    paths = run.simulate()
    sol = solve_reflected(paths, run.problem, run.basis)
    rule = optimal_stopping_rule(sol, paths, run.problem)
    _write_boundary(run, stopping_boundary(paths, rule, run.problem, y=sol.y))
    return run.finish("control", summary, checks)


def cmd_oracle(run: Run) -> int:
    params = {"spot": 100.0, "strike": 100.0, "rate": 0.05, "vol": 0.2, "T": 1.0, "n_dates": 50}
    params.update({k: v for k, v in run.preset.params.items() if k in params})
    res = binomial_oracle(params["spot"], params["strike"], params["rate"], params["vol"],
                          params["T"], params["n_dates"])
    _write_boundary(run, None, res)
    return run.finish("oracle", {"params": params, "price": res.price}, {})


def cmd_validate(run: Run) -> int:
    viol = validate_model(run.model, run.problem, seed=run.cfg.seed, horizon=run.grid.T)
    if run.preset.control is not None:
        viol += validate_control(run.preset.control, run.model, seed=run.cfg.seed)
    report = [{"invariant": v.invariant, "detail": v.detail, "witness": v.witness} for v in viol]
    return run.finish("validate", {"preset": run.preset.name, "violations": report},
                      {"hypotheses": {"pass": not report, "n_violations": len(report)}})


COMMANDS = {"solve": cmd_solve, "analyze": cmd_analyze, "control": cmd_control,
            "oracle": cmd_oracle, "validate": cmd_validate}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rbsde", description=__doc__.split("\n\n")[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--preset", help="preset name (instead of, or overriding, the config)")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--paths", type=int, dest="n_paths", help="override n_paths")
        p.add_argument("--out", help="output directory")
        p.add_argument("--dump-paths", action="store_true", help="write paths.csv")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        changes = {}
        if args.preset and args.preset not in PRESETS:
            raise ConfigError(f"unknown preset {args.preset!r}; choose from {sorted(PRESETS)}")
        if args.preset:
            changes.update(preset=args.preset, custom=None)
            if not args.config or args.preset != cfg.preset:
                changes["preset_params"] = {}
        if args.seed is not None:
            changes["seed"] = args.seed
        if args.n_paths is not None:
            changes["n_paths"] = args.n_paths
        if args.out:
            changes["output_dir"] = args.out
        cfg = replace(cfg, **changes)
        run = Run(cfg, args.threads, args.dump_paths)
        return COMMANDS[args.command](run)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_ERROR
    except (ValueError, RuntimeError, KeyError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
