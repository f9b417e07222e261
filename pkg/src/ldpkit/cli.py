"""``ldpkit run --config exp.json``: configuration-driven experiments.

Exit status: 0 success, 1 configuration/validation error, 2 numerical
failure (divergence, non-convergence, infeasible solve or failed check).
"""

import argparse
import json
import math
import os
import sys
import time
from dataclasses import dataclass

import numpy as np

from . import config as cfg
from .action import PathFunctional, gradient_check, min_action
from .estimate import epsilon_sweep
from .models import CIR, check_growth, check_predictability, initial_point
from .simulate import (Control, DivergenceError, StatePath, dump_paths, moment_bound_check, paths_csv,
                       simulate_samples)
from .skeleton import (PositivityError, check_floor, check_skeleton_growth, positivity_floor, skeleton_csv,
                       solve_skeleton, weak_l2_continuity_probe)

OK, INVALID, NUMERICAL = 0, 1, 2


@dataclass
class CheckRow:
    check: str
    status: str  # pass | fail | n/a
    margin: float
    detail: str = ""


def _control(block, grid, m):
    if block is None:
        return Control.zeros(grid, m)
    if "constant" in block:
        return Control.constant(grid, block["constant"], m)
    return Control(grid, np.asarray(block["values"], dtype=float).reshape(grid.n_steps, m))


def _write(outdir, name, text, mode="w"):
    os.makedirs(outdir, exist_ok=True)
    with open(os.path.join(outdir, name), mode) as fh:
        fh.write(text)


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=float) + "\n"


# ---------------------------------------------------------------- tasks

def task_simulate(c, model, init, grid, outdir, threads, fmts):
    p = c.params
    ctrl = None if p["control"] is None else _control(p["control"], grid, model.m).values
    batch = simulate_samples(model, grid, init, float(p["eps"]), 0, int(p["n_paths"]), int(p["seed"]), ctrl)
    if not batch.ok.all():
        raise DivergenceError(-1, f"{int((~batch.ok).sum())} simulated paths diverged")
    terminal = batch.paths[:, -1]
    report = {"task": "simulate", "eps": p["eps"], "seed": p["seed"], "n_paths": p["n_paths"],
              "terminal_mean": terminal.mean(axis=0).tolist(), "sup_norm_max": float(np.abs(batch.paths).max())}
    if "json" in fmts:
        _write(outdir, "report.json", _json(report))
    first = StatePath(grid, batch.paths[0], float(p["eps"]))
    if "csv" in fmts or "paths" in fmts:
        _write(outdir, "paths.csv", paths_csv(first))
    if "bin" in fmts:
        _write(outdir, "paths.bin", dump_paths(batch.paths, grid, model.m, float(p["eps"]), int(p["seed"])), "wb")
    return f"terminal mean {report['terminal_mean']}", OK


def task_skeleton(c, model, init, grid, outdir, threads, fmts):
    f = _control(c.params["control"], grid, model.m)
    sol = solve_skeleton(model, init, f)
    report = {"task": "skeleton", "residual": sol.residual, "terminal": sol.path.values[-1].tolist(),
              "action": 0.5 * f.norm_sq, "path": sol.path.values.tolist()}
    if "json" in fmts:
        _write(outdir, "report.json", _json(report))
    if "csv" in fmts or "paths" in fmts:
        _write(outdir, "paths.csv", skeleton_csv(sol))
    return f"phi_T = {report['terminal']}", OK


def task_minimize(c, model, init, grid, outdir, threads, fmts):
    p = c.params
    F = cfg.parse_functional(p["functional"], model.d)
    sol = min_action(model, grid, init, F, p["N_cap"], p["tol"], p["constraint_tol"], int(p["restarts"]), int(p["seed"]))
    if "json" in fmts:
        _write(outdir, "report.json", _json(sol.to_json()))
    if "csv" in fmts:
        _write(outdir, "report.csv", sol.to_csv())
    status = NUMERICAL if sol.flags else OK
    return f"I* = {sol.value:.6g} (objective {sol.objective:.6g}, flags {sol.flags or 'none'})", status


def task_sweep(c, model, init, grid, outdir, threads, fmts):
    p = c.params
    target = cfg.parse_event(p["event"]) if p["event"] is not None else cfg.parse_functional(p["functional"], model.d)
    rep = epsilon_sweep(model, grid, init, target, p["eps_list"], int(p["n_samples"]), int(p["seed"]),
                        p["method"], threads, restarts=int(p["restarts"]))
    if "csv" in fmts:
        _write(outdir, "report.csv", rep.to_csv())
    if "json" in fmts:
        _write(outdir, "report.json", _json(rep.to_json()))
    if "dat" in fmts:
        _write(outdir, "sweep.dat", rep.to_dat())
    last = rep.rows[-1]
    head = "unresolved" if last.minus_eps_log is None else f"{last.minus_eps_log:.6g}"
    resolved = sum(r.resolved for r in rep.rows)
    status = NUMERICAL if rep.reference["flags"] else OK
    return f"-eps log p at eps={last.eps}: {head}; reference {rep.reference['value']:.6g}; " \
           f"{resolved}/{len(rep.rows)} rows resolved", status


def verify_model(model, init, grid, p, threads=1) -> list:
    """Run the invariant suite for one model; one CheckRow per check."""
    rows = []
    seed = int(p["seed"])

    rep = check_predictability(model, grid, int(p["trials"]), seed)
    rows.append(CheckRow("predictability", "pass" if rep.passed else "fail", -len(rep.violations),
                         f"{len(rep.violations)} violations in {rep.trials} trials"))

    g = check_growth(model, grid, int(p["probes"]), seed)
    rows.append(CheckRow("coefficient_growth", "pass" if g.passed else "fail", 1.0 - g.max_ratio,
                         f"max |b|v|sigma| / M(1+sup|phi|) = {g.max_ratio:.4g}, M = {g.growth_constant:.4g}"))

    sg = check_skeleton_growth(model, grid, init, float(p["N"]), 100, seed)
    rows.append(CheckRow("skeleton_growth", "pass" if sg.passed else "fail", 1.0 - sg.worst_ratio,
                         f"{sg.violations} violations, worst ratio {sg.worst_ratio:.3g}"))

    for eps in p["eps_list"]:
        try:
            mb = moment_bound_check(model, grid, float(eps), init, float(p["N"]), float(p["p"]),
                                    int(p["n_samples"]), seed, threads)
            rows.append(CheckRow(f"moment_bound[eps={eps}]", "pass" if mb.passed else "fail", mb.margin,
                                 f"E sup|X|^p = {mb.empirical:.4g} +- {mb.stderr:.2g}, bound {mb.bound:.4g}"))
        except DivergenceError as exc:
            rows.append(CheckRow(f"moment_bound[eps={eps}]", "fail", -math.inf, str(exc)))

    if isinstance(model, CIR):
        x0 = float(initial_point(init, 1)[0])
        xb = p["x_bar"] if p["x_bar"] is not None else x0 / 2
        try:
            cert = positivity_floor(model, float(p["N"]), xb, x0)
            fc = check_floor(model, grid, x0, cert, int(p["floor_controls"]), seed)
            rows.append(CheckRow("positivity", "pass" if fc.passed else "fail", fc.min_value - cert.xi,
                                 f"xi = {cert.xi:.6g}, min skeleton value {fc.min_value:.6g}, "
                                 f"{fc.violations} violations"))
        except PositivityError as exc:
            rows.append(CheckRow("positivity", "fail", -math.inf, f"precondition violated: {exc}"))
    else:
        rows.append(CheckRow("positivity", "n/a", math.nan, "only for square-root models"))

    probe = weak_l2_continuity_probe(model, init, Control.zeros(grid, model.m), float(p["amplitude"]),
                                     p["frequencies"])
    rows.append(CheckRow("weak_l2_continuity", "pass" if probe.passed else "fail", probe.tolerance - probe.errors[-1],
                         "e_n = " + ", ".join(f"{e:.3g}" for e in probe.errors)))

    worst = 0.0
    x0 = initial_point(init, model.d)
    for i in range(int(p["gradient_instances"])):
        r = np.random.default_rng([seed, i])
        f = 0.3 * r.standard_normal((grid.n_steps, model.m))
        z = x0 + r.standard_normal(model.d)
        err = gradient_check(model, grid, init, f, _quadratic_terminal(z))
        worst = max(worst, err)
    rows.append(CheckRow("adjoint_gradient", "pass" if worst < 1e-5 else "fail", 1e-5 - worst,
                         f"max relative error {worst:.3g} over {p['gradient_instances']} instances"))
    return rows


def _quadratic_terminal(z, mu=1.0):
    F = PathFunctional.point(z)

    def terminal(phi):
        v, g = F.penalty(phi)
        return mu * v, mu * g
    return terminal


def task_verify(c, model, init, grid, outdir, threads, fmts):
    rows = verify_model(model, init, grid, c.params, threads)
    if "csv" in fmts:
        lines = ["check,status,margin,detail"] + [f"{r.check},{r.status},{r.margin!r},\"{r.detail}\"" for r in rows]
        _write(outdir, "report.csv", "\n".join(lines) + "\n")
    if "json" in fmts:
        _write(outdir, "report.json", _json({"task": "verify", "checks": [r.__dict__ for r in rows]}))
    failed = [r.check for r in rows if r.status == "fail"]
    table = "\n".join(f"  {r.check:<24} {r.status:<5} {r.detail}" for r in rows)
    status = NUMERICAL if failed else OK
    return f"{len(rows) - len(failed)}/{len(rows)} checks passed" + (f" (failed: {', '.join(failed)})" if failed else "") \
        + "\n" + table, status


TASKS = {"simulate": task_simulate, "skeleton": task_skeleton, "minimize": task_minimize,
         "sweep": task_sweep, "verify": task_verify}


def run(config, out=None, threads=1, quiet=False) -> int:
    """Execute one experiment; returns the process exit status."""
    start = time.perf_counter()
    try:
        c = config if isinstance(config, cfg.ExperimentConfig) else cfg.load(config)
        model, init, grid = c.build_model(), c.build_init(), c.time_grid
    except (cfg.ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return INVALID
    outdir = out or c.output["directory"]
    try:
        headline, status = TASKS[c.task](c, model, init, grid, outdir, max(1, int(threads)), set(c.output["formats"]))
    except (DivergenceError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return NUMERICAL
    if not quiet:
        first, *table = headline.split("\n")
        print(f"{c.task}: {first} [{time.perf_counter() - start:.2f}s]")
        for line in table:
            print(line)
    return status


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="ldpkit", description="Small-noise large deviation experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one experiment config")
    r.add_argument("--config", required=True, help="path to the JSON experiment config")
    r.add_argument("--out", default=None, help="output directory (overrides the config)")
    r.add_argument("--threads", type=int, default=1, help="worker threads for Monte Carlo")
    r.add_argument("--quiet", action="store_true", help="suppress the summary line")
    args = parser.parse_args(argv)
    return run(args.config, args.out, args.threads, args.quiet)


if __name__ == "__main__":
    sys.exit(main())
