"""Command-line entry point.

Every subcommand writes its outputs and a ``summary.json`` with one
pass/fail record per check into ``--out``.  Exit status: 0 when every
check passes, 2 on an invariant violation or failed check, 1 on usage or
configuration errors.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys

import numpy as np

from . import analysis as an
from .density import InvariantViolation, run_density, write_density_csv, write_moment_csv
from .expr import ExprError, parse_rate_expression
from .flow import EnergyInequalityError, MinimizerError, run_flow, write_energy_csv, write_flow_csv
from .harmonic import LimitStepError, run_limit, write_limit_csv
from .model import ConfigError, HypothesisError, describe, load_problem, make_grids, validate_hypotheses

EXIT_OK, EXIT_USAGE, EXIT_FAIL = 0, 1, 2


class Checks:
    def __init__(self):
        self.items = []

    def add(self, name, passed, value=None, bound=None):
        self.items.append({"name": name, "passed": bool(passed), "value": value, "bound": bound})

    @property
    def ok(self):
        return all(c["passed"] for c in self.items)


def _csv_to_json(text: str) -> dict:
    rows = list(csv.reader(io.StringIO(text)))
    header, body = rows[0], rows[1:]

    def conv(v):
        try:
            return int(v)
        except ValueError:
            return float(v)

    return {"header": header, "rows": [[conv(v) for v in r] for r in body]}


def _write(out, name, text, fmt):
    path = os.path.join(out, f"{name}.{fmt}")
    with open(path, "w", newline="\n") as fh:
        fh.write(text if fmt == "csv" else an.dumps_json(_csv_to_json(text)))
    return path


def _render(writer, obj) -> str:
    buf = io.StringIO()
    writer(obj, buf)
    return buf.getvalue()


def _floats(run, key, default):
    vals = run.floats(key)
    return default if vals is None else vals


def cmd_validate(p, n, run, args, checks):
    rep = validate_hypotheses(p, n)
    for c in rep.checks:
        checks.add(c.name, c.passed, c.detail)
    return {"validation": rep.as_dict()}


def cmd_density(p, n, run, args, checks):
    g = make_grids(p, n)
    mode = run.get("init", "cell_average")
    traj = run_density(p, g, mode=mode, stride=args.stride)
    _write(args.out, "density", _render(write_density_csv, traj), args.format)
    _write(args.out, "moments", _render(write_moment_csv, traj), args.format)
    s = traj.summary()
    checks.add("rho >= -1e-14", s["min_rho"] >= -1e-14, s["min_rho"], -1e-14)
    checks.add("s in [0, 1]", s["min_s"] >= -1e-14 and s["max_s"] <= 1 + 1e-14, [s["min_s"], s["max_s"]])
    checks.add("min s > mu0_min", s["min_s"] > p.bounds.mu0_min, s["min_s"], p.bounds.mu0_min)
    checks.add("moment residual <= 1e-13", s["max_moment_residual"] <= 1e-13, s["max_moment_residual"], 1e-13)
    cap = 10 * n.tol_age * p.T
    checks.add("discarded mass <= 10*tol_age*T", s["discarded_mass"] <= cap, s["discarded_mass"], cap)
    return {"density": s}


def cmd_flow(p, n, run, args, checks):
    g = make_grids(p, n)
    traj = run_flow(p, n, g, density_mode=run.get("init", "cell_average"), store_stride=args.stride)
    _write(args.out, "flow", _render(write_flow_csv, traj), args.format)
    _write(args.out, "energy", _render(write_energy_csv, traj), args.format)
    s = traj.summary()
    checks.add("unit constraint <= 1e-12", s["max_unit_defect"] <= 1e-12, s["max_unit_defect"], 1e-12)
    checks.add("lambda <= 1e-12", s["max_lambda"] <= 1e-12, s["max_lambda"], 1e-12)
    checks.add("L.z >= -1e-12", s["min_Ldotz"] >= -1e-12, s["min_Ldotz"], -1e-12)
    checks.add("energy chain", s["max_energy_excess"] <= s["tol_energy"], s["max_energy_excess"], s["tol_energy"])
    checks.add("E_N <= E_0", s["E_N"] <= s["E_0"], [s["E_N"], s["E_0"]])
    return {"flow": s}


def cmd_limit(p, n, run, args, checks):
    g = make_grids(p, n)
    times = np.arange(0, g.N + 1, args.stride) * g.delta_t
    traj = run_limit(p, n, g, times)
    _write(args.out, "limit", _render(write_limit_csv, traj), args.format)
    _write(args.out, "limit_moments", an.limit_moments_csv(p, g, times), args.format)
    defect = traj.max_unit_defect
    checks.add("unit constraint <= 1e-12", defect <= 1e-12, defect, 1e-12)
    checks.add("Dirichlet energy non-increasing", traj.max_energy_increase <= 1e-10, traj.max_energy_increase, 1e-10)
    return {"limit": {"dt": traj.dt, "steps": traj.steps, "samples": len(times)}}


def cmd_layer(p, n, run, args, checks):
    g = make_grids(p, n)
    fit = tuple(_floats(run, "layer_fit", [1.0, 5.0]))
    rep = an.initial_layer_report(p, g, fit)
    _write(args.out, "layer", an.layer_csv(rep), args.format)
    bound = -0.9 * p.bounds.zeta_min
    if rep["status"] == "exact":
        checks.add("layer mass identically zero", True, 0.0)
    else:
        checks.add("log-mass slope <= -0.9*zeta_min", rep["slope"] <= bound, rep["slope"], bound)
    return {"layer": {k: rep[k] for k in ("status", "slope", "mass0")}}


def _table_out(args, name, table):
    if args.format == "csv":
        an.emit(table, os.path.join(args.out, f"{name}.csv"), "csv")
    else:
        an.emit(table, os.path.join(args.out, f"{name}.json"), "json")


def cmd_sweep_eps(p, n, run, args, checks):
    eps = _floats(run, "eps_list", [p.epsilon, p.epsilon / 2, p.epsilon / 4])
    table = an.epsilon_sweep(
        p, n, eps, delta_a_scale=run.float("delta_a_scale"), sample_dt=run.float("sample_dt"),
        threads=args.threads, density_mode=run.get("init", "cell_average"),
    )
    _table_out(args, "sweep_eps", table)
    rows = table.rows
    for r in rows:
        checks.add(f"eps={r['epsilon']:g}: lambda <= 1e-12", r["max_lambda"] <= 1e-12, r["max_lambda"], 1e-12)
        checks.add(f"eps={r['epsilon']:g}: energy chain", r["max_energy_excess"] <= r["tol_energy"],
                   r["max_energy_excess"], r["tol_energy"])
    wanted = set(run.get("checks", ",".join(SWEEP_CHECKS)).replace(" ", "").split(","))
    unknown = wanted - set(SWEEP_CHECKS)
    if unknown:
        raise ValueError(f"unknown sweep check {sorted(unknown)[0]!r}; known: {', '.join(SWEEP_CHECKS)}")
    base_lam, base_h1 = rows[0]["lambda_l1_sup"], rows[0]["h1_time_sum"]
    if "lambda_bound" in wanted:
        checks.add("sup lambda_L1 <= 3x coarsest", all(r["lambda_l1_sup"] <= 3 * base_lam for r in rows),
                   [r["lambda_l1_sup"] / base_lam for r in rows], 3.0)
    if "time_derivative" in wanted:
        checks.add("time-derivative sum <= 3x coarsest", all(r["h1_time_sum"] <= 3 * base_h1 for r in rows),
                   [r["h1_time_sum"] / base_h1 for r in rows], 3.0)
    if "decay" in wanted:
        lz = table.ratios("Ldotz_l1")
        checks.add("L.z ratio per halving in [0.35, 0.75]", all(0.35 <= q <= 0.75 for q in lz), lz, [0.35, 0.75])
    if "z_ratio" in wanted:
        zr = table.ratios("err_z_c0")
        ok = all(q <= 0.8 for q in zr) and all(b < a for a, b in zip(table.values("err_z_c0"), table.values("err_z_c0")[1:]))
        checks.add("z error decreasing, ratio per halving <= 0.8 (empirical)", ok, zr, 0.8)
    if "rho_ratio" in wanted:
        rr = table.ratios("err_rho_weighted")
        checks.add("weighted density error ratio per halving <= 0.7", all(q <= 0.7 for q in rr), rr, 0.7)
    return {"sweep_eps": table.to_dict()}


def cmd_sweep_da(p, n, run, args, checks):
    das = _floats(run, "da_list", [n.delta_a, n.delta_a / 2, n.delta_a / 4])
    mode = run.get("init", "cell_average")
    table = an.delta_a_refinement(p, n, das, mode=mode, threads=args.threads)
    _table_out(args, "sweep_da", table)
    cfl = [r["cfl"] for r in table.rows]
    checks.add("delta_t = epsilon*delta_a", all(abs(c - 1.0) <= 1e-12 for c in cfl), cfl)
    if mode == "discrete_steady":
        errs = table.values("err_yt")
        checks.add("fixed point error <= 1e-12", all(e <= 1e-12 for e in errs), errs, 1e-12)
    else:
        orders = table.orders("err_yt")
        checks.add("observed order >= 0.85", all(o >= 0.85 for o in orders), orders, 0.85)
    return {"sweep_da": table.to_dict()}


def cmd_kernel(p, n, run, args, checks):
    psi = parse_rate_expression(run.get("psi", "exp(-a)"))
    eps = _floats(run, "eps_list", [p.epsilon])
    table = an.transposed_kernel(p, n, psi, eps, delta_a_scale=run.float("delta_a_scale"),
                                 threads=args.threads, mode=run.get("init", "cell_average"))
    _table_out(args, "kernel", table)
    gaps = table.values("gap")
    if len(gaps) > 1:
        factors = [a / b if b > 0 else math.inf for a, b in zip(gaps, gaps[1:])]
        checks.add("gap shrinks by >= 1.5 per halving", all(f >= 1.5 for f in factors), factors, 1.5)
    return {"kernel": table.to_dict()}


SWEEP_CHECKS = ("lambda_bound", "time_derivative", "decay", "z_ratio", "rho_ratio")

COMMANDS = {
    "validate": cmd_validate,
    "density": cmd_density,
    "flow": cmd_flow,
    "limit": cmd_limit,
    "layer": cmd_layer,
    "sweep-eps": cmd_sweep_eps,
    "sweep-da": cmd_sweep_da,
    "kernel": cmd_kernel,
}


def build_parser():
    ap = argparse.ArgumentParser(prog="delaymm", description="Delayed minimizing movements with age-structured memory")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="configuration file")
        sp.add_argument("--out", default=".", help="output directory")
        sp.add_argument("--format", choices=("csv", "json"), default="csv")
        sp.add_argument("--stride", type=int, default=1, help="store every N-th time slab")
        sp.add_argument("--threads", type=int, default=1, help="worker processes for sweeps")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    if args.stride < 1 or args.threads < 1:
        print("error: --stride and --threads must be positive", file=sys.stderr)
        return EXIT_USAGE
    try:
        with open(args.config) as fh:
            text = fh.read()
        p, n, run = load_problem(text, validate=args.command != "validate")
    except (OSError, ConfigError, ExprError, HypothesisError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    os.makedirs(args.out, exist_ok=True)
    checks = Checks()
    summary = {"command": args.command, "config": describe(p, n)}
    status = EXIT_OK
    try:
        summary.update(COMMANDS[args.command](p, n, run, args, checks))
    except (InvariantViolation, EnergyInequalityError, MinimizerError, LimitStepError) as exc:
        checks.add(type(exc).__name__, False, str(exc))
        print(f"invariant violation: {exc}", file=sys.stderr)
        status = EXIT_FAIL
    except (ValueError, ExprError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    summary["checks"] = checks.items
    summary["ok"] = checks.ok
    if args.command == "validate" and not checks.ok:
        status = EXIT_USAGE
    elif not checks.ok:
        status = EXIT_FAIL
    text = an.dumps_json(summary)
    with open(os.path.join(args.out, "summary.json"), "w", newline="\n") as fh:
        fh.write(text)
    for c in checks.items:
        print(f"{'PASS' if c['passed'] else 'FAIL'}  {c['name']}")
    return status


if __name__ == "__main__":
    sys.exit(main())
