"""Command line entry point: ``dampc {design,run,compare,verify} --config PATH``.

Exit codes: 0 success, 2 configuration error, 3 runtime or controller error,
4 verification failure. Errors are reported on stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import dataclasses
import glob
import json
import os
import sys
import warnings

import numpy as np

from dampc.config import build_design, build_model, parse_config, replace_section, sim_options
from dampc.errors import ConfigError, DampcError, SetpointUnderdetermined
from dampc.identify import IdentState, identification_step
from dampc.model import eval_matrices
from dampc.simulate import CONTROLLERS, SimTrace, batch_compare, run_closed_loop, sample_disturbances, sample_theta, stage_costs, true_setpoints

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_VERIFY = 0, 2, 3, 4

# tolerances of the trace checks
CONSTRAINT_TOL = 1e-7
CONTAIN_TOL = 1e-8
SHIFT_TOL = 1e-7
PLAN_TOL = 1e-6
COST_TOL = 1e-9
DYNAMICS_TOL = 1e-9
IDENT_TOL = 1e-6


def _parser():
    p = argparse.ArgumentParser(prog="dampc", description="Dual adaptive tube MPC experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, text in (
        ("design", "compute the feedback gain, tube shape and constants"),
        ("run", "one closed-loop run per controller"),
        ("compare", "batch comparison on shared parameter and disturbance draws"),
        ("verify", "re-check every invariant of emitted traces"),
    ):
        s = sub.add_parser(name, help=text)
        s.add_argument("--config", required=True, help="experiment configuration file")
        s.add_argument("--out", help="output directory (default: experiment.output_dir)")
        s.add_argument("--seed", type=int, help="master seed override")
        s.add_argument("--controllers", help="comma-separated subset of dual,passive,oracle")
        s.add_argument("--ntheta", type=int, help="lookahead override (replaces any sweep)")
        s.add_argument("--approx", choices=("on", "off"), help="tube-inclusion approximation override")
        s.add_argument("--jobs", type=int, help="worker processes")
        if name == "verify":
            s.add_argument("traces", nargs="*", help="trace files or directories (default: --out)")
        if name == "run":
            s.add_argument("--theta-index", type=int, default=0, help="parameter draw used for the run")
    return p


def _apply_overrides(cfg, args):
    exp = cfg.experiment
    changes = {}
    if args.seed is not None:
        changes["master_seed"] = int(args.seed)
    if args.controllers:
        changes["controllers"] = tuple(c.strip() for c in args.controllers.split(",") if c.strip())
    if args.jobs is not None:
        changes["jobs"] = int(args.jobs)
    if args.ntheta is not None:
        changes["ntheta_sweep"] = ()
        cfg = replace_section(cfg, "horizon", N_theta=int(args.ntheta))
    if args.out:
        changes["output_dir"] = args.out
    if changes:
        cfg = replace_section(cfg, "experiment", **changes)
    if args.approx is not None:
        cfg = replace_section(cfg, "solver", approx=args.approx == "on")
    from dampc.config import validate

    validate(cfg)
    bad = [c for c in cfg.experiment.controllers if c not in CONTROLLERS]
    if bad:
        raise ConfigError(f"unknown controllers {bad}")
    return cfg


def _fail(code, exc):
    print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit": code}), file=sys.stderr)
    return code


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        cfg = _apply_overrides(parse_config(args.config), args)
    except (ConfigError, OSError) as exc:
        return _fail(EXIT_CONFIG, exc)
    try:
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, exc)
    except DampcError as exc:
        return _fail(EXIT_RUNTIME, exc)


# ------------------------------------------------------------------ commands


def cmd_design(cfg, args):
    model = build_model(cfg)
    design = build_design(cfg, model)
    out = cfg.experiment.output_dir
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "design.txt")
    with open(path, "w") as fh:
        fh.write(format_design(design))
    print(json.dumps({"n_x": design.n_x, "q": design.q, "lambda_c": design.lambda_c, "lambda_margin": design.lambda_margin, "file": path}))
    return EXIT_OK


def format_design(design):
    def mat(name, M):
        M = np.atleast_2d(M)
        return f"{name} =\n" + "\n".join("    " + " ".join(repr(float(v)) for v in row) for row in M) + "\n"

    parts = [
        f"n_x = {design.n_x}\n",
        f"q = {design.q}\n",
        f"lambda_c = {design.lambda_c!r}\n",
        f"lambda_margin = {design.lambda_margin!r}\n",
        f"ff_bar = {design.ff_bar!r}\n",
        mat("K", design.K),
        mat("X0_H", design.Hx),
        mat("X0_vertices", design.verts),
        mat("f_bar", design.f_bar),
        mat("w_bar", design.w_bar),
    ]
    return "".join(parts)


def cmd_run(cfg, args):
    model = build_model(cfg)
    design = build_design(cfg, model)
    opts = sim_options(cfg)
    seed = cfg.experiment.master_seed
    i = args.theta_index
    theta = sample_theta(model, seed, i)
    w = sample_disturbances(model, seed, i, 0)
    out = cfg.experiment.output_dir
    os.makedirs(out, exist_ok=True)
    report = {}
    for c in cfg.experiment.controllers:
        tr = run_closed_loop(model, design, c, theta, w, opts)
        path = os.path.join(out, f"trace_{c}.csv")
        tr.to_csv(path)
        report[c] = {"cost": tr.total_cost, "file": path}
    print(json.dumps(report))
    return EXIT_OK


def _sweep(cfg):
    return cfg.experiment.ntheta_sweep or (cfg.horizon.N_theta,)


def cmd_compare(cfg, args):
    opts = sim_options(cfg)
    exp = cfg.experiment
    report = {}
    sweep = _sweep(cfg)
    for nt in sweep:
        model = build_model(cfg, N_theta=nt)
        design = build_design(cfg, model)
        ctrls = exp.controllers if nt == sweep[0] else tuple(c for c in exp.controllers if c == "dual")
        out = exp.output_dir if len(sweep) == 1 else os.path.join(exp.output_dir, f"ntheta_{nt}")
        res = batch_compare(model, design, exp.n_theta_draws, exp.n_noise_draws, ctrls, exp.master_seed, opts, exp.jobs, out)
        report[str(nt)] = res.aggregate()
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_verify(cfg, args):
    paths = []
    for p in args.traces or [cfg.experiment.output_dir]:
        if os.path.isdir(p):
            paths.extend(sorted(glob.glob(os.path.join(p, "**", "trace_*.csv"), recursive=True)))
        else:
            paths.append(p)
    if not paths:
        return _fail(EXIT_VERIFY, FileNotFoundError("no trace files to verify"))
    opts = sim_options(cfg)
    results = {}
    ok = True
    models = {}
    for path in paths:
        nt = _ntheta_of(path, cfg)
        if nt not in models:
            models[nt] = build_model(cfg, N_theta=nt)
        tr = SimTrace.from_csv(path)
        failures = verify_trace(models[nt], tr, opts.tau, opts.mu)
        results[path] = failures
        ok = ok and not failures
    print(json.dumps({"ok": ok, "traces": results}, sort_keys=True))
    return EXIT_OK if ok else EXIT_VERIFY


def _ntheta_of(path, cfg):
    parent = os.path.basename(os.path.dirname(os.path.abspath(path)))
    if parent.startswith("ntheta_") and parent[7:].isdigit():
        return int(parent[7:])
    return cfg.horizon.N_theta


def verify_trace(model, tr: SimTrace, tau=10, mu=1e-3):
    """Names of the violated invariants (empty when the trace is sound)."""
    bad = {}

    def flag(name, value):
        bad[name] = max(bad.get(name, 0.0), float(value))

    T = tr.T
    if tr.x.shape != (model.T + 1, model.n) or tr.u.shape != (model.T + 1, model.m):
        return {"shape": 1.0}
    cons = tr.x @ model.F.T + tr.u @ model.G.T - 1.0
    if cons.max() > CONSTRAINT_TOL:
        flag("constraint_satisfaction", cons.max())
    w_out = tr.w @ model.W.H.T - model.W.h
    if w_out.max() > CONTAIN_TOL:
        flag("disturbance_bound", w_out.max())
    A, B = eval_matrices(model, tr.theta_star)
    resid = tr.x[1:] - (tr.x[:-1] @ A.T + tr.u[:-1] @ B.T + tr.w[:-1])
    if np.abs(resid).max(initial=0.0) > DYNAMICS_TOL:
        flag("dynamics", np.abs(resid).max())
    H = tr.H_theta
    cont = tr.h_theta - (H @ tr.theta_star)[None, :]
    if (-cont).max() > CONTAIN_TOL:
        flag("parameter_containment", (-cont).max())
    dh = np.diff(tr.h_theta, axis=0)
    if dh.size and dh.max() > CONTAIN_TOL:
        flag("set_monotonicity", dh.max())
    # identification replay
    state = IdentState.initial(model, tau, mu)
    for t in range(T):
        if t > 0 and np.abs(state.h_theta - tr.h_theta[t]).max() > IDENT_TOL:
            flag("identification_replay", np.abs(state.h_theta - tr.h_theta[t]).max())
        try:
            state = identification_step(model, state, tr.x[t], tr.u[t], tr.x[t + 1])
        except DampcError:
            flag("identification_replay", np.inf)
            break
    # cost recomputation
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SetpointUnderdetermined)
        _, us, _, _ = true_setpoints(model, tr.theta_star, tr.x[0], tr.r)
    costs = stage_costs(model, tr.x, tr.u, tr.r, us)
    if np.abs(costs - tr.stage_cost).max() > COST_TOL:
        flag("cost_recomputation", np.abs(costs - tr.stage_cost).max())
    if np.abs(tr.r - np.asarray(model.refs)[: T + 1]).max() > 0:
        flag("reference", np.abs(tr.r - np.asarray(model.refs)[: T + 1]).max())
    sv = np.nan_to_num(tr.shift_violation, nan=0.0)
    if sv.max() > SHIFT_TOL:
        flag("shift_candidate", sv.max())
    if tr.plan_violation.max() > PLAN_TOL:
        flag("plan_feasibility", tr.plan_violation.max())
    return bad


COMMANDS = {"design": cmd_design, "run": cmd_run, "compare": cmd_compare, "verify": cmd_verify}


if __name__ == "__main__":
    sys.exit(main())
