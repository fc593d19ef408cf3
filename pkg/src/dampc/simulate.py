"""Closed-loop runs of the dual, passive and known-parameter controllers, plus batch studies.

Every run records one row per step t = 0..T. Randomness comes from a single
master seed split with counter-based generators, so run ``i`` of a batch is
reproducible on its own and independent of worker scheduling.
"""

from __future__ import annotations

import csv
import io
import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from dampc.backend import OPTIMAL
from dampc.errors import ControllerInfeasible, DampcError, SetpointUnderdetermined
from dampc.identify import DEFAULT_MU, DEFAULT_TAU, IdentState, identification_step
from dampc.model import eval_matrices
from dampc.opt_engine import (
    FALLBACK_USED,
    TERMINAL_REUSE,
    EngineOptions,
    assemble_dampc,
    make_step,
    max_violation,
    plan_from_x,
    shift_solution,
    solve_successive,
    verify_plan,
    warm_vector,
)
from dampc.polytope import Polytope
from dampc.tube_builder import offline_terminal_design

CONTROLLERS = ("dual", "passive", "oracle")
CONTROLLER_NAMES = {"dual": "DAMPC", "passive": "PAMPC", "oracle": "FHOCP"}

__all__ = [
    "CONTROLLERS",
    "SimOptions",
    "SimTrace",
    "true_setpoints",
    "true_setpoint_cost",
    "stage_costs",
    "run_closed_loop",
    "fhocp_oracle_step",
    "sample_theta",
    "sample_disturbances",
    "run_rng",
    "BatchResult",
    "batch_compare",
]


@dataclass(frozen=True)
class SimOptions:
    engine: EngineOptions = EngineOptions()
    tau: int = DEFAULT_TAU
    mu: float = DEFAULT_MU
    x0: Optional[tuple] = None
    # passive and oracle controllers may use the approximation independently of the dual one
    approx_passive: Optional[bool] = None
    approx_oracle: Optional[bool] = None

    def engine_for(self, controller):
        flag = {"passive": self.approx_passive, "oracle": self.approx_oracle}.get(controller)
        return self.engine if flag is None else replace(self.engine, approx=bool(flag))


# ------------------------------------------------------------------ traces


@dataclass
class SimTrace:
    """Per-step log of one closed-loop run (t = 0..T)."""

    controller: str
    theta_star: np.ndarray
    x: np.ndarray
    u: np.ndarray
    w: np.ndarray
    r: np.ndarray
    stage_cost: np.ndarray
    status: list
    outer_iters: np.ndarray
    h_theta: np.ndarray
    theta_bar: np.ndarray
    H_theta: np.ndarray
    shift_violation: np.ndarray
    plan_violation: np.ndarray
    solve_time: np.ndarray = field(default=None, repr=False)

    @property
    def T(self):
        return len(self.x) - 1

    @property
    def total_cost(self):
        return float(np.sum(self.stage_cost))

    def columns(self):
        n, m, ny = self.x.shape[1], self.u.shape[1], self.r.shape[1]
        cols = ["t"]
        cols += [f"x{i}" for i in range(n)] + [f"u{i}" for i in range(m)] + [f"w{i}" for i in range(n)]
        cols += [f"r{i}" for i in range(ny)] + ["stage_cost", "status", "outer_iters"]
        cols += [f"h_theta{i}" for i in range(self.h_theta.shape[1])]
        cols += [f"theta_bar{i}" for i in range(self.theta_bar.shape[1])]
        return cols + ["shift_violation", "plan_violation"]

    def to_csv(self, path=None):
        """Write (or return) the trace; header comments carry the run metadata."""
        buf = io.StringIO()
        buf.write(f"# controller={self.controller}\n")
        buf.write("# theta_star=" + " ".join(_fmt(v) for v in self.theta_star) + "\n")
        for row in self.H_theta:
            buf.write("# H_theta=" + " ".join(_fmt(v) for v in row) + "\n")
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(self.columns())
        for t in range(len(self.x)):
            row = [str(t)]
            for arr in (self.x[t], self.u[t], self.w[t], self.r[t]):
                row += [_fmt(v) for v in arr]
            row += [_fmt(self.stage_cost[t]), self.status[t], str(int(self.outer_iters[t]))]
            row += [_fmt(v) for v in self.h_theta[t]] + [_fmt(v) for v in self.theta_bar[t]]
            row += [_fmt(self.shift_violation[t]), _fmt(self.plan_violation[t])]
            wr.writerow(row)
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, path):
        meta, H = {}, []
        lines = []
        with open(path) as fh:
            for line in fh:
                if line.startswith("# "):
                    key, _, val = line[2:].rstrip("\n").partition("=")
                    if key == "H_theta":
                        H.append([float(v) for v in val.split()])
                    else:
                        meta[key] = val
                else:
                    lines.append(line)
        rows = list(csv.reader(lines))
        header, body = rows[0], rows[1:]

        def block(prefix):
            idx = [i for i, h in enumerate(header) if h.startswith(prefix) and h[len(prefix) :].isdigit()]
            return np.array([[float(r[i]) for i in idx] for r in body]).reshape(len(body), len(idx))

        col = {h: i for i, h in enumerate(header)}
        return cls(
            controller=meta.get("controller", ""),
            theta_star=np.array([float(v) for v in meta.get("theta_star", "").split()]),
            x=block("x"),
            u=block("u"),
            w=block("w"),
            r=block("r"),
            stage_cost=np.array([float(r[col["stage_cost"]]) for r in body]),
            status=[r[col["status"]] for r in body],
            outer_iters=np.array([int(r[col["outer_iters"]]) for r in body]),
            h_theta=block("h_theta"),
            theta_bar=block("theta_bar"),
            H_theta=np.array(H),
            shift_violation=np.array([float(r[col["shift_violation"]]) for r in body]),
            plan_violation=np.array([float(r[col["plan_violation"]]) for r in body]),
        )


def _fmt(v):
    v = float(v)
    return "nan" if np.isnan(v) else repr(v)


# ------------------------------------------------------------------ true setpoints and cost


def true_setpoints(model, theta_star, x0=None, refs=None):
    """(x*, u*) over t = 0..T from the true dynamics, the references and x*_0 = x0.

    The chain ends in an equilibrium. Returns (xs, us, residual, underdetermined);
    the minimum-norm solution is used when the rows do not pin every entry.
    """
    refs = model.refs if refs is None else np.atleast_2d(refs)
    T = len(refs) - 1
    n, m = model.n, model.m
    x0 = np.zeros(n) if x0 is None else np.asarray(x0, float)
    A, B = eval_matrices(model, theta_star)
    nb = n + m
    nv = (T + 1) * nb
    rows, rhs = [], []
    R = np.zeros((n, nv))
    R[:, :n] = np.eye(n)
    rows.append(R)
    rhs.append(x0)
    for t in range(T + 1):
        o = t * nb
        R = np.zeros((model.n_y, nv))
        R[:, o : o + n] = model.C
        rows.append(R)
        rhs.append(refs[t])
        R = np.zeros((n, nv))
        R[:, o : o + n] = A if t < T else A - np.eye(n)
        R[:, o + n : o + nb] = B
        if t < T:
            R[:, o + nb : o + nb + n] = -np.eye(n)
        rows.append(R)
        rhs.append(np.zeros(n))
    M, b = np.vstack(rows), np.concatenate(rhs)
    sol, _, rank, _ = np.linalg.lstsq(M, b, rcond=None)
    under = rank < nv
    if under:
        warnings.warn("true setpoints not unique; using the minimum-norm solution", SetpointUnderdetermined, stacklevel=2)
    resid = float(np.max(np.abs(M @ sol - b)))
    sol = sol.reshape(T + 1, nb)
    return sol[:, :n], sol[:, n:], resid, bool(under)


def stage_costs(model, x, u, r, u_star):
    """||Q (C x_t - r_t)||_inf + ||R (u_t - u*_t)||_inf per step."""
    out = np.abs((np.asarray(x) @ model.C.T - r) @ model.Q.T).max(axis=1)
    inp = np.abs((np.asarray(u) - u_star) @ model.R.T).max(axis=1)
    return out + inp


def true_setpoint_cost(model, theta_star, trace: SimTrace, x0=None):
    """Accumulated tracking cost of a trace against the true setpoints."""
    x0 = trace.x[0] if x0 is None else x0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SetpointUnderdetermined)
        _, us, _, _ = true_setpoints(model, theta_star, x0, trace.r)
    return float(np.sum(stage_costs(model, trace.x, trace.u, trace.r, us)))


# ------------------------------------------------------------------ controllers


@dataclass
class StepOutcome:
    u: np.ndarray
    status: str
    outer_iters: int
    shift_violation: float
    plan_violation: float
    solve_time: float
    plan: object = None
    step: object = None


class _Receding:
    """Dual or passive adaptive controller; keeps the previous plan for the shifted candidate."""

    def __init__(self, model, design, mode, engine: EngineOptions, terminal_sets=None):
        self.model, self.design, self.mode, self.opts = model, design, mode, engine
        self.prev = None
        self.terminal_sets = terminal_sets
        if mode == "passive" and terminal_sets is None:
            self.terminal_sets = offline_terminal_design(model, design)

    def _tuple(self, k):
        if k + self.model.N >= self.model.T:
            return None
        return self.terminal_sets[k] if k < len(self.terminal_sets) else None

    def _make(self, k, x, ident, tt=None):
        return make_step(self.model, self.design, k, x, ident.H_theta, ident.h_theta, ident.theta_bar, self.mode, self.opts, terminal_tuple=tt)

    def step(self, k, x, ident) -> StepOutcome:
        t0 = time.perf_counter()
        status = OPTIMAL
        prev_tuple = None if self.prev is None or self.prev.xt is None else (self.prev.xt, self.prev.ut, self.prev.at)
        tt = None
        if self.mode == "passive" and k + self.model.N < self.model.T:
            tt = self._tuple(k)
            if tt is None:
                if prev_tuple is None:
                    raise ControllerInfeasible("no terminal set available at the first step", k)
                tt, status = prev_tuple, TERMINAL_REUSE
        step = self._make(k, x, ident, tt)
        cand, shift_viol = None, np.nan
        if self.prev is not None:
            cand_step = step if self.mode == "dual" or prev_tuple is None else self._make(k, x, ident, prev_tuple)
            cand = shift_solution(self.prev, cand_step)
            shift_viol = max_violation(verify_plan(cand, cand_step))
        program = assemble_dampc(step)
        warm = []
        if cand is not None and self.mode == "dual":
            warm.append(warm_vector(program, cand))
        res = solve_successive(program, self.opts, warm)
        if res.status != OPTIMAL and self.mode == "passive" and prev_tuple is not None and status != TERMINAL_REUSE and tt is not None:
            step = self._make(k, x, ident, prev_tuple)
            program = assemble_dampc(step)
            res = solve_successive(program, self.opts)
            status = TERMINAL_REUSE
        if res.status == OPTIMAL:
            plan = plan_from_x(program, res.x)
        elif cand is not None:
            plan, status, step = cand, FALLBACK_USED, cand_step
        else:
            raise ControllerInfeasible(f"{CONTROLLER_NAMES[self.mode]} infeasible at k={k}: {res.status}", k)
        plan_viol = max_violation(verify_plan(plan, step))
        self.prev = plan
        return StepOutcome(plan.input(x, self.design.K), status, res.outer_iters, shift_viol, plan_viol, time.perf_counter() - t0, plan, step)


class _Oracle:
    """Known-parameter shrinking-horizon tube controller."""

    def __init__(self, model, design, theta_star, engine: EngineOptions, x0):
        self.model, self.design, self.opts = model, design, engine
        p = model.p
        self.H = np.vstack([np.eye(p), -np.eye(p)])
        ts = np.asarray(theta_star, float)
        self.h = np.concatenate([ts, -ts])
        self.theta_star = ts
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", SetpointUnderdetermined)
            xs, us, _, _ = true_setpoints(model, ts, x0)
        self.pins = (xs, us)
        self.vm = None
        self.prev = None

    def make(self, k, x):
        step = make_step(self.model, self.design, k, x, self.H, self.h, self.theta_star, "oracle", self.opts, pins=self.pins, vm=self.vm)
        self.vm = step.vm
        return step

    def step(self, k, x, ident=None) -> StepOutcome:
        t0 = time.perf_counter()
        step = self.make(k, x)
        cand, shift_viol = None, np.nan
        if self.prev is not None:
            cand = shift_solution(self.prev, step)
            shift_viol = max_violation(verify_plan(cand, step))
        program = assemble_dampc(step)
        res = solve_successive(program, self.opts)
        status = OPTIMAL
        if res.status == OPTIMAL:
            plan = plan_from_x(program, res.x)
        elif cand is not None:
            plan, status = cand, FALLBACK_USED
        else:
            raise ControllerInfeasible(f"FHOCP infeasible at k={k}: {res.status}", k)
        plan_viol = max_violation(verify_plan(plan, step))
        self.prev = plan
        return StepOutcome(plan.input(x, self.design.K), status, res.outer_iters, shift_viol, plan_viol, time.perf_counter() - t0, plan, step)


def fhocp_oracle_step(model, design, theta_star, x_k, k, options=EngineOptions(), x0=None):
    """First input of the known-parameter problem over the remaining horizon T - k."""
    ctrl = _Oracle(model, design, theta_star, options, np.zeros(model.n) if x0 is None else x0)
    return ctrl.step(k, np.asarray(x_k, float)).u


def _controller(model, design, controller, theta_star, options: SimOptions, x0, terminal_sets):
    engine = options.engine_for(controller)
    if controller == "oracle":
        return _Oracle(model, design, theta_star, engine, x0)
    if controller in ("dual", "passive"):
        return _Receding(model, design, controller, engine, terminal_sets if controller == "passive" else None)
    raise ValueError(f"unknown controller {controller!r}")


def run_closed_loop(model, design, controller, theta_star, w_sequence, options=SimOptions(), terminal_sets=None, plan_log=None) -> SimTrace:
    """Measure, identify, solve, apply and propagate for t = 0..T with the true parameter.

    If ``plan_log`` is a list, every applied ``(StepData, Plan)`` pair is appended to it.
    """
    T, n = model.T, model.n
    w_sequence = np.asarray(w_sequence, float)
    if w_sequence.shape != (T + 1, n):
        raise ValueError(f"disturbance sequence must have shape {(T + 1, n)}")
    theta_star = np.asarray(theta_star, float)
    x0 = np.zeros(n) if options.x0 is None else np.asarray(options.x0, float)
    if model.x0 is not None and options.x0 is None:
        x0 = np.asarray(model.x0, float)
    A, B = eval_matrices(model, theta_star)
    ident = IdentState.initial(model, options.tau, options.mu)
    ctrl = _controller(model, design, controller, theta_star, options, x0, terminal_sets)
    xs, us, hs, tbs, statuses, iters, sv, pv, st = [], [], [], [], [], [], [], [], []
    x = x0
    for k in range(T + 1):
        hs.append(ident.h_theta.copy())
        tbs.append(ident.theta_bar.copy())
        out = ctrl.step(k, x, ident)
        if plan_log is not None:
            plan_log.append((out.step, out.plan))
        xs.append(x)
        us.append(np.asarray(out.u, float))
        statuses.append(out.status)
        iters.append(out.outer_iters)
        sv.append(out.shift_violation)
        pv.append(out.plan_violation)
        st.append(out.solve_time)
        xn = A @ x + B @ out.u + w_sequence[k]
        if k < T:
            ident = identification_step(model, ident, x, out.u, xn)
        x = xn
    X, U = np.array(xs), np.array(us)
    refs = np.asarray(model.refs, float)[: T + 1]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SetpointUnderdetermined)
        _, u_star, _, _ = true_setpoints(model, theta_star, x0, refs)
    return SimTrace(
        controller=controller,
        theta_star=theta_star,
        x=X,
        u=U,
        w=w_sequence,
        r=refs,
        stage_cost=stage_costs(model, X, U, refs, u_star),
        status=statuses,
        outer_iters=np.array(iters),
        h_theta=np.array(hs),
        theta_bar=np.array(tbs),
        H_theta=np.array(ident.H_theta),
        shift_violation=np.array(sv),
        plan_violation=np.array(pv),
        solve_time=np.array(st),
    )


# ------------------------------------------------------------------ sampling


def run_rng(master_seed, *key):
    """Counter-based generator for the stream identified by ``key``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(master_seed), *map(int, key)])))


def _uniform_in(P: Polytope, rng, size):
    """Rejection sampling from the bounding box of P."""
    V = P.vertices
    lo, hi = V.min(axis=0), V.max(axis=0)
    out = []
    while len(out) < size:
        cand = rng.uniform(lo, hi, size=(max(size, 8), len(lo)))
        ok = np.all(cand @ P.H.T <= P.h + 1e-12, axis=1)
        out.extend(cand[ok])
    return np.array(out[:size])


def sample_theta(model, master_seed, i):
    return _uniform_in(model.Theta0, run_rng(master_seed, 0, i), 1)[0]


def sample_disturbances(model, master_seed, i, j):
    return _uniform_in(model.W, run_rng(master_seed, 1, i, j), model.T + 1)


# ------------------------------------------------------------------ batches


SUMMARY_COLUMNS = ["run", "theta_idx", "noise_idx", "controller", "cost", "fallbacks", "terminal_reuse", "max_shift_violation", "max_plan_violation", "error"]


@dataclass
class BatchResult:
    rows: list
    traces: dict

    def costs(self, controller):
        """Costs by run id for successful runs of one controller."""
        return {r["run"]: r["cost"] for r in self.rows if r["controller"] == controller and not r["error"]}

    def paired(self, a, b):
        ca, cb = self.costs(a), self.costs(b)
        runs = sorted(set(ca) & set(cb))
        return np.array([ca[r] for r in runs]), np.array([cb[r] for r in runs])

    def aggregate(self):
        out = {}
        for c in sorted({r["controller"] for r in self.rows}):
            vals = np.array(list(self.costs(c).values()))
            failed = sum(1 for r in self.rows if r["controller"] == c and r["error"])
            if vals.size:
                q = np.quantile(vals, [0.1, 0.25, 0.5, 0.75, 0.9])
                out[c] = dict(n=int(vals.size), failed=failed, mean=float(vals.mean()), median=float(q[2]), q10=float(q[0]), q25=float(q[1]), q75=float(q[3]), q90=float(q[4]))
            else:
                out[c] = dict(n=0, failed=failed)
        return out

    def per_theta(self, controller):
        """Mean cost per parameter draw."""
        acc = {}
        for r in self.rows:
            if r["controller"] == controller and not r["error"]:
                acc.setdefault(r["theta_idx"], []).append(r["cost"])
        return {k: float(np.mean(v)) for k, v in sorted(acc.items())}

    def write(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "summary.csv"), "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(SUMMARY_COLUMNS)
            for r in self.rows:
                wr.writerow([r["run"], r["theta_idx"], r["noise_idx"], r["controller"], _fmt(r["cost"]), r["fallbacks"], r["terminal_reuse"], _fmt(r["max_shift_violation"]), _fmt(r["max_plan_violation"]), r["error"]])
        with open(os.path.join(out_dir, "summary_footer.csv"), "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            keys = ["n", "failed", "mean", "median", "q10", "q25", "q75", "q90"]
            wr.writerow(["controller"] + keys)
            for c, agg in self.aggregate().items():
                wr.writerow([c] + [_fmt(agg[k]) if k in agg and k not in ("n", "failed") else agg.get(k, "") for k in keys])
        for (c, run), tr in sorted(self.traces.items()):
            tr.to_csv(os.path.join(out_dir, f"trace_{c}_{run:04d}.csv"))


def _run_one(args):
    model, design, controller, i, j, run, master_seed, options, terminal_sets = args
    theta = sample_theta(model, master_seed, i)
    w = sample_disturbances(model, master_seed, i, j)
    row = dict(run=run, theta_idx=i, noise_idx=j, controller=controller, cost=np.nan, fallbacks=0, terminal_reuse=0, max_shift_violation=np.nan, max_plan_violation=np.nan, error="")
    try:
        tr = run_closed_loop(model, design, controller, theta, w, options, terminal_sets)
    except DampcError as exc:
        row["error"] = f"{type(exc).__name__}: {exc}".replace("\n", " ")
        return row, None
    row.update(
        cost=tr.total_cost,
        fallbacks=tr.status.count(FALLBACK_USED),
        terminal_reuse=tr.status.count(TERMINAL_REUSE),
        max_shift_violation=float(np.nanmax(tr.shift_violation)) if np.isfinite(tr.shift_violation).any() else 0.0,
        max_plan_violation=float(np.max(tr.plan_violation)),
    )
    return row, tr


def batch_compare(model, design, n_theta_draws, n_noise_draws, controllers=CONTROLLERS, master_seed=0, options=SimOptions(), jobs=1, out_dir=None) -> BatchResult:
    """Run every controller on identical (theta*, disturbance) draws.

    Run id ``i * n_noise_draws + j`` uses parameter draw i and disturbance draw j.
    Failures are recorded per run; results are sorted by (run, controller).
    """
    terminal_sets = offline_terminal_design(model, design) if "passive" in controllers else None
    tasks = []
    for i in range(n_theta_draws):
        for j in range(n_noise_draws):
            run = i * n_noise_draws + j
            for c in controllers:
                tasks.append((model, design, c, i, j, run, master_seed, options, terminal_sets))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_run_one, tasks))
    else:
        results = [_run_one(t) for t in tasks]
    order = {c: n for n, c in enumerate(controllers)}
    results.sort(key=lambda rt: (rt[0]["run"], order[rt[0]["controller"]]))
    out = BatchResult([r for r, _ in results], {(r["controller"], r["run"]): tr for r, tr in results if tr is not None})
    if out_dir is not None:
        out.write(out_dir)
    return out
