"""Program assembly, the block-coordinate bilinear solve, shifted candidates and exact checks.

Three controller modes share one assembly path:

* ``dual``: robust tube, online terminal set, predicted tube and cost over it;
* ``passive``: robust tube, precomputed terminal homothet, cost over the robust tube;
* ``oracle``: singleton parameter set, pinned true setpoints, horizon to T.

The bilinear program is solved by alternating two LPs. With the predicted-set
multipliers fixed every row is linear in the rest; with inputs and setpoints
fixed every row is linear in the multipliers. Each iterate is feasible for the
exact program, so the objective is non-increasing.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import scipy.sparse as sp

from dampc.backend import (
    INFEASIBLE,
    NUMERICAL_FAILURE,
    OPTIMAL,
    ConvexProblem,
    SolveResult,
    lp,
    solve_convex,
)
from dampc.dual_cost import (
    predict_nominal,
    predicted_set_exprs,
    predicted_tube_constraints,
    stage_cost_bruteforce,
    stage_cost_rows,
    terminal_cost_rows,
)
from dampc.errors import InfeasibleSet
from dampc.lambda_approx import VertexMultipliers, precompute_vertex_multipliers
from dampc.layout import Aff, ConstraintBatch, Layout, Skeleton, flatten
from dampc.model import beta, eval_matrices
from dampc.tube_builder import (
    fixed_terminal_link,
    online_terminal_constraints,
    robust_tube_constraints,
    setpoint_constraints,
    setpoint_pins,
    solve_setpoints,
)

__all__ = [
    "ConvexProblem",
    "SolveResult",
    "solve_convex",
    "EngineOptions",
    "StepData",
    "Program",
    "Plan",
    "SuccessiveResult",
    "make_step",
    "assemble_dampc",
    "solve_successive",
    "plan_from_x",
    "shift_solution",
    "verify_plan",
    "dump_program",
    "warm_vector",
    "FALLBACK_USED",
    "TERMINAL_REUSE",
]

FALLBACK_USED = "FallbackUsed"
TERMINAL_REUSE = "TerminalReuse"
MODES = ("dual", "passive", "oracle")


@dataclass(frozen=True)
class EngineOptions:
    approx: bool = False
    mu_theta: float = 1.0
    max_outer: int = 15
    rel_tol: float = 1e-6
    residual_tol: float = 1e-6
    probe_scale: float = 0.25
    dump_dir: Optional[str] = None


@dataclass
class StepData:
    """Everything one solve at time k depends on."""

    model: object
    design: object
    k: int
    x_k: np.ndarray
    H_theta: np.ndarray
    h_theta: np.ndarray
    theta_bar: np.ndarray
    mode: str
    Np: int
    terminal: bool
    vm: Optional[VertexMultipliers] = None
    terminal_tuple: Optional[tuple] = None
    pins: Optional[tuple] = None

    @property
    def approx(self):
        return self.vm is not None

    @property
    def refs(self):
        return self.model.refs[self.k : self.k + self.Np + 1]

    @property
    def n_transitions(self):
        return min(self.model.N_theta, self.Np) if self.mode == "dual" else 0


def make_step(model, design, k, x_k, H_theta, h_theta, theta_bar, mode, options=EngineOptions(), terminal_tuple=None, pins=None, vm=None):
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if not 0 <= k <= model.T:
        raise ValueError("time index outside [0, T]")
    if mode == "oracle":
        Np, terminal = model.T - k, False
    else:
        Np = min(model.N, model.T - k)
        terminal = k + model.N < model.T
    if mode == "passive" and terminal and terminal_tuple is None:
        raise ValueError("passive mode needs a terminal tuple")
    if mode == "oracle" and pins is None:
        raise ValueError("oracle mode needs pinned setpoints")
    H_theta = np.asarray(H_theta, float)
    h_theta = np.asarray(h_theta, float)
    if options.approx and vm is None:
        vm = precompute_vertex_multipliers(model, design, H_theta, h_theta, options.mu_theta)
    if not options.approx:
        vm = None
    return StepData(
        model, design, k, np.asarray(x_k, float), H_theta, h_theta, np.asarray(theta_bar, float), mode, Np, terminal, vm,
        terminal_tuple if terminal else None, pins,
    )


@dataclass
class Program:
    step: StepData
    layout: Layout
    batch: ConstraintBatch
    skeleton: Skeleton
    predicted: object = None


def build_layout(step: StepData) -> Layout:
    m_, d = step.model, step.design
    n, m, Np = m_.n, m_.m, step.Np
    nth = len(step.h_theta)
    lay = Layout()
    lay.add("z", (Np + 1, n))
    lay.add("alpha", (Np + 1,), lb=0.0)
    lay.add("v", (Np if step.terminal else Np + 1, m))
    lay.add("xbar", (Np + 1, n))
    lay.add("ubar", (Np + 1, m))
    mshape = (d.n_x, nth) if step.approx else (d.q, d.n_x, nth)
    mlb = -np.inf if step.approx else 0.0
    for l in range(Np):
        lay.add(f"Lam{l}", mshape, lb=mlb)
    if step.mode == "dual":
        if step.terminal:
            lay.add("xt", (n,))
            lay.add("ut", (m,))
            lay.add("at", (1,), lb=0.0)
            lay.add("Lt", mshape, lb=mlb)
        lay.add("zh", (Np + 1, n))
        lay.add("ah", (Np + 1,), lb=0.0)
        nw = m_.W.n_rows
        for l in range(Np):
            lay.add(f"Lh{l}", mshape, lb=mlb)
            L = min(l, step.n_transitions)
            if L:
                shp = (d.n_x, nw * L) if step.approx else (d.q, d.n_x, nw * L)
                lay.add(f"LhD{l}", shp, lb=0.0)
    lay.add("s", (Np + 1,), lb=0.0)
    lay.add("i", (Np + 1,), lb=0.0)
    return lay


def assemble_dampc(step: StepData) -> Program:
    """Rows, objective and bilinear terms of one step's program."""
    model, design = step.model, step.design
    lay = build_layout(step)
    b = ConstraintBatch()
    Np, k = step.Np, step.k
    refs = step.refs
    if step.pins is not None:
        xs, us = step.pins
        setpoint_pins(xs[k : k + Np + 1], us[k : k + Np + 1], lay, b)
    else:
        setpoint_constraints(model, step.theta_bar, refs, lay, b)
    robust_tube_constraints(model, design, step.H_theta, step.h_theta, step.x_k, lay, b, approx=step.vm)
    predicted = None
    if step.terminal:
        if step.mode == "dual":
            online_terminal_constraints(model, design, step.H_theta, step.h_theta, lay, b, approx=step.vm)
        else:
            xt, _, at = step.terminal_tuple
            fixed_terminal_link(lay, xt, at, b)
    if step.mode == "dual":
        nominal = predict_nominal(model, design.K, step.theta_bar, step.x_k, lay, step.n_transitions)
        predicted = predicted_set_exprs(model, step.H_theta, step.h_theta, step.theta_bar, nominal)
        predicted_tube_constraints(model, design, step.H_theta, step.h_theta, step.x_k, predicted, lay, b, approx=step.vm)
        cz, ca = lay["zh"], lay["ah"]
    else:
        cz, ca = lay["z"], lay["alpha"]
    c = np.zeros(lay.n)
    s, i = lay["s"], lay["i"]
    for l in range(Np + 1):
        xb, ub = Aff.var(lay["xbar"][l]), Aff.var(lay["ubar"][l])
        if l < Np or not step.terminal:
            stage_cost_rows(model, design, Aff.var(cz[l]), ca[l], xb, ub, Aff.var(lay["v"][l]), refs[l], s[l], i[l], b)
            weight = 1.0
        else:
            ut = Aff.var(lay["ut"]) if step.mode == "dual" else Aff.const_(step.terminal_tuple[1])
            terminal_cost_rows(model, design, Aff.var(cz[l]), ca[l], xb, ub, ut, refs[l], s[l], i[l], b)
            weight = beta(design.lambda_c, model.T - k - Np)
        c[s[l]] = c[i[l]] = weight
    return Program(step, lay, b, flatten(b, lay, c), predicted)


# ------------------------------------------------------------------ solving


@dataclass
class SuccessiveResult:
    status: str
    x: Optional[np.ndarray]
    objective: float
    outer_iters: int
    history: list = field(default_factory=list)
    residual: float = np.nan
    accepted: list = field(default_factory=list)
    wall_time: float = 0.0


def _lp(sk: Skeleton, A_ub, b_ub, A_eq, b_eq, lb, ub):
    return solve_convex(ConvexProblem(sk.c, A_ub, b_ub, A_eq, b_eq, lb, ub))


def _freeze_multipliers(sk: Skeleton, xlam_full):
    """Rows with the multiplier factor of each bilinear term fixed at xlam_full."""
    out = []
    for bil, A, bvec in ((sk.bil_ub, sk.A_ub, sk.b_ub), (sk.bil_eq, sk.A_eq, sk.b_eq)):
        if bil.rows.size == 0:
            out += [A, bvec]
            continue
        S = sp.csr_matrix((xlam_full[bil.lams], (bil.rows, bil.gs)), shape=(A.shape[0], sk.Gm.shape[0]))
        out += [(A + S @ sk.Gm).tocsr(), bvec - S @ sk.g0]
    return out


def _freeze_inputs(sk: Skeleton, x):
    """Rows with the affine factor of each bilinear term evaluated at x."""
    g = sk.Gm @ x + sk.g0
    out = []
    for bil, A, bvec in ((sk.bil_ub, sk.A_ub, sk.b_ub), (sk.bil_eq, sk.A_eq, sk.b_eq)):
        if bil.rows.size == 0:
            out += [A, bvec]
            continue
        S = sp.csr_matrix((g[bil.gs], (bil.rows, bil.lams)), shape=A.shape)
        out += [(A + S).tocsr(), bvec]
    return out


def solve_successive(program: Program, options=EngineOptions(), warm_starts=()) -> SuccessiveResult:
    """Alternate the multiplier-fixed and input-fixed LPs until the objective settles.

    Zero inputs are a stationary point of the alternation (no excitation, so the
    predicted-set multipliers earn nothing, so nothing rewards excitation). The
    first input-fixed LP is therefore also tried at a few probing perturbations
    of the first planned input and at every ``warm_starts`` entry (decision
    vectors of which only the input and setpoint entries are read); the best
    feasible start is kept.
    """
    import time

    t0 = time.perf_counter()
    sk = program.skeleton
    if options.dump_dir:
        os.makedirs(options.dump_dir, exist_ok=True)
        dump_program(program, os.path.join(options.dump_dir, f"step_{program.step.k:04d}_{program.step.mode}.txt"))
    if sk.n_bilinear == 0:
        res = _lp(sk, sk.A_ub, sk.b_ub, sk.A_eq, sk.b_eq, sk.lb, sk.ub)
        out = SuccessiveResult(res.status, res.x, res.objective, 1, [res.objective] if res.ok else [])
        if res.ok:
            out.residual = sk.max_violation(res.x)
        out.wall_time = time.perf_counter() - t0
        return out
    lam_cols = np.unique(np.concatenate([sk.bil_ub.lams, sk.bil_eq.lams]))
    g_cols = np.unique(sk.Gm.tocoo().col)

    def fix_multipliers(xsrc):
        lb, ub = sk.lb.copy(), sk.ub.copy()
        xlam = np.zeros(sk.n)
        xlam[lam_cols] = np.clip(xsrc[lam_cols], lb[lam_cols], ub[lam_cols])
        lb[lam_cols] = ub[lam_cols] = xlam[lam_cols]
        return _lp(sk, *_freeze_multipliers(sk, xlam), lb, ub)

    def fix_inputs(xsrc):
        lb, ub = sk.lb.copy(), sk.ub.copy()
        xg = np.zeros(sk.n)
        xg[g_cols] = np.clip(xsrc[g_cols], lb[g_cols], ub[g_cols])
        lb[g_cols] = ub[g_cols] = xg[g_cols]
        return _lp(sk, *_freeze_inputs(sk, xg), lb, ub)

    history, accepted = [], []
    best, best_obj = None, np.inf

    def accept(res):
        nonlocal best, best_obj
        if res.ok:
            history.append(res.objective)
            if sk.max_violation(res.x) <= options.residual_tol and res.objective < best_obj:
                best, best_obj = res.x, res.objective
                accepted.append(best_obj)
        return res.ok

    res = fix_multipliers(np.zeros(sk.n))
    if not accept(res):
        return SuccessiveResult(res.status, None, np.nan, 1, history, wall_time=time.perf_counter() - t0)
    x0 = res.x
    starts = [x0]
    for delta in _probes(program, options):
        xp = x0.copy()
        xp[program.layout["v"][0]] += delta
        starts.append(xp)
    starts.extend(np.asarray(w, float) for w in warm_starts)
    for xs in starts:
        accept(fix_inputs(xs))
    prev = best_obj
    outer = 1
    while outer < options.max_outer:
        outer += 1
        if not accept(fix_multipliers(best)):
            break
        if not accept(fix_inputs(best)):
            break
        if abs(prev - best_obj) <= options.rel_tol * max(1.0, abs(best_obj)):
            break
        prev = best_obj
    status = OPTIMAL if best is not None else NUMERICAL_FAILURE
    out = SuccessiveResult(status, best, best_obj if best is not None else np.nan, outer, history, accepted=accepted)
    if best is not None:
        out.residual = sk.max_violation(best)
    out.wall_time = time.perf_counter() - t0
    return out


def _probes(program, options):
    if options.probe_scale <= 0:
        return []
    span = input_span(program.step.model)
    out = []
    for i in range(program.step.model.m):
        for sign in (1.0, -1.0):
            d = np.zeros(program.step.model.m)
            d[i] = sign * options.probe_scale * span[i]
            out.append(d)
    return out


_SPAN_CACHE = {}


def input_span(model):
    """Half-width of the admissible range of each input over the constraint set."""
    key = id(model)
    if key not in _SPAN_CACHE:
        n, m = model.n, model.m
        A = np.hstack([model.F, model.G])
        span = np.zeros(m)
        for i in range(m):
            c = np.zeros(n + m)
            c[n + i] = 1.0
            hi = lp(-c, A_ub=A, b_ub=np.ones(A.shape[0]))
            lo = lp(c, A_ub=A, b_ub=np.ones(A.shape[0]))
            span[i] = 0.5 * (-hi.objective - lo.objective) if hi.ok and lo.ok else 1.0
        _SPAN_CACHE[key] = (model, span)
    return _SPAN_CACHE[key][1]


# ------------------------------------------------------------------ plans


@dataclass
class Plan:
    """Mode-independent solution with per-vertex multipliers (approximate blocks expanded)."""

    k: int
    mode: str
    Np: int
    terminal: bool
    z: np.ndarray
    alpha: np.ndarray
    v: np.ndarray
    xbar: np.ndarray
    ubar: np.ndarray
    Lam: list
    xt: Optional[np.ndarray] = None
    ut: Optional[np.ndarray] = None
    at: Optional[float] = None
    Lt: Optional[np.ndarray] = None
    zh: Optional[np.ndarray] = None
    ah: Optional[np.ndarray] = None
    Lh: Optional[list] = None
    objective: float = np.nan

    def input(self, x, K):
        return K @ (np.asarray(x, float) - self.xbar[0]) + self.v[0]


def plan_from_x(program: Program, x) -> Plan:
    step, lay = program.step, program.layout
    vm = step.vm
    val = lambda name: np.array(x[lay[name]])
    z, alpha = val("z"), val("alpha")

    def expand(block, a):
        return vm.expand(block, a) if vm is not None else block

    Lam = [expand(val(f"Lam{l}"), alpha[l]) for l in range(step.Np)]
    plan = Plan(step.k, step.mode, step.Np, step.terminal, z, alpha, val("v"), val("xbar"), val("ubar"), Lam)
    if step.terminal:
        if step.mode == "dual":
            plan.xt, plan.ut, plan.at = val("xt"), val("ut"), float(x[lay["at"][0]])
            plan.Lt = expand(val("Lt"), plan.at)
        else:
            xt, ut, at = step.terminal_tuple
            plan.xt, plan.ut, plan.at = np.array(xt, float), np.array(ut, float), float(at)
    if step.mode == "dual":
        plan.zh, plan.ah = val("zh"), val("ah")
        plan.Lh = []
        q = step.design.q
        for l in range(step.Np):
            Lth = expand(val(f"Lh{l}"), plan.ah[l])
            if f"LhD{l}" in lay:
                LD = val(f"LhD{l}")
                if vm is not None:
                    LD = np.broadcast_to(LD, (q,) + LD.shape)
                Lth = np.concatenate([Lth, LD], axis=2)
            plan.Lh.append(Lth)
    plan.objective = float(program.skeleton.c @ x)
    return plan


def certificate_multipliers(H_theta, h_theta, M):
    """Nonnegative Lambda with Lambda H_theta = M minimizing Lambda h_theta row by row."""
    out = np.zeros((M.shape[0], H_theta.shape[0]))
    for r, row in enumerate(M):
        res = lp(h_theta, A_eq=H_theta.T, b_eq=row, lb=np.zeros(H_theta.shape[0]))
        if res.status != OPTIMAL:
            raise InfeasibleSet(f"no multiplier certificate ({res.status})")
        out[r] = np.maximum(res.x, 0.0)
    return out


def _stage_D(model, design, c, a, cs, v):
    """Per-vertex (D^j (n x p), base^j = A0 x + B0 u) for tube c + a X0 under u = K(x - cs) + v."""
    X = c + a * design.verts
    U = (X - cs) @ design.K.T + v
    D = np.stack([np.column_stack([A @ x + B @ u for A, B in zip(model.A_list[1:], model.B_list[1:])]) for x, u in zip(X, U)])
    base = X @ model.A_list[0].T + U @ model.B_list[0].T
    return X, U, D.reshape(len(X), model.n, model.p), base


def shift_solution(prev: Plan, step: StepData) -> Plan:
    """Shifted candidate for time k+1 built from the plan at time k."""
    model, design = step.model, step.design
    K = design.K
    if step.k != prev.k + 1:
        raise ValueError("shift needs consecutive steps")
    Np = step.Np
    if step.pins is not None:
        xs, us = step.pins
        xbar, ubar = xs[step.k : step.k + Np + 1].copy(), us[step.k : step.k + Np + 1].copy()
    else:
        xbar, ubar, _ = solve_setpoints(model, step.theta_bar, step.refs)
    n_x = design.n_x
    z = np.zeros((Np + 1, model.n))
    alpha = np.zeros(Np + 1)
    v = np.zeros((Np if step.terminal else Np + 1, model.m))
    Lam = []
    for l in range(Np + 1):
        src = l + 1
        if src <= prev.Np:
            z[l], alpha[l] = prev.z[src], prev.alpha[src]
        else:
            z[l], alpha[l] = prev.xt, prev.at
        if l < v.shape[0]:
            if src < prev.v.shape[0]:
                v[l] = prev.v[src] + K @ (xbar[l] - prev.xbar[src])
            else:
                v[l] = prev.ut + K @ (xbar[l] - prev.xt)
        if l < Np:
            if src < prev.Np:
                Lam.append(prev.Lam[src].copy())
            else:
                Lam.append(_terminal_stage_multipliers(model, design, prev, step))
    if Np >= 1 and Np + 1 > prev.Np:
        # the last tube is the whole terminal homothet: shrink it to what the previous stage needs,
        # trying the setpoint input before the terminal one
        l = Np - 1
        for vl in (ubar[l], v[l]):
            a_min, L = _smallest_successor(model, design, z[l], alpha[l], xbar[l], vl, z[Np], step)
            X, U, _, _ = _stage_D(model, design, z[l], alpha[l], xbar[l], vl)
            if a_min <= alpha[Np] and np.max(X @ model.F.T + U @ model.G.T) <= 1.0:
                alpha[Np], Lam[l], v[l] = a_min, L, vl
                break
    plan = Plan(step.k, step.mode, Np, step.terminal, z, alpha, v, xbar, ubar, Lam)
    if step.terminal:
        plan.xt, plan.ut, plan.at = prev.xt.copy(), prev.ut.copy(), prev.at
        if prev.Lt is not None:
            plan.Lt = prev.Lt.copy()
    if step.mode == "dual":
        plan.zh, plan.ah = z.copy(), alpha.copy()
        nw = model.W.n_rows
        plan.Lh = []
        for l in range(Np):
            L = min(l, step.n_transitions)
            pad = np.zeros((design.q, n_x, nw * L))
            plan.Lh.append(np.concatenate([Lam[l], pad], axis=2))
    plan.objective = plan_cost(plan, step)
    return plan


def _smallest_successor(model, design, c, a, cs, v, cn, step):
    """Least scale an (with certificates) such that the tube law maps c + a X0 into cn + an X0."""
    _, _, D, base = _stage_D(model, design, c, a, cs, v)
    L = np.stack([certificate_multipliers(step.H_theta, step.h_theta, design.Hx @ Dj) for Dj in D])
    need = max(float(np.max(L[j] @ step.h_theta + design.Hx @ (base[j] - cn) + design.w_bar)) for j in range(len(D)))
    return max(need, 0.0), L


def _terminal_stage_multipliers(model, design, prev, step):
    """Multipliers for the stage that used to be the last tube, lying inside the terminal homothet."""
    if prev.Lt is not None and prev.at > 0:
        ratio = min(prev.alpha[prev.Np] / prev.at, 1.0)
        mu = design.origin_weights
        C = ratio * np.eye(design.q) + (1.0 - ratio) * mu[None, :]
        return np.einsum("ji,iab->jab", C, prev.Lt)
    if prev.Lt is not None:
        mu = design.origin_weights
        return np.broadcast_to(np.einsum("i,iab->ab", mu, prev.Lt), prev.Lt.shape).copy()
    _, _, D, _ = _stage_D(model, design, prev.xt, prev.alpha[prev.Np], prev.xt, prev.ut)
    return np.stack([certificate_multipliers(step.H_theta, step.h_theta, design.Hx @ Dj) for Dj in D])


def plan_cost(plan: Plan, step: StepData) -> float:
    model, design = step.model, step.design
    refs = step.refs
    cz, ca = (plan.zh, plan.ah) if plan.zh is not None else (plan.z, plan.alpha)
    total = 0.0
    for l in range(plan.Np + 1):
        if l < plan.Np or not plan.terminal:
            total += stage_cost_bruteforce(model, design, cz[l], ca[l], plan.xbar[l], plan.ubar[l], plan.v[l], refs[l])
        else:
            w = beta(design.lambda_c, model.T - step.k - plan.Np)
            total += w * stage_cost_bruteforce(model, design, cz[l], ca[l], plan.xbar[l], plan.ubar[l], plan.ut, refs[l])
    return float(total)


def _predicted_rows(model, design, plan: Plan, step: StepData):
    """Numeric predicted parameter-set rows (H, h) per stage from the plan's inputs."""
    A, B = eval_matrices(model, step.theta_bar)
    Hw, hw = model.W.H, model.W.h
    x = np.array(step.x_k, float)
    rows_H, rows_h = [], []
    for t in range(step.n_transitions):
        u = design.K @ (x - plan.xbar[t]) + plan.v[t]
        D = np.column_stack([Ai @ x + Bi @ u for Ai, Bi in zip(model.A_list[1:], model.B_list[1:])]).reshape(model.n, model.p)
        rows_H.append(-Hw @ D)
        rows_h.append(hw - Hw @ D @ step.theta_bar)
        x = A @ x + B @ u
    out = []
    for l in range(plan.Np):
        L = min(l, step.n_transitions)
        out.append((np.vstack([step.H_theta] + rows_H[:L]), np.concatenate([step.h_theta] + rows_h[:L])))
    return out


def _inclusion_violation(model, design, X, U, D, base, cn, an, Lam, H, h):
    """Worst violation of the vertex rows for one stage (inequalities, equalities, sign)."""
    Hx, wbar = design.Hx, design.w_bar
    ineq, eq, neg = 0.0, 0.0, 0.0
    for j in range(len(X)):
        L = Lam[j]
        eq = max(eq, float(np.max(np.abs(Hx @ D[j] - L @ H))))
        lhs = L @ h + Hx @ (base[j] - cn) - an + wbar
        ineq = max(ineq, float(np.max(lhs)))
        neg = max(neg, float(np.max(-L)))
    return max(ineq, 0.0), eq, max(neg, 0.0)


def verify_plan(plan: Plan, step: StepData) -> dict:
    """Worst violation per constraint family of the exact vertex-wise program."""
    model, design = step.model, step.design
    Hx = design.Hx
    viol = {}

    def put(tag, val):
        viol[tag] = max(viol.get(tag, 0.0), float(val))

    put("initial", np.max(Hx @ (step.x_k - plan.z[0]) - plan.alpha[0]))
    put("scale_sign", np.max(-plan.alpha))
    n_si = plan.Np + (0 if plan.terminal else 1)
    for l in range(n_si):
        X, U, _, _ = _stage_D(model, design, plan.z[l], plan.alpha[l], plan.xbar[l], plan.v[l])
        put("state_input", np.max(X @ model.F.T + U @ model.G.T - 1.0))
    for l in range(plan.Np):
        X, U, D, base = _stage_D(model, design, plan.z[l], plan.alpha[l], plan.xbar[l], plan.v[l])
        a, b, c = _inclusion_violation(model, design, X, U, D, base, plan.z[l + 1], plan.alpha[l + 1], plan.Lam[l], step.H_theta, step.h_theta)
        put("inclusion_ineq", a)
        put("inclusion_eq", b)
        put("multiplier_sign", c)
    if plan.terminal:
        put("terminal_link_center", np.max(np.abs(plan.z[plan.Np] - plan.xt)))
        put("terminal_link_scale", plan.alpha[plan.Np] - plan.at)
        if plan.Lt is not None:
            X, U, D, base = _stage_D(model, design, plan.xt, plan.at, plan.xt, plan.ut)
            put("terminal_state_input", np.max(X @ model.F.T + U @ model.G.T - 1.0))
            a, b, c = _inclusion_violation(model, design, X, U, D, base, plan.xt, plan.at, plan.Lt, step.H_theta, step.h_theta)
            put("terminal_ineq", a)
            put("terminal_eq", b)
            put("multiplier_sign", c)
    # setpoints
    if step.pins is not None:
        xs, us = step.pins
        k = step.k
        put("setpoint", np.max(np.abs(plan.xbar - xs[k : k + plan.Np + 1]), initial=0.0))
        put("setpoint", np.max(np.abs(plan.ubar - us[k : k + plan.Np + 1]), initial=0.0))
    else:
        A, B = eval_matrices(model, step.theta_bar)
        refs = step.refs
        for l in range(plan.Np + 1):
            put("setpoint", np.max(np.abs(model.C @ plan.xbar[l] - refs[l])))
            nxt = plan.xbar[l + 1] if l < plan.Np else plan.xbar[l]
            put("setpoint", np.max(np.abs(A @ plan.xbar[l] + B @ plan.ubar[l] - nxt)))
    if plan.zh is not None:
        put("pred_initial", np.max(Hx @ (step.x_k - plan.zh[0]) - plan.ah[0]))
        put("scale_sign", np.max(-plan.ah))
        for l, (H, h) in enumerate(_predicted_rows(model, design, plan, step)):
            X, U, D, base = _stage_D(model, design, plan.zh[l], plan.ah[l], plan.xbar[l], plan.v[l])
            a, b, c = _inclusion_violation(model, design, X, U, D, base, plan.zh[l + 1], plan.ah[l + 1], plan.Lh[l], H, h)
            put("pred_inclusion_ineq", a)
            put("pred_inclusion_eq", b)
            put("multiplier_sign", c)
        for l in range(plan.Np + 1):
            put("nest", np.max(Hx @ (plan.zh[l] - plan.z[l]) + plan.ah[l] - plan.alpha[l]))
    return {k: max(v, 0.0) for k, v in viol.items()}


def max_violation(viol: dict) -> float:
    return max(viol.values(), default=0.0)


def dump_program(program: Program, path):
    """Plain-text dump: one row per line with sense, tag, rhs and nonzeros."""
    sk = program.skeleton
    with open(path, "w") as fh:
        fh.write(f"# n={sk.n} ub={sk.A_ub.shape[0]} eq={sk.A_eq.shape[0]} bilinear={sk.n_bilinear}\n")
        for sense, A, b, tags in (("<=", sk.A_ub, sk.b_ub, sk.tags_ub), ("==", sk.A_eq, sk.b_eq, sk.tags_eq)):
            A = A.tocsr()
            for r in range(A.shape[0]):
                lo, hi = A.indptr[r], A.indptr[r + 1]
                nz = " ".join(f"{c}:{v:.17g}" for c, v in zip(A.indices[lo:hi], A.data[lo:hi]))
                fh.write(f"{sense} {tags[r]} {b[r]:.17g} | {nz}\n")


def warm_vector(program: Program, plan: Plan):
    """Decision vector carrying a plan's inputs and setpoints (other entries zero)."""
    lay = program.layout
    x = np.zeros(lay.n)
    nv = lay["v"].shape[0]
    if plan.v.shape[0] < nv or plan.xbar.shape[0] < lay["xbar"].shape[0]:
        raise ValueError("plan horizon shorter than the program")
    x[lay["v"]] = plan.v[:nv]
    x[lay["xbar"]] = plan.xbar[: lay["xbar"].shape[0]]
    x[lay["ubar"]] = plan.ubar[: lay["ubar"].shape[0]]
    return x
