"""Convex rows of the tube program: setpoints, robust homothetic tube, terminal set.

Block names expected in the layout (N' = len(z) - 1 stages):

    z (N'+1, n), alpha (N'+1,), v (N' or N'+1, m), xbar (N'+1, n), ubar (N'+1, m),
    Lam{l} per stage l < N', and for the online terminal set xt, ut, at, Lt.

Per-vertex multiplier blocks have shape (q, n_x, n_theta); aggregated blocks
(tube-inclusion approximation) have shape (n_x, n_theta).
"""

from __future__ import annotations

import numpy as np

from dampc.backend import OPTIMAL, ConvexProblem, solve_convex
from dampc.errors import InfeasibleSet
from dampc.layout import Aff, ConstraintBatch, Layout, flatten
from dampc.model import eval_matrices

# row tags
SP_DYN, SP_OUT, SP_EQ_DYN, SP_EQ_OUT, SP_PIN = "sp_dyn", "sp_out", "sp_equilibrium", "sp_eq_out", "sp_pin"
STATE_INPUT, INITIAL, INCL_INEQ, INCL_EQ = "state_input", "initial", "inclusion_ineq", "inclusion_eq"
TERM_STATE_INPUT, TERM_INEQ, TERM_EQ = "terminal_state_input", "terminal_ineq", "terminal_eq"
LINK_CENTER, LINK_SCALE, LINK_FIXED = "terminal_link_center", "terminal_link_scale", "terminal_link_fixed"


def horizon_of(layout: Layout):
    """(N', terminal present, final stage carries its own input)."""
    Np = layout["z"].shape[0] - 1
    return Np, "xt" in layout, layout["v"].shape[0] > Np


def law_expr(model, K, i, cx: Aff, cs: Aff, v: Aff) -> Aff:
    """E_i e = A_i cx + B_i (K (cx - cs) + v)."""
    A, B = model.A_list[i], model.B_list[i]
    return cx.lmul(A + B @ K) - cs.lmul(B @ K) + v.lmul(B)


def vertex_directions(model, design):
    """H_x (A_i + B_i K) x^j for i = 0..p, each (n_x, q)."""
    K, Hx, V = design.K, design.Hx, design.verts
    return [Hx @ (A + B @ K) @ V.T for A, B in zip(model.A_list, model.B_list)]


def stage_vars(layout, l):
    """Affine handles (center, setpoint, input) of robust stage l."""
    return Aff.var(layout["z"][l]), Aff.var(layout["xbar"][l]), Aff.var(layout["v"][l])


def vertex_inclusion_rows(model, design, H_theta, h_theta, cx, cs, v, a_col, cn, an_col, Lam, batch, tags, dirs=None):
    """Vertex-wise certificate that the tube law maps cx + a X0 into cn + an X0.

    Returns per-vertex (ub_rows, eq_rows); eq rows are ordered (parameter i, H_x row r).
    """
    Hx, wbar, p = design.Hx, design.w_bar, model.p
    K = design.K
    dirs = vertex_directions(model, design) if dirs is None else dirs
    Ee = [law_expr(model, K, i, cx, cs, v).lmul(Hx) for i in range(p + 1)]
    nxt = cn.lmul(Hx) + Aff.scalar_times(an_col, np.ones(design.n_x)) - wbar
    out_ub, out_eq = [], []
    for j in range(design.q):
        eq = Aff.stack([Ee[i + 1] + Aff.scalar_times(a_col, dirs[i + 1][:, j]) for i in range(p)])
        eq = eq - Aff.matvar(Lam[j], H_theta, order="F")
        out_eq.append(batch.eq(eq, tags[1]))
        ub = Aff.matvar(Lam[j], np.asarray(h_theta)[:, None]) + Ee[0] + Aff.scalar_times(a_col, dirs[0][:, j]) - nxt
        out_ub.append(batch.leq(ub, tags[0]))
    return out_ub, out_eq


def setpoint_constraints(model, theta_bar, refs_slice, layout, batch=None):
    """Estimated setpoint chain over the horizon and the equilibrium condition at its end."""
    batch = ConstraintBatch() if batch is None else batch
    A, B = eval_matrices(model, theta_bar)
    Np = layout["z"].shape[0] - 1
    refs_slice = np.atleast_2d(refs_slice)
    if refs_slice.shape[0] < Np + 1:
        raise ValueError("reference slice shorter than the horizon")
    xb, ub = layout["xbar"], layout["ubar"]
    for l in range(Np + 1):
        x, u = Aff.var(xb[l]), Aff.var(ub[l])
        out = x.lmul(model.C) - refs_slice[l]
        if l < Np:
            batch.eq(x.lmul(A) + u.lmul(B) - Aff.var(xb[l + 1]), SP_DYN)
            batch.eq(out, SP_OUT)
        else:
            batch.eq(x.lmul(A - np.eye(model.n)) + u.lmul(B), SP_EQ_DYN)
            batch.eq(out, SP_EQ_OUT)
    return batch


def setpoint_pins(xs, us, layout, batch=None):
    """Pin the setpoint blocks to given sequences (used by the known-parameter oracle)."""
    batch = ConstraintBatch() if batch is None else batch
    for l in range(layout["xbar"].shape[0]):
        batch.eq(Aff.var(layout["xbar"][l]) - xs[l], SP_PIN)
        batch.eq(Aff.var(layout["ubar"][l]) - us[l], SP_PIN)
    return batch


def solve_setpoints(model, theta_bar, refs_slice):
    """Numerical solution of the setpoint chain (least squares; exact when square)."""
    refs_slice = np.atleast_2d(refs_slice)
    Np = refs_slice.shape[0] - 1
    n, m, ny = model.n, model.m, model.n_y
    A, B = eval_matrices(model, theta_bar)
    nv = (Np + 1) * (n + m)
    rows, rhs = [], []

    def blk(l):
        return l * (n + m)

    for l in range(Np + 1):
        R = np.zeros((ny, nv))
        R[:, blk(l) : blk(l) + n] = model.C
        rows.append(R)
        rhs.append(refs_slice[l])
        R = np.zeros((n, nv))
        if l < Np:
            R[:, blk(l) : blk(l) + n] = A
            R[:, blk(l) + n : blk(l) + n + m] = B
            R[:, blk(l + 1) : blk(l + 1) + n] = -np.eye(n)
        else:
            R[:, blk(l) : blk(l) + n] = A - np.eye(n)
            R[:, blk(l) + n : blk(l) + n + m] = B
        rows.append(R)
        rhs.append(np.zeros(n))
    M, b = np.vstack(rows), np.concatenate(rhs)
    sol, *_ = np.linalg.lstsq(M, b, rcond=None)
    resid = float(np.max(np.abs(M @ sol - b), initial=0.0))
    sol = sol.reshape(Np + 1, n + m)
    return sol[:, :n], sol[:, n:], resid


def robust_tube_constraints(model, design, H_theta, h_theta, x_k, layout, batch=None, approx=None):
    """Robust tube rows for every stage; ``approx`` (VertexMultipliers) switches to aggregated multipliers."""
    from dampc.lambda_approx import aggregated_inclusion_rows

    batch = ConstraintBatch() if batch is None else batch
    Np, _, final_v = horizon_of(layout)
    K, Hx = design.K, design.Hx
    z, al = layout["z"], layout["alpha"]
    FGK = model.F + model.G @ K
    dirs = vertex_directions(model, design)
    # initial state inside the first tube
    batch.leq(Aff.var(z[0], -Hx) + Aff.scalar_times(al[0], -np.ones(design.n_x)) + Hx @ np.asarray(x_k, float), INITIAL)
    n_si = Np + 1 if final_v else Np
    for l in range(n_si):
        cx, cs, v = stage_vars(layout, l)
        row = cx.lmul(FGK) + v.lmul(model.G) - cs.lmul(model.G @ K) + Aff.scalar_times(al[l], design.f_bar) - 1.0
        batch.leq(row, STATE_INPUT)
    for l in range(Np):
        cx, cs, v = stage_vars(layout, l)
        cn = Aff.var(z[l + 1])
        if approx is None:
            vertex_inclusion_rows(
                model, design, H_theta, h_theta, cx, cs, v, al[l], cn, al[l + 1], layout[f"Lam{l}"], batch, (INCL_INEQ, INCL_EQ), dirs
            )
        else:
            aggregated_inclusion_rows(
                model, design, approx, H_theta, h_theta, cx, cs, v, al[l], cn, al[l + 1], layout[f"Lam{l}"], batch, (INCL_INEQ, INCL_EQ)
            )
    return batch


def terminal_vars(layout):
    xt, ut = Aff.var(layout["xt"]), Aff.var(layout["ut"])
    return xt, xt, ut, int(layout["at"].ravel()[0])


def online_terminal_constraints(model, design, H_theta, h_theta, layout, batch=None, approx=None):
    """Robustly invariant homothet (x~ + a~ X0 under u = K(x - x~) + u~) and its link to the last tube."""
    from dampc.lambda_approx import aggregated_inclusion_rows

    batch = ConstraintBatch() if batch is None else batch
    Np = layout["z"].shape[0] - 1
    cx, cs, v, at = terminal_vars(layout)
    batch.leq(cx.lmul(model.F) + v.lmul(model.G) + Aff.scalar_times(at, design.f_bar) - 1.0, TERM_STATE_INPUT)
    if approx is None:
        vertex_inclusion_rows(model, design, H_theta, h_theta, cx, cs, v, at, cx, at, layout["Lt"], batch, (TERM_INEQ, TERM_EQ))
    else:
        aggregated_inclusion_rows(model, design, approx, H_theta, h_theta, cx, cs, v, at, cx, at, layout["Lt"], batch, (TERM_INEQ, TERM_EQ))
    batch.eq(Aff.var(layout["z"][Np]) - cx, LINK_CENTER)
    batch.leq(Aff.var(layout["alpha"][Np : Np + 1]) - Aff.var([at]), LINK_SCALE)
    return batch


def fixed_terminal_link(layout, xt, at, batch=None):
    """Last tube inside a precomputed terminal homothet xt + at X0."""
    batch = ConstraintBatch() if batch is None else batch
    Np = layout["z"].shape[0] - 1
    batch.eq(Aff.var(layout["z"][Np]) - np.asarray(xt, float), LINK_CENTER)
    batch.leq(Aff.var(layout["alpha"][Np : Np + 1]) - float(at), LINK_SCALE)
    return batch


def terminal_rows_slack(model, design, H_theta, h_theta, xt, ut, at):
    """Best worst-row slack of the online terminal rows at a fixed (x~, u~, a~).

    The vertex multipliers are optimized; a value >= 0 means the point is feasible.
    """
    lay = Layout()
    L = lay.add("Lt", (design.q, design.n_x, len(h_theta)), lb=0.0)
    t = lay.add("t", (1,))
    batch = ConstraintBatch()
    xt, ut = np.asarray(xt, float), np.asarray(ut, float)
    cx, v = Aff.const_(xt), Aff.const_(ut)
    ub_rows, _ = vertex_inclusion_rows(
        model, design, H_theta, h_theta, cx, cx, v, t[0], cx, t[0], L, _ScalarBatch(batch, t[0], float(at)), (TERM_INEQ, TERM_EQ)
    )
    c = np.zeros(lay.n)
    c[t[0]] = 1.0
    sk = flatten(batch, lay, c)
    res = solve_convex(ConvexProblem(sk.c, sk.A_ub, sk.b_ub, sk.A_eq, sk.b_eq, lay.lb, lay.ub))
    if res.status != OPTIMAL:
        raise InfeasibleSet(f"terminal slack LP failed: {res.status}")
    lin = model.F @ xt + model.G @ ut + float(at) * design.f_bar - 1.0
    return min(-res.x[t[0]], float(-np.max(lin)))


class _ScalarBatch:
    """Adapter: substitute a fixed value for the scale column and add a slack column to inequalities."""

    def __init__(self, batch, col, value):
        self.batch, self.col, self.value = batch, col, value

    def _sub(self, expr):
        const = expr.const.copy()
        terms = []
        for c, M in expr.terms:
            mask = c == self.col
            if mask.any():
                const += M[:, mask].sum(axis=1) * self.value
                if (~mask).any():
                    terms.append((c[~mask], M[:, ~mask]))
            else:
                terms.append((c, M))
        return Aff(const, terms)

    def eq(self, expr, tag):
        return self.batch.eq(self._sub(expr), tag)

    def leq(self, expr, tag):
        e = self._sub(expr)
        return self.batch.leq(e - Aff.scalar_times(self.col, np.ones(e.size)), tag)


def fallback_terminal_point(model, design):
    """The constructive terminal point x~ = u~ = 0, a~ = 1 / max(f_bar)."""
    return np.zeros(model.n), np.zeros(model.m), 1.0 / design.ff_bar


def offline_terminal_design(model, design, theta_bar0=None, refs=None, xi=1.0):
    """Terminal homothets robust for the whole initial parameter set, one per step k = 0..T-N.

    Each solves min ||x~ - x_s||^2 + ||u~ - u_s||^2 - xi a~ with (x_s, u_s) the estimated
    equilibrium for r_{k+N} at theta_bar0. Returns a list of (x~, u~, a~) (None where infeasible).
    """
    theta_bar0 = model.theta_bar0 if theta_bar0 is None else np.asarray(theta_bar0, float)
    refs = model.refs if refs is None else np.atleast_2d(refs)
    cache = {}
    out = []
    for k in range(0, model.T - model.N + 1):
        r = refs[k + model.N]
        key = tuple(np.round(r, 12))
        if key not in cache:
            cache[key] = _offline_terminal_qp(model, design, theta_bar0, r, xi)
        out.append(cache[key])
    return out


def _offline_terminal_qp(model, design, theta_bar0, r, xi):
    n, m = model.n, model.m
    K, Hx, V = design.K, design.Hx, design.verts
    lay = Layout()
    xt = lay.add("xt", (n,))
    ut = lay.add("ut", (m,))
    at = lay.add("at", (1,), lb=0.0)[0]
    xs = lay.add("xs", (n,))
    us = lay.add("us", (m,))
    dx = lay.add("dx", (n,))
    du = lay.add("du", (m,))
    b = ConstraintBatch()
    A, B = eval_matrices(model, theta_bar0)
    X, U = Aff.var(xs), Aff.var(us)
    b.eq(X.lmul(A - np.eye(n)) + U.lmul(B), SP_EQ_DYN)
    b.eq(X.lmul(model.C) - r, SP_EQ_OUT)
    b.eq(Aff.var(dx) - Aff.var(xt) + X, "distance")
    b.eq(Aff.var(du) - Aff.var(ut) + U, "distance")
    XT, UT = Aff.var(xt), Aff.var(ut)
    for x in V:
        b.leq(XT.lmul(model.F) + UT.lmul(model.G) + Aff.scalar_times(at, (model.F + model.G @ K) @ x) - 1.0, TERM_STATE_INPUT)
    for th in model.Theta0.vertices:
        At, Bt = eval_matrices(model, th)
        Acl = At + Bt @ K
        for x in V:
            row = XT.lmul(Hx @ (At - np.eye(n))) + UT.lmul(Hx @ Bt) + Aff.scalar_times(at, Hx @ Acl @ x - 1.0) + design.w_bar
            b.leq(row, TERM_INEQ)
    c = np.zeros(lay.n)
    c[at] = -xi
    quad = np.zeros(lay.n)
    quad[dx] = 1.0
    quad[du] = 1.0
    sk = flatten(b, lay, c)
    res = solve_convex(ConvexProblem(sk.c, sk.A_ub, sk.b_ub, sk.A_eq, sk.b_eq, lay.lb, lay.ub, quad=quad), feas_tol=1e-8)
    if res.status != OPTIMAL:
        return None
    return res.x[xt], res.x[ut], float(max(res.x[at], 0.0))
