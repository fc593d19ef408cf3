"""Exploration terms: predicted nominal trajectory, predicted parameter sets,
predicted tube and the worst-case tracking cost over it.

Predicted parameter-set rows depend affinely on the planned inputs. Each
transition t contributes rows -H_w D_t theta <= h_w - H_w D_t theta_bar with
D_t = D(x^_t, u^_t); once multiplied by unknown multipliers they become the
bilinear terms of the program.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dampc.layout import Aff, ConstraintBatch
from dampc.model import beta, eval_matrices
from dampc.tube_builder import horizon_of, vertex_directions, vertex_inclusion_rows

PRED_INITIAL, PRED_INEQ, PRED_EQ, NEST = "pred_initial", "pred_inclusion_ineq", "pred_inclusion_eq", "nest"
COST_OUT, COST_IN = "cost_output", "cost_input"

__all__ = [
    "PredictedSets",
    "beta",
    "predict_nominal",
    "predicted_set_exprs",
    "predicted_tube_constraints",
    "stage_cost_rows",
    "terminal_cost_rows",
    "stage_cost_bruteforce",
]


def predict_nominal(model, K, theta_bar, x_k, layout, steps):
    """x^_0 = x_k, x^_{t+1} = A(theta_bar) x^_t + B(theta_bar)(K(x^_t - xbar_t) + v_t), noise free.

    Returns (states t = 0..steps, inputs t = 0..steps-1) as affine expressions.
    """
    A, B = eval_matrices(model, theta_bar)
    xs = [Aff.const_(np.asarray(x_k, float))]
    us = []
    for t in range(steps):
        u = (xs[t] - Aff.var(layout["xbar"][t])).lmul(K) + Aff.var(layout["v"][t])
        us.append(u)
        xs.append(_compact(xs[t].lmul(A) + u.lmul(B)))
    return xs, us


def _compact(expr: Aff) -> Aff:
    """Merge terms that share a column block."""
    merged = {}
    for c, M in expr.terms:
        key = c.tobytes()
        if key in merged:
            merged[key] = (c, merged[key][1] + M)
        else:
            merged[key] = (c, M)
    return Aff(expr.const, list(merged.values()))


@dataclass
class PredictedSets:
    """Predicted parameter-set rows per transition t (t < N_theta).

    gD[t] has entries (i, w) -> [H_w D_t]_{w,i}, ordered parameter-major;
    gh[t] is h_w - H_w D_t theta_bar. The set after l transitions is
    Theta_k ∩ {-gD_s theta <= gh_s, s < l}.
    """

    H_theta: np.ndarray
    h_theta: np.ndarray
    gD: list
    gh: list
    n_w: int
    p: int
    states: list
    inputs: list

    @property
    def n_transitions(self):
        return len(self.gD)

    def evaluate(self, x, l):
        """Numeric (H, h) of the predicted set after min(l, N_theta) transitions at decision x."""
        H, h = [np.asarray(self.H_theta)], [np.asarray(self.h_theta)]
        for t in range(min(l, self.n_transitions)):
            G = self.gD[t].eval(x).reshape(self.p, self.n_w).T
            H.append(-G)
            h.append(self.gh[t].eval(x))
        return np.vstack(H), np.concatenate(h)


def predicted_set_exprs(model, H_theta, h_theta, theta_bar, nominal):
    xs, us = nominal
    Hw, hw = model.W.H, model.W.h
    A_bar = sum(th * A for th, A in zip(theta_bar, model.A_list[1:]))
    B_bar = sum(th * B for th, B in zip(theta_bar, model.B_list[1:]))
    gD, gh = [], []
    for t in range(len(us)):
        x, u = xs[t], us[t]
        gD.append(Aff.stack([x.lmul(Hw @ A) + u.lmul(Hw @ B) for A, B in zip(model.A_list[1:], model.B_list[1:])]))
        gh.append(hw - x.lmul(Hw @ A_bar) - u.lmul(Hw @ B_bar))
    return PredictedSets(np.asarray(H_theta), np.asarray(h_theta), gD, gh, Hw.shape[0], model.p, xs, us)


def _attach_bilinear(batch, ub_rows, eq_rows, LD, gD_idx, gh_idx, L, nx, nw, p):
    r, t, w = np.meshgrid(np.arange(nx), np.arange(L), np.arange(nw), indexing="ij")
    batch.bilinear("ub", ub_rows[r], LD[r, t * nw + w], gh_idx[t, w])
    i, r, t, w = np.meshgrid(np.arange(p), np.arange(nx), np.arange(L), np.arange(nw), indexing="ij")
    batch.bilinear("eq", eq_rows[i * nx + r], LD[r, t * nw + w], gD_idx[t, i * nw + w])


def predicted_tube_constraints(model, design, H_theta, h_theta, x_k, ps: PredictedSets, layout, batch=None, approx=None):
    """Predicted tube zh + ah X0 driven by the predicted parameter sets, nested in the robust tube."""
    from dampc.lambda_approx import aggregated_inclusion_rows

    batch = ConstraintBatch() if batch is None else batch
    Np, _, _ = horizon_of(layout)
    Hx, nx, nw, p = design.Hx, design.n_x, ps.n_w, model.p
    zh, ah = layout["zh"], layout["ah"]
    batch.leq(Aff.var(zh[0], -Hx) + Aff.scalar_times(ah[0], -np.ones(nx)) + Hx @ np.asarray(x_k, float), PRED_INITIAL)
    nT = ps.n_transitions
    if nT:
        gD_idx = np.stack([batch.register_g(g) for g in ps.gD])
        gh_idx = np.stack([batch.register_g(g) for g in ps.gh])
    dirs = vertex_directions(model, design)
    for l in range(Np):
        L = min(l, nT)
        cx, cs, v = Aff.var(zh[l]), Aff.var(layout["xbar"][l]), Aff.var(layout["v"][l])
        cn = Aff.var(zh[l + 1])
        if approx is None:
            ubs, eqs = vertex_inclusion_rows(
                model, design, H_theta, h_theta, cx, cs, v, ah[l], cn, ah[l + 1], layout[f"Lh{l}"], batch, (PRED_INEQ, PRED_EQ), dirs
            )
            if L:
                LD = layout[f"LhD{l}"]
                for j in range(design.q):
                    _attach_bilinear(batch, ubs[j], eqs[j], LD[j], gD_idx, gh_idx, L, nx, nw, p)
        else:
            ub, eq = aggregated_inclusion_rows(
                model, design, approx, H_theta, h_theta, cx, cs, v, ah[l], cn, ah[l + 1], layout[f"Lh{l}"], batch, (PRED_INEQ, PRED_EQ)
            )
            if L:
                _attach_bilinear(batch, ub, eq, layout[f"LhD{l}"], gD_idx, gh_idx, L, nx, nw, p)
    for l in range(Np + 1):
        row = (Aff.var(zh[l]) - Aff.var(layout["z"][l])).lmul(Hx) + Aff.scalar_times(ah[l], np.ones(nx))
        batch.leq(row - Aff.scalar_times(layout["alpha"][l], np.ones(nx)), NEST)
    return batch


def _sigma(design, D):
    """Support of X0 along each row of D."""
    return np.max(D @ design.verts.T, axis=1)


def stage_cost_rows(model, design, cz: Aff, ca_col, xbar: Aff, ubar: Aff, v: Aff, r, s_col, i_col, batch=None):
    """Epigraph rows: s >= worst ||Q(C x - r)||_inf and i >= worst ||R(K(x - xbar) + v - ubar)||_inf over cz + ca X0."""
    batch = ConstraintBatch() if batch is None else batch
    QC = model.Q @ model.C
    RK = model.R @ design.K
    out = cz.lmul(QC) - model.Q @ np.asarray(r, float)
    inp = cz.lmul(RK) - xbar.lmul(RK) + v.lmul(model.R) - ubar.lmul(model.R)
    for sign in (1.0, -1.0):
        so = _sigma(design, sign * QC)
        batch.leq(sign * out + Aff.scalar_times(ca_col, so) - Aff.scalar_times(s_col, np.ones(so.size)), COST_OUT)
        si = _sigma(design, sign * RK)
        batch.leq(sign * inp + Aff.scalar_times(ca_col, si) - Aff.scalar_times(i_col, np.ones(si.size)), COST_IN)
    return batch


def terminal_cost_rows(model, design, cz: Aff, ca_col, xbar: Aff, ubar: Aff, ut: Aff, r, s_col, i_col, batch=None):
    """Same epigraph structure with the terminal input u~ in place of v; weighted by beta in the objective."""
    return stage_cost_rows(model, design, cz, ca_col, xbar, ubar, ut, r, s_col, i_col, batch)


def stage_cost_bruteforce(model, design, z, a, xbar, ubar, v, r):
    """Worst output term plus worst input term over the enumerated vertices of z + a X0."""
    X = np.asarray(z, float) + float(a) * design.verts
    out = np.abs((X @ model.C.T - r) @ model.Q.T).max()
    U = (X - xbar) @ design.K.T + v - ubar
    inp = np.abs(U @ model.R.T).max()
    return float(out + inp)
