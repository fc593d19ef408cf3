"""Tube-inclusion approximation with one aggregated multiplier block per stage.

Per-vertex certificates Lambda^j with Lambda^j H_theta = H_x D(x^j, K x^j) are
computed once per step; a stage then needs a single block Lambda with
Lambda + alpha * min_j Lambda^j >= 0, and the per-vertex multipliers
Lambda + alpha * Lambda^j certify the exact vertex rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dampc.backend import OPTIMAL, ConvexProblem, solve_convex
from dampc.errors import InfeasibleSet
from dampc.layout import Aff, ConstraintBatch, Layout, flatten

MULT_LOWER = "mult_lower"
DEFAULT_MU_THETA = 1.0


@dataclass(frozen=True)
class VertexMultipliers:
    Lambda_j: np.ndarray  # (q, n_x, n_theta)
    Lambda_under: np.ndarray  # (n_x, n_theta)
    lambda_bar: np.ndarray  # (n_x,)
    mu_theta: float

    def expand(self, Lam, alpha):
        """Per-vertex multipliers Lam + alpha * Lambda^j, shape (q, n_x, n_theta)."""
        return np.asarray(Lam)[None] + float(alpha) * self.Lambda_j


def vertex_regressor_targets(model, design):
    """H_x D(x^j, K x^j), each (n_x, p)."""
    K, Hx, V = design.K, design.Hx, design.verts
    cols = [(A + B @ K) @ V.T for A, B in zip(model.A_list[1:], model.B_list[1:])]
    return np.stack([Hx @ np.column_stack([c[:, j] for c in cols]).reshape(model.n, model.p) for j in range(design.q)])


def bar_bound(model, design, Lambda_j, h_theta):
    """max_j Lambda^j h + H_x (A_0 + B_0 K) x^j, elementwise."""
    base = design.Hx @ (model.A_list[0] + model.B_list[0] @ design.K) @ design.verts.T
    return np.max(Lambda_j @ np.asarray(h_theta) + base.T, axis=0)


def precompute_vertex_multipliers(model, design, H_theta, h_theta, mu_theta=DEFAULT_MU_THETA) -> VertexMultipliers:
    """min ||lambda_bar||_2 + mu_theta * max|Lambda^j| over certificates of every X0 vertex."""
    q, nx = design.q, design.n_x
    H_theta = np.asarray(H_theta, float)
    h_theta = np.asarray(h_theta, float)
    nth = H_theta.shape[0]
    targets = vertex_regressor_targets(model, design)
    base = design.Hx @ (model.A_list[0] + model.B_list[0] @ design.K) @ design.verts.T
    lay = Layout()
    L = lay.add("L", (q, nx, nth))
    lb_ = lay.add("lambda_bar", (nx,))
    s = lay.add("s", (1,), lb=0.0)[0]
    b = ConstraintBatch()
    for j in range(q):
        b.eq(Aff.matvar(L[j], H_theta) - targets[j].ravel(), "certificate")
        b.leq(Aff.matvar(L[j], h_theta[:, None]) - Aff.var(lb_) + base[:, j], "bar")
    allL = L.ravel()
    b.leq(Aff.var(allL) - Aff.scalar_times(s, np.ones(allL.size)), "abs")
    b.leq(-Aff.var(allL) - Aff.scalar_times(s, np.ones(allL.size)), "abs")
    c = np.zeros(lay.n)
    c[s] = mu_theta
    sk = flatten(b, lay, c)
    prob = ConvexProblem(sk.c, sk.A_ub, sk.b_ub, sk.A_eq, sk.b_eq, lay.lb, lay.ub, norm2=[(1.0, lb_)])
    res = solve_convex(prob, feas_tol=1e-8)
    if res.status != OPTIMAL:
        raise InfeasibleSet(f"vertex multiplier problem failed: {res.status} {res.message}")
    Lj = res.x[L]
    return VertexMultipliers(Lj, Lj.min(axis=0), bar_bound(model, design, Lj, h_theta), float(mu_theta))


def aggregated_inclusion_rows(model, design, vm, H_theta, h_theta, cx, cs, v, a_col, cn, an_col, Lam, batch, tags):
    """Aggregated-multiplier rows for the map cx + a X0 -> cn + an X0.

    Returns (ub_rows, eq_rows) with eq rows ordered (parameter i, H_x row r).
    """
    from dampc.tube_builder import law_expr

    Hx, K, p = design.Hx, design.K, model.p
    Lam = np.asarray(Lam)
    batch.leq(-Aff.var(Lam.ravel()) - Aff.scalar_times(a_col, vm.Lambda_under.ravel()), MULT_LOWER)
    Ee = [law_expr(model, K, i, cx, cs, v).lmul(Hx) for i in range(p + 1)]
    eq = Aff.stack([Ee[i + 1] for i in range(p)]) - Aff.matvar(Lam, H_theta, order="F")
    eq_rows = batch.eq(eq, tags[1])
    ub = (
        Aff.matvar(Lam, np.asarray(h_theta)[:, None])
        + Aff.scalar_times(a_col, vm.lambda_bar)
        + Ee[0]
        - cn.lmul(Hx)
        - Aff.scalar_times(an_col, np.ones(design.n_x))
        + design.w_bar
    )
    ub_rows = batch.leq(ub, tags[0])
    return ub_rows, eq_rows


def approx_robust_constraints(model, design, vm, H_theta, h_theta, x_k, layout, batch=None):
    from dampc.tube_builder import robust_tube_constraints

    return robust_tube_constraints(model, design, H_theta, h_theta, x_k, layout, batch, approx=vm)


def approx_terminal_constraints(model, design, vm, H_theta, h_theta, layout, batch=None):
    from dampc.tube_builder import online_terminal_constraints

    return online_terminal_constraints(model, design, H_theta, h_theta, layout, batch, approx=vm)


def approx_predicted_constraints(model, design, vm, H_theta, h_theta, x_k, predicted_sets, layout, batch=None):
    from dampc.dual_cost import predicted_tube_constraints

    return predicted_tube_constraints(model, design, H_theta, h_theta, x_k, predicted_sets, layout, batch, approx=vm)
