"""Set-membership identification with a fixed-complexity parameter set."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from dampc.backend import INFEASIBLE, OPTIMAL, ConvexProblem, lp, solve_convex
from dampc.errors import DimensionMismatch, InconsistentData, InfeasibleSet
from dampc.polytope import Polytope, chebyshev_ball

DEFAULT_TAU = 10
DEFAULT_MU = 1e-3


@dataclass(frozen=True)
class IdentState:
    """Parameter set {H_theta theta <= h_theta}, point estimate and measurement window."""

    H_theta: np.ndarray
    h_theta: np.ndarray
    theta_bar: np.ndarray
    window: tuple = ()
    tau: int = DEFAULT_TAU
    mu: float = DEFAULT_MU

    @classmethod
    def initial(cls, model, tau=DEFAULT_TAU, mu=DEFAULT_MU):
        if tau < 1:
            raise ValueError("window length must be at least 1")
        if mu <= 0:
            raise ValueError("regularization weight must be positive")
        return cls(
            np.array(model.Theta0.H),
            np.array(model.Theta0.h),
            np.array(model.theta_bar0, dtype=float),
            (),
            int(tau),
            float(mu),
        )

    @property
    def theta_set(self):
        return Polytope(self.H_theta, self.h_theta, check=False)

    def push(self, x, u, x_next):
        buf = deque(self.window, maxlen=self.tau)
        buf.append((np.array(x, dtype=float), np.array(u, dtype=float), np.array(x_next, dtype=float)))
        return replace(self, window=tuple(buf))


def regressor(model, x, u):
    """D with column i = A_i x + B_i u, and d_base = A_0 x + B_0 u."""
    x = np.asarray(x, dtype=float).ravel()
    u = np.asarray(u, dtype=float).ravel()
    if x.size != model.n or u.size != model.m:
        raise DimensionMismatch(f"expected x in R^{model.n}, u in R^{model.m}; got {x.size}, {u.size}")
    D = np.column_stack([A @ x + B @ u for A, B in zip(model.A_list[1:], model.B_list[1:])])
    D = D.reshape(model.n, model.p)
    return D, model.A_list[0] @ x + model.B_list[0] @ u


def nonfalsified_set(model, window):
    """Parameters consistent with every transition in ``window`` for some w in W.

    The result may be unbounded; it is only ever intersected with a bounded set.
    """
    if len(window) == 0:
        raise ValueError("empty measurement window")
    Hw, hw = model.W.H, model.W.h
    rows, rhs = [], []
    for x, u, xn in window:
        D, d_base = regressor(model, x, u)
        rows.append(-Hw @ D)
        rhs.append(hw + Hw @ (d_base - np.asarray(xn, dtype=float)))
    return Polytope(np.vstack(rows), np.concatenate(rhs), check=False)


def update_parameter_set(state: IdentState, delta: Polytope) -> IdentState:
    """Tighten every row of the parameter set to its maximum over Theta ∩ delta."""
    H = np.vstack([state.H_theta, delta.H])
    h = np.concatenate([state.h_theta, delta.h])
    new_h = np.array(state.h_theta, dtype=float)
    for i, row in enumerate(state.H_theta):
        res = lp(-row, A_ub=H, b_ub=h)
        if res.status == INFEASIBLE:
            raise InconsistentData("parameter set and non-falsified set do not intersect")
        if res.status != OPTIMAL:
            raise InconsistentData(f"parameter-set update LP failed: {res.status} {res.message}")
        new_h[i] = min(new_h[i], -res.objective)
    return replace(state, h_theta=new_h)


def estimate_parameter(state: IdentState) -> IdentState:
    """Regularized Chebyshev center: max r - mu ||theta - theta_prev||^2."""
    H, h = state.H_theta, state.h_theta
    p = H.shape[1]
    norms = np.linalg.norm(H, axis=1)
    prev = np.asarray(state.theta_bar, dtype=float)
    c = np.concatenate([-2.0 * state.mu * prev, [-1.0]])
    quad = np.concatenate([np.full(p, state.mu), [0.0]])
    lb = np.concatenate([np.full(p, -np.inf), [0.0]])
    prob = ConvexProblem(c, np.column_stack([H, norms]), h, lb=lb, quad=quad)
    res = solve_convex(prob, feas_tol=1e-8)
    if res.status == OPTIMAL:
        theta = res.x[:p]
    else:
        try:
            theta, _ = chebyshev_ball(Polytope(H, h, check=False))
        except InfeasibleSet:
            raise
    if np.max(H @ theta - h) > 1e-9:
        theta, _ = chebyshev_ball(Polytope(H, h, check=False))
    return replace(state, theta_bar=np.asarray(theta, dtype=float))


def identification_step(model, state: IdentState, x, u, x_next) -> IdentState:
    """Record one transition, update the set over the window and refresh the estimate."""
    state = state.push(x, u, x_next)
    delta = nonfalsified_set(model, state.window)
    state = update_parameter_set(state, delta)
    return estimate_parameter(state)
