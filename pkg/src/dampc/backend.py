"""Convex solve contract: LPs through HiGHS, small QP/SOCP problems through Clarabel.

Every solution is re-checked against the problem data before it is reported
as optimal; the solver's own status is never taken on trust.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

OPTIMAL = "Optimal"
INFEASIBLE = "Infeasible"
UNBOUNDED = "Unbounded"
ITERATION_LIMIT = "IterationLimit"
NUMERICAL_FAILURE = "NumericalFailure"

_HIGHS_STATUS = {
    0: OPTIMAL,
    1: ITERATION_LIMIT,
    2: INFEASIBLE,
    3: UNBOUNDED,
    4: NUMERICAL_FAILURE,
}


@dataclass
class ConvexProblem:
    """min c'x + sum_i quad_i x_i^2 + sum_k w_k ||x[idx_k]||_2  s.t. rows and bounds."""

    c: np.ndarray
    A_ub: Optional[sp.spmatrix] = None
    b_ub: Optional[np.ndarray] = None
    A_eq: Optional[sp.spmatrix] = None
    b_eq: Optional[np.ndarray] = None
    lb: Optional[np.ndarray] = None
    ub: Optional[np.ndarray] = None
    quad: Optional[np.ndarray] = None
    norm2: Sequence[tuple] = field(default_factory=list)

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).ravel()
        n = self.c.size
        if self.lb is None:
            self.lb = np.full(n, -np.inf)
        if self.ub is None:
            self.ub = np.full(n, np.inf)
        self.lb = np.asarray(self.lb, dtype=float).ravel()
        self.ub = np.asarray(self.ub, dtype=float).ravel()
        self.A_ub, self.b_ub = _rows(self.A_ub, self.b_ub, n)
        self.A_eq, self.b_eq = _rows(self.A_eq, self.b_eq, n)
        for name in ("c", "b_ub", "b_eq"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite entries in {name}")

    @property
    def n(self):
        return self.c.size

    @property
    def is_lp(self):
        return (self.quad is None or not np.any(self.quad)) and not self.norm2

    def objective(self, x):
        val = float(self.c @ x)
        if self.quad is not None:
            val += float(np.sum(self.quad * x * x))
        for w, idx in self.norm2:
            val += w * float(np.linalg.norm(x[np.asarray(idx)]))
        return val

    def max_violation(self, x):
        viol = 0.0
        if self.A_ub.shape[0]:
            viol = max(viol, float(np.max(self.A_ub @ x - self.b_ub)))
        if self.A_eq.shape[0]:
            viol = max(viol, float(np.max(np.abs(self.A_eq @ x - self.b_eq))))
        viol = max(viol, float(np.max(self.lb - x, initial=0.0)), float(np.max(x - self.ub, initial=0.0)))
        return viol


@dataclass
class SolveResult:
    status: str
    x: Optional[np.ndarray]
    objective: float
    iterations: int = 0
    wall_time: float = 0.0
    max_violation: float = np.nan
    gap: float = np.nan
    message: str = ""

    @property
    def ok(self):
        return self.status == OPTIMAL


def _rows(A, b, n):
    if A is None:
        return sp.csr_matrix((0, n)), np.zeros(0)
    A = sp.csr_matrix(A)
    if A.shape[1] != n:
        raise ValueError(f"constraint matrix has {A.shape[1]} columns, expected {n}")
    b = np.asarray(b, dtype=float).ravel()
    if b.size != A.shape[0]:
        raise ValueError("rhs length does not match row count")
    return A, b


def solve_convex(problem: ConvexProblem, feas_tol=1e-7, gap_tol=1e-6, time_limit=None) -> SolveResult:
    """Solve ``problem`` and certify the answer.

    LPs additionally get a duality-gap check from the HiGHS marginals; a
    reported optimum that fails the residual or gap test comes back as
    ``NumericalFailure``.
    """
    t0 = time.perf_counter()
    if problem.is_lp:
        # degenerate multiplier blocks occasionally defeat presolve or the simplex; retry in turn
        for method, presolve in (("highs", True), ("highs-ds", False), ("highs-ipm", False)):
            res = _certify(problem, _solve_lp(problem, time_limit, presolve, method), feas_tol, gap_tol)
            if res.status != NUMERICAL_FAILURE:
                break
    else:
        res = _certify(problem, _solve_conic(problem), feas_tol, gap_tol)
    res.wall_time = time.perf_counter() - t0
    return res


def _certify(problem, res, feas_tol, gap_tol):
    if res.x is not None:
        res.max_violation = problem.max_violation(res.x)
        if res.status == OPTIMAL and res.max_violation > feas_tol:
            res.status = NUMERICAL_FAILURE
            res.message = f"post-hoc violation {res.max_violation:.2e}"
        if res.status == OPTIMAL and np.isfinite(res.gap):
            scale = max(1.0, abs(res.objective))
            if res.gap > gap_tol * scale:
                res.status = NUMERICAL_FAILURE
                res.message = f"duality gap {res.gap:.2e}"
    return res


def _solve_lp(problem, time_limit, presolve=True, method="highs"):
    bounds = np.column_stack([problem.lb, problem.ub])
    options = {"primal_feasibility_tolerance": 1e-9, "dual_feasibility_tolerance": 1e-9, "presolve": bool(presolve)}
    if time_limit is not None:
        options["time_limit"] = float(time_limit)
    out = linprog(
        problem.c,
        A_ub=problem.A_ub if problem.A_ub.shape[0] else None,
        b_ub=problem.b_ub if problem.A_ub.shape[0] else None,
        A_eq=problem.A_eq if problem.A_eq.shape[0] else None,
        b_eq=problem.b_eq if problem.A_eq.shape[0] else None,
        bounds=bounds,
        method=method,
        options=options,
    )
    status = _HIGHS_STATUS.get(out.status, NUMERICAL_FAILURE)
    x = None if out.x is None else np.asarray(out.x, dtype=float)
    objective = float(out.fun) if out.fun is not None else np.nan
    gap = np.nan
    if status == OPTIMAL:
        gap = abs(objective - _dual_objective(problem, out))
    return SolveResult(status, x, objective, int(getattr(out, "nit", 0) or 0), gap=gap, message=str(out.message))


def _dual_objective(problem, out):
    dual = 0.0
    if problem.A_ub.shape[0]:
        dual += float(problem.b_ub @ out.ineqlin.marginals)
    if problem.A_eq.shape[0]:
        dual += float(problem.b_eq @ out.eqlin.marginals)
    lo = out.lower.marginals
    hi = out.upper.marginals
    fin_lo = np.isfinite(problem.lb)
    fin_hi = np.isfinite(problem.ub)
    dual += float(problem.lb[fin_lo] @ lo[fin_lo]) + float(problem.ub[fin_hi] @ hi[fin_hi])
    return dual


def _solve_conic(problem):
    import cvxpy as cp

    x = cp.Variable(problem.n)
    obj = problem.c @ x
    if problem.quad is not None and np.any(problem.quad):
        if np.any(problem.quad < 0):
            raise ValueError("diagonal quadratic weights must be nonnegative")
        obj = obj + cp.sum(cp.multiply(problem.quad, cp.square(x)))
    for w, idx in problem.norm2:
        obj = obj + w * cp.norm(x[np.asarray(idx)], 2)
    cons = []
    if problem.A_ub.shape[0]:
        cons.append(problem.A_ub @ x <= problem.b_ub)
    if problem.A_eq.shape[0]:
        cons.append(problem.A_eq @ x == problem.b_eq)
    fin = np.isfinite(problem.lb)
    if fin.any():
        cons.append(x[np.flatnonzero(fin)] >= problem.lb[fin])
    fin = np.isfinite(problem.ub)
    if fin.any():
        cons.append(x[np.flatnonzero(fin)] <= problem.ub[fin])
    prob = cp.Problem(cp.Minimize(obj), cons)
    try:
        prob.solve(solver=cp.CLARABEL, tol_feas=1e-10, tol_gap_abs=1e-10, tol_gap_rel=1e-10)
    except cp.error.SolverError as exc:
        return SolveResult(NUMERICAL_FAILURE, None, np.nan, message=str(exc))
    status = {
        cp.OPTIMAL: OPTIMAL,
        cp.OPTIMAL_INACCURATE: OPTIMAL,
        cp.INFEASIBLE: INFEASIBLE,
        cp.INFEASIBLE_INACCURATE: INFEASIBLE,
        cp.UNBOUNDED: UNBOUNDED,
        cp.UNBOUNDED_INACCURATE: UNBOUNDED,
        cp.USER_LIMIT: ITERATION_LIMIT,
    }.get(prob.status, NUMERICAL_FAILURE)
    xv = None if x.value is None else np.asarray(x.value, dtype=float)
    iters = prob.solver_stats.num_iters if prob.solver_stats is not None else 0
    return SolveResult(status, xv, float(prob.value) if status == OPTIMAL else np.nan, int(iters or 0))


def lp(c, A_ub=None, b_ub=None, A_eq=None, b_eq=None, lb=None, ub=None, **kw) -> SolveResult:
    """Shorthand for a pure LP."""
    return solve_convex(ConvexProblem(c, A_ub, b_ub, A_eq, b_eq, lb, ub), **kw)
