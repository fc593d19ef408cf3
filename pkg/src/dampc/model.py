"""Uncertain plant description, standing-assumption checks and the offline tube design."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import solve_discrete_are

from dampc.backend import OPTIMAL, lp
from dampc.errors import DimensionMismatch, EmptyInterior, NotConverged, RedesignNeeded
from dampc.polytope import Polytope, chebyshev_ball, facet_rows, support


def _mat(a, shape=None):
    a = np.array(a, dtype=float, ndmin=2)
    if shape is not None and a.shape != shape:
        raise DimensionMismatch(f"expected shape {shape}, got {a.shape}")
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class UncertainModel:
    """x+ = A(theta) x + B(theta) u + w with A(theta) = A_0 + sum_i A_i theta_i.

    Constraints are F x + G u <= 1, the tracked output is y = C x and
    ``refs`` holds one reference per time step t = 0..T.
    """

    A_list: tuple
    B_list: tuple
    C: np.ndarray
    Theta0: Polytope
    W: Polytope
    F: np.ndarray
    G: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    T: int
    N: int
    N_theta: int
    refs: np.ndarray
    theta_bar0: Optional[np.ndarray] = None
    x0: Optional[np.ndarray] = None
    name: str = "custom"

    def __post_init__(self):
        A_list = tuple(_mat(a) for a in self.A_list)
        B_list = tuple(_mat(b) for b in self.B_list)
        object.__setattr__(self, "A_list", A_list)
        object.__setattr__(self, "B_list", B_list)
        if len(A_list) != len(B_list) or len(A_list) < 1:
            raise DimensionMismatch("A_list and B_list need the same length p+1 >= 1")
        n, m = A_list[0].shape[0], B_list[0].shape[1]
        for a in A_list:
            if a.shape != (n, n):
                raise DimensionMismatch(f"A matrices must be {n}x{n}")
        for b in B_list:
            if b.shape != (n, m):
                raise DimensionMismatch(f"B matrices must be {n}x{m}")
        C = _mat(self.C)
        if C.shape[1] != n:
            raise DimensionMismatch("C column count must equal n")
        object.__setattr__(self, "C", C)
        F, G = _mat(self.F), _mat(self.G)
        if F.shape[1] != n or G.shape[1] != m or F.shape[0] != G.shape[0]:
            raise DimensionMismatch("F must be n_c x n and G n_c x m")
        object.__setattr__(self, "F", F)
        object.__setattr__(self, "G", G)
        Q, R = _mat(self.Q), _mat(self.R)
        if Q.shape != (C.shape[0], C.shape[0]) or R.shape != (m, m):
            raise DimensionMismatch("Q must be n_y x n_y and R m x m")
        for name, M in (("Q", Q), ("R", R)):
            if np.min(np.linalg.eigvalsh(0.5 * (M + M.T))) <= 0:
                raise ValueError(f"{name} must be positive definite")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)
        if self.Theta0.dim != len(A_list) - 1:
            raise DimensionMismatch("Theta0 dimension must equal the number of parameters")
        if self.W.dim != n:
            raise DimensionMismatch("W dimension must equal n")
        if not (2 <= self.N_theta <= self.N):
            raise ValueError("N_theta must lie in [2, N]")
        if self.T < 1 or self.N < 1:
            raise ValueError("T and N must be positive")
        refs = np.array(self.refs, dtype=float, ndmin=2)
        if refs.shape != (self.T + 1, C.shape[0]):
            raise DimensionMismatch(f"refs must have shape {(self.T + 1, C.shape[0])}, got {refs.shape}")
        refs.setflags(write=False)
        object.__setattr__(self, "refs", refs)
        tb = np.zeros(self.p) if self.theta_bar0 is None else np.asarray(self.theta_bar0, dtype=float).ravel()
        x0 = np.zeros(n) if self.x0 is None else np.asarray(self.x0, dtype=float).ravel()
        if tb.size != self.p or x0.size != n:
            raise DimensionMismatch("theta_bar0 / x0 length mismatch")
        object.__setattr__(self, "theta_bar0", tb)
        object.__setattr__(self, "x0", x0)
        self._check_compact()

    def _check_compact(self):
        n, m = self.n, self.m
        Hz = np.hstack([self.F, self.G])
        Z = Polytope(Hz, np.ones(self.n_c), check=False)
        for d in np.vstack([np.eye(n + m), -np.eye(n + m)]):
            support(Z, d)

    @property
    def n(self):
        return self.A_list[0].shape[0]

    @property
    def m(self):
        return self.B_list[0].shape[1]

    @property
    def p(self):
        return len(self.A_list) - 1

    @property
    def n_y(self):
        return self.C.shape[0]

    @property
    def n_c(self):
        return self.F.shape[0]

    def with_(self, **changes):
        """Copy with some fields replaced (re-validated)."""
        kw = {f: getattr(self, f) for f in self.__dataclass_fields__}
        kw.update(changes)
        return UncertainModel(**kw)


def eval_matrices(model: UncertainModel, theta):
    theta = np.asarray(theta, dtype=float).ravel()
    if theta.size != model.p:
        raise DimensionMismatch(f"theta has length {theta.size}, expected {model.p}")
    A = model.A_list[0].copy()
    B = model.B_list[0].copy()
    for i, t in enumerate(theta):
        A += t * model.A_list[i + 1]
        B += t * model.B_list[i + 1]
    return A, B


@dataclass
class RankReport:
    passed: bool
    worst_sigma: float
    message: str = ""


def check_rank_assumption(model: UncertainModel, theta_vertices=None, n_samples=20, seed=0, tol=1e-9) -> RankReport:
    """Numerically check that setpoints exist for every admissible parameter."""
    n, m, ny, N = model.n, model.m, model.n_y, model.N
    if m < ny:
        return RankReport(False, 0.0, f"fewer inputs ({m}) than tracked outputs ({ny})")
    if theta_vertices is None:
        theta_vertices = model.Theta0.vertices
    pts = [np.asarray(t, dtype=float) for t in theta_vertices]
    V = np.asarray(theta_vertices, dtype=float)
    rng = np.random.default_rng(seed)
    for _ in range(n_samples):
        w = rng.dirichlet(np.ones(len(V)))
        pts.append(w @ V)
    worst = np.inf
    for th in pts:
        A, B = eval_matrices(model, th)
        Ast = np.kron(np.eye(N), A) - np.kron(np.eye(N, k=1), np.eye(n))
        M1 = np.block([[Ast, np.kron(np.eye(N), B)], [np.kron(np.eye(N), model.C), np.zeros((N * ny, N * m))]])
        M2 = np.block([[A - np.eye(n), B], [model.C, np.zeros((ny, m))]])
        for M, rank in ((M1, N * (n + ny)), (M2, n + ny)):
            s = np.linalg.svd(M, compute_uv=False)
            sig = s[rank - 1] if len(s) >= rank else 0.0
            worst = min(worst, sig / max(1.0, s[0]))
    ok = worst > tol
    return RankReport(bool(ok), float(worst), "" if ok else "rank-deficient setpoint equations")


@dataclass(frozen=True, eq=False)
class TubeDesign:
    """Feedback gain, normalized tube shape X0 = {H_x x <= 1} and its offline constants."""

    K: np.ndarray
    X0: Polytope
    lambda_c: float
    f_bar: np.ndarray
    w_bar: np.ndarray
    ff_bar: float
    origin_weights: np.ndarray = field(default=None)

    @property
    def Hx(self):
        return self.X0.H

    @property
    def verts(self):
        return self.X0.vertices

    @property
    def n_x(self):
        return self.X0.n_rows

    @property
    def q(self):
        return len(self.X0.vertices)

    @property
    def lambda_margin(self):
        return 1.0 - self.ff_bar * float(np.max(self.w_bar)) - self.lambda_c


def lqr_gain(A, B, Qx, Ru):
    P = solve_discrete_are(A, B, Qx, Ru)
    return -np.linalg.solve(Ru + B.T @ P @ B, B.T @ P @ A)


def closed_loop_vertices(model: UncertainModel, K):
    return [sum_AB(model, th, K) for th in model.Theta0.vertices]


def sum_AB(model, theta, K):
    A, B = eval_matrices(model, theta)
    return A + B @ K


def compute_support_constants(model: UncertainModel, K, X0: Polytope):
    FGK = model.F + model.G @ K
    f_bar = np.array([support(X0, row) for row in FGK])
    w_bar = np.array([support(model.W, row) for row in X0.H])
    return f_bar, w_bar, float(np.max(f_bar))


def contractivity_slack(Acl_vertices, X0: Polytope, lambda_c):
    """min over (vertex matrix, X0 vertex) of lambda_c - max row of H_x Acl x^j."""
    worst = np.inf
    for M in Acl_vertices:
        vals = X0.vertices @ (X0.H @ M).T
        worst = min(worst, lambda_c - float(np.max(vals)))
    return worst


def seed_box(model: UncertainModel, scale=1.0) -> Polytope:
    """Largest origin-centred inf-norm box inside the state projection of Z."""
    n, m = model.n, model.m
    signs = np.array(list(itertools.product([-1.0, 1.0], repeat=n)))
    nv = len(signs)
    nvar = 1 + nv * m
    rows, rhs = [], []
    for k, s in enumerate(signs):
        blk = np.zeros((model.n_c, nvar))
        blk[:, 0] = model.F @ s
        blk[:, 1 + k * m : 1 + (k + 1) * m] = model.G
        rows.append(blk)
        rhs.append(np.ones(model.n_c))
    c = np.zeros(nvar)
    c[0] = -1.0
    lb = np.full(nvar, -np.inf)
    lb[0] = 0.0
    res = lp(c, A_ub=np.vstack(rows), b_ub=np.concatenate(rhs), lb=lb)
    if res.status != OPTIMAL or res.x[0] <= 0:
        raise EmptyInterior("state projection of Z has no interior around the origin")
    return Polytope.inf_ball(scale * res.x[0], n)


def compute_contractive_set(Acl_vertices, lambda_c, seed_set: Polytope, max_iter=200, tol=1e-9) -> Polytope:
    """Largest lambda-contractive subset of ``seed_set`` for the given vertex matrices.

    Iterates S <- S ∩ {x | H_S Acl_i x <= lambda_c} adding only rows that cut
    the current set, and keeps facet-defining rows after each step.
    """
    if not 0 <= lambda_c < 1:
        raise ValueError("lambda_c must lie in [0, 1)")
    S = seed_set.normalized()
    rho = max(float(np.max(np.abs(np.linalg.eigvals(M)))) for M in Acl_vertices)
    if rho >= lambda_c > 0:
        # a lambda-contractive C-set forces every vertex matrix to have spectral radius <= lambda
        raise EmptyInterior(f"spectral radius {rho:.4f} of a vertex matrix exceeds lambda_c = {lambda_c}")
    if lambda_c == 0:
        for M in Acl_vertices:
            if np.max(np.abs(S.H @ M)) > tol:
                raise ValueError("lambda_c = 0 requires deadbeat vertex matrices")
        return Polytope(S.H, S.h, vertices=S.vertices, check=False)
    _, r0 = chebyshev_ball(S)
    for _ in range(max_iter):
        V = S.vertices
        cand = np.vstack([S.H @ M / lambda_c for M in Acl_vertices])
        viol = np.max(V @ cand.T, axis=0) > 1.0 + tol
        if not viol.any():
            return S
        new = _dedupe_rows(cand[viol], S.H)
        S = Polytope(np.vstack([S.H, new]), np.ones(S.n_rows + len(new)), check=False)
        _, radius = chebyshev_ball(S)
        if radius <= 1e-6 * r0:
            raise EmptyInterior("contractive iteration collapsed to the origin")
        keep = facet_rows(S)
        verts = S.vertices
        S = Polytope(S.H[keep], np.ones(len(keep)), vertices=verts, check=False)
    raise NotConverged(f"no contractive set after {max_iter} iterations")


def _dedupe_rows(rows, existing, tol=1e-9):
    out = []
    for r in rows:
        if any(np.max(np.abs(r - e)) < tol for e in existing) or any(np.max(np.abs(r - e)) < tol for e in out):
            continue
        out.append(r)
    return np.array(out).reshape(-1, rows.shape[1])


def origin_weights(X0: Polytope):
    """Convex weights mu with sum_i mu_i x^i = 0 over the vertices of X0."""
    V = X0.vertices
    q = len(V)
    res = lp(np.zeros(q), A_eq=np.vstack([V.T, np.ones((1, q))]), b_eq=np.concatenate([np.zeros(X0.dim), [1.0]]), lb=np.zeros(q))
    if res.status != OPTIMAL:
        raise EmptyInterior("origin is not inside X0")
    mu = np.maximum(res.x, 0.0)
    return mu / mu.sum()


def vertex_lp_gain(model: UncertainModel, X0: Polytope):
    """Gain minimizing the vertex contraction rate of a fixed shape X0.

    max_{theta^i, x^j} H_x (A(theta^i) + B(theta^i) K) x^j is linear in K, so the
    best gain for a given shape is one LP. Returns (K, rate).
    """
    X0 = X0.normalized()
    n, m, nx = model.n, model.m, X0.n_rows
    rows, rhs = [], []
    for th in model.Theta0.vertices:
        A, B = eval_matrices(model, th)
        HB, HA = X0.H @ B, X0.H @ A
        for v in X0.vertices:
            # K v = kron(I_m, v') vec_row(K)
            rows.append(np.hstack([HB @ np.kron(np.eye(m), v[None, :]), -np.ones((nx, 1))]))
            rhs.append(-HA @ v)
    c = np.zeros(m * n + 1)
    c[-1] = 1.0
    res = lp(c, A_ub=np.vstack(rows), b_ub=np.concatenate(rhs))
    if res.status != OPTIMAL:
        raise RedesignNeeded(f"gain LP failed: {res.status}", np.nan)
    return res.x[:-1].reshape(m, n), float(res.x[-1])


def position_velocity_box(tau, beta, n_pairs):
    """Box in coordinates (p_i + tau v_i, v_i / beta) for states ordered (p_1, v_1, p_2, v_2, ...)."""
    n = 2 * n_pairs
    Tm = np.zeros((n, n))
    for i in range(n_pairs):
        Tm[2 * i, 2 * i] = 1.0
        Tm[2 * i, 2 * i + 1] = tau
        Tm[2 * i + 1, 2 * i + 1] = 1.0 / beta
    verts = np.array([np.linalg.solve(Tm, s) for s in itertools.product([-1.0, 1.0], repeat=n)])
    return Polytope(np.vstack([Tm, -Tm]), np.ones(2 * n), vertices=verts, check=False)


def offline_design(
    model: UncertainModel, lambda_c=0.96, lqr_weights=None, K=None, X0=None, seed_scale=1.0, max_iter=200, gain="lqr"
) -> TubeDesign:
    """Gain, contractive tube shape and constants; raises RedesignNeeded if the lambda bound fails.

    ``gain`` is "lqr" (nominal LQR at theta_bar0) or "vertex-lp" (requires X0).
    """
    if K is None and gain == "vertex-lp":
        if X0 is None:
            raise ValueError("vertex-lp gain needs an explicit X0")
        K, _ = vertex_lp_gain(model, X0)
    elif K is None:
        Qx, Ru = (np.eye(model.n), np.eye(model.m)) if lqr_weights is None else lqr_weights
        A, B = eval_matrices(model, model.theta_bar0)
        K = lqr_gain(A, B, np.atleast_2d(Qx), np.atleast_2d(Ru))
    K = np.array(K, dtype=float, ndmin=2)
    if K.shape != (model.m, model.n):
        raise DimensionMismatch(f"K must be {model.m}x{model.n}")
    Acl = closed_loop_vertices(model, K)
    if X0 is None:
        X0 = compute_contractive_set(Acl, lambda_c, seed_box(model, seed_scale), max_iter=max_iter)
    else:
        X0 = X0.normalized()
    slack = contractivity_slack(Acl, X0, lambda_c)
    if slack < -1e-8:
        raise RedesignNeeded(f"X0 is not {lambda_c}-contractive (slack {slack:.3e})", slack)
    f_bar, w_bar, ff = compute_support_constants(model, K, X0)
    margin = 1.0 - ff * float(np.max(w_bar)) - lambda_c
    if margin < -1e-12:
        raise RedesignNeeded(f"lambda_c bound violated by {-margin:.3e}", margin)
    K.setflags(write=False)
    return TubeDesign(K, X0, float(lambda_c), f_bar, w_bar, ff, origin_weights(X0))


def beta(lambda_c, steps):
    """Geometric cost-to-go factor sum_{i<steps} lambda_c**i."""
    steps = max(int(steps), 0)
    if lambda_c == 1.0:
        return float(steps)
    return (1.0 - lambda_c**steps) / (1.0 - lambda_c)


# ---------------------------------------------------------------- builtin models


def piecewise_reference(T, levels):
    """Equal-length holds of the given levels over t = 0..T."""
    levels = np.atleast_2d(np.asarray(levels, dtype=float))
    idx = np.minimum((np.arange(T + 1) * len(levels)) // (T + 1), len(levels) - 1)
    return levels[idx]


TWO_STATE_LEVELS = [[0.0, 0.0], [-1.0, 1.0], [1.0, -1.0], [1.5, 1.0], [-1.5, -1.0]]
MASS_SPRING_LEVELS = [[0.0, 0.0, 0.0], [1.0, 1.5, 2.0], [-1.0, 0.0, 1.0]]


def build_two_state_model(T=100, N=8, N_theta=8, refs=None) -> UncertainModel:
    A0 = [[0.85, 0.5], [0.2, 0.7]]
    A1 = [[0.1, 0.0], [0.0, 0.2]]
    A2 = np.zeros((2, 2))
    B0 = [[1.0, 0.4], [0.2, 0.6]]
    B1 = np.zeros((2, 2))
    B2 = [[0.0, 0.2], [0.0, 0.35]]
    F = np.vstack([np.eye(2) / 3, -np.eye(2) / 3, np.zeros((4, 2))])
    G = np.vstack([np.zeros((4, 2)), np.eye(2) / 2, -np.eye(2) / 2])
    if refs is None:
        refs = piecewise_reference(T, TWO_STATE_LEVELS)
    return UncertainModel(
        A_list=(A0, A1, A2),
        B_list=(B0, B1, B2),
        C=np.eye(2),
        Theta0=Polytope.inf_ball(1.0, 2),
        W=Polytope.inf_ball(0.1, 2),
        F=F,
        G=G,
        Q=2 * np.eye(2),
        R=np.eye(2),
        T=T,
        N=N,
        N_theta=N_theta,
        refs=refs,
        theta_bar0=np.array([0.1, 0.1]),
        name="two-state",
    )


def _mass_spring_ct(k12, k23, c12, c23):
    return np.array(
        [
            [0, 1, 0, 0, 0, 0],
            [-k12, -c12, k12, c12, 0, 0],
            [0, 0, 0, 1, 0, 0],
            [k12, c12, -k12 - k23, -c12 - c23, 0, 0],
            [0, 0, 0, 0, 0, 1],
            [0, 0, k23, c23, -k23, -c23],
        ],
        dtype=float,
    )


def _mass_spring_input(Fg):
    B = np.zeros((6, 3))
    B[1, 0] = B[3, 1] = B[5, 2] = Fg
    return B


MASS_SPRING_LAMBDA = 0.92


def mass_spring_design(model=None, lambda_c=MASS_SPRING_LAMBDA, tau=0.1, beta=2.0) -> TubeDesign:
    """Builtin six-state design: position/velocity box shape with the vertex-LP gain."""
    model = build_mass_spring_model() if model is None else model
    return offline_design(model, lambda_c, X0=position_velocity_box(tau, beta, 3), gain="vertex-lp")


def build_mass_spring_model(T=75, N=6, N_theta=4, refs=None, dt=0.1) -> UncertainModel:
    """Three masses on a line, Euler-discretized; 5 normalized parameters in [-1, 1]."""
    k12, k23, c12, c23, Fg = 3.2, 5.8, 2.3, 4.5, 6.4
    zero = _mass_spring_ct(0, 0, 0, 0)
    A0 = np.eye(6) + dt * _mass_spring_ct(k12, k23, c12, c23)
    dA = [
        _mass_spring_ct(0.10 * k12, 0, 0, 0) - zero,
        _mass_spring_ct(0, 0.10 * k23, 0, 0) - zero,
        _mass_spring_ct(0, 0, 0.05 * c12, 0) - zero,
        _mass_spring_ct(0, 0, 0, 0.05 * c23) - zero,
        np.zeros((6, 6)),
    ]
    A_list = [A0] + [dt * a for a in dA]
    B_list = [dt * _mass_spring_input(Fg)] + [np.zeros((6, 3))] * 4 + [dt * _mass_spring_input(0.07 * Fg)]
    C = np.zeros((3, 6))
    C[0, 0] = C[1, 2] = C[2, 4] = 1.0
    F = np.vstack([np.eye(6) / 5, -np.eye(6) / 5, np.zeros((6, 6))])
    G = np.vstack([np.zeros((12, 3)), np.eye(3) / 5, -np.eye(3) / 5])
    if refs is None:
        refs = piecewise_reference(T, MASS_SPRING_LEVELS)
    return UncertainModel(
        A_list=tuple(A_list),
        B_list=tuple(B_list),
        C=C,
        Theta0=Polytope.inf_ball(1.0, 5),
        W=Polytope.inf_ball(0.05, 6),
        F=F,
        G=G,
        Q=2 * np.eye(3),
        R=np.eye(3),
        T=T,
        N=N,
        N_theta=N_theta,
        refs=refs,
        theta_bar0=np.zeros(5),
        name="mass-spring",
    )
