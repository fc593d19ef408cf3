"""Bounded polyhedra in H-representation with a lazily filled vertex cache."""

from __future__ import annotations

import itertools
import warnings
from functools import cached_property

import numpy as np
from scipy.spatial import HalfspaceIntersection, QhullError

from dampc.backend import OPTIMAL, UNBOUNDED, lp
from dampc.errors import DegenerateFace, DimensionMismatch, DimensionTooLarge, InfeasibleSet, Unbounded

MAX_VERTEX_DIM = 8
DEDUP_TOL = 1e-7


class Polytope:
    """The set {x | H x <= h}.

    Arrays are stored read-only; the vertex list is computed on first access
    (or taken from ``vertices``) and never changes afterwards.
    """

    def __init__(self, H, h, vertices=None, check=True):
        H = np.array(H, dtype=float, ndmin=2)
        h = np.array(h, dtype=float).ravel()
        if H.shape[0] != h.size:
            raise DimensionMismatch(f"H has {H.shape[0]} rows but h has {h.size} entries")
        if not (np.all(np.isfinite(H)) and np.all(np.isfinite(h))):
            raise ValueError("polytope data must be finite")
        H.setflags(write=False)
        h.setflags(write=False)
        self.H = H
        self.h = h
        if vertices is not None:
            v = np.array(vertices, dtype=float, ndmin=2)
            v.setflags(write=False)
            self.__dict__["vertices"] = v
        if check:
            self._check()

    @property
    def dim(self):
        return self.H.shape[1]

    @property
    def n_rows(self):
        return self.H.shape[0]

    def _check(self):
        if self.dim == 0:
            raise DimensionMismatch("zero-dimensional polytope")
        chebyshev_ball(self)
        eye = np.eye(self.dim)
        for d in np.vstack([eye, -eye]):
            support(self, d)

    @cached_property
    def vertices(self):
        v = enumerate_vertices(self)
        v.setflags(write=False)
        return v

    @classmethod
    def box(cls, lower, upper):
        lower = np.atleast_1d(np.asarray(lower, dtype=float))
        upper = np.atleast_1d(np.asarray(upper, dtype=float))
        n = lower.size
        H = np.vstack([np.eye(n), -np.eye(n)])
        h = np.concatenate([upper, -lower])
        verts = np.array(list(itertools.product(*zip(lower, upper))), dtype=float)
        return cls(H, h, vertices=verts, check=False)

    @classmethod
    def inf_ball(cls, radius, dim):
        r = np.full(dim, float(radius))
        return cls.box(-r, r)

    @classmethod
    def from_vertices(cls, points):
        """H-representation of the convex hull of ``points`` (full-dimensional, dim >= 2)."""
        from scipy.spatial import ConvexHull

        pts = np.asarray(points, dtype=float)
        hull = ConvexHull(pts)
        eq = hull.equations
        H, h = eq[:, :-1], -eq[:, -1]
        H, h = _unique_rows(H, h)
        return cls(H, h, vertices=pts[hull.vertices], check=False)

    def normalized(self):
        """Same set with every row scaled so the right-hand side is exactly 1."""
        if np.any(self.h <= 0):
            raise ValueError("normalized form needs the origin in the interior (all h > 0)")
        H = self.H / self.h[:, None]
        P = Polytope(H, np.ones(self.n_rows), check=False)
        if "vertices" in self.__dict__:
            P.__dict__["vertices"] = self.vertices
        return P

    def scaled(self, alpha):
        """Homothet alpha*P (alpha >= 0)."""
        if alpha < 0:
            raise ValueError("scaling factor must be nonnegative")
        P = Polytope(self.H, alpha * self.h, check=False)
        if "vertices" in self.__dict__:
            v = alpha * self.vertices
            v.setflags(write=False)
            P.__dict__["vertices"] = v
        return P

    def translated(self, center):
        c = np.asarray(center, dtype=float)
        P = Polytope(self.H, self.h + self.H @ c, check=False)
        if "vertices" in self.__dict__:
            v = self.vertices + c
            v.setflags(write=False)
            P.__dict__["vertices"] = v
        return P

    def intersect(self, other, check=True):
        return Polytope(np.vstack([self.H, other.H]), np.concatenate([self.h, other.h]), check=check)

    def __repr__(self):
        return f"Polytope(dim={self.dim}, rows={self.n_rows})"


def _unique_rows(H, h, tol=1e-9):
    scale = np.linalg.norm(H, axis=1)
    scale[scale == 0] = 1.0
    Hn, hn = H / scale[:, None], h / scale
    keep = []
    for i in range(len(hn)):
        if not any(np.max(np.abs(Hn[i] - Hn[j])) < tol and abs(hn[i] - hn[j]) < tol for j in keep):
            keep.append(i)
    return H[keep], h[keep]


def support(P: Polytope, d) -> float:
    """max_{x in P} d'x."""
    d = np.asarray(d, dtype=float).ravel()
    if d.size != P.dim:
        raise DimensionMismatch(f"direction has length {d.size}, polytope dimension is {P.dim}")
    res = lp(-d, A_ub=P.H, b_ub=P.h)
    if res.status == UNBOUNDED:
        raise Unbounded(f"polytope unbounded in direction {d}")
    if res.status != OPTIMAL:
        if res.status == "Infeasible":
            raise InfeasibleSet("empty polytope")
        raise InfeasibleSet(f"support LP failed: {res.status} {res.message}")
    return -res.objective


def contains(P: Polytope, x, tol=1e-9) -> bool:
    x = np.asarray(x, dtype=float).ravel()
    if x.size != P.dim:
        raise DimensionMismatch(f"point has length {x.size}, polytope dimension is {P.dim}")
    return bool(np.all(P.H @ x <= P.h + tol))


def chebyshev_ball(P: Polytope):
    """Center and radius of the largest Euclidean ball inside P."""
    norms = np.linalg.norm(P.H, axis=1)
    n = P.dim
    c = np.zeros(n + 1)
    c[-1] = -1.0
    lb = np.full(n + 1, -np.inf)
    lb[-1] = 0.0
    res = lp(c, A_ub=np.column_stack([P.H, norms]), b_ub=P.h, lb=lb)
    if res.status == UNBOUNDED:
        raise Unbounded("polytope contains arbitrarily large balls")
    if res.status != OPTIMAL:
        raise InfeasibleSet(f"empty polytope ({res.status})")
    return res.x[:n], max(res.x[-1], 0.0)


def remove_redundant(P: Polytope, tol=1e-9) -> Polytope:
    """Drop rows whose maximum over the remaining rows does not exceed their bound."""
    keep = list(range(P.n_rows))
    for i in range(P.n_rows):
        others = [j for j in keep if j != i]
        if not others:
            continue
        res = lp(-P.H[i], A_ub=P.H[others], b_ub=P.h[others])
        if res.status == OPTIMAL and -res.objective <= P.h[i] + tol:
            keep.remove(i)
    return Polytope(P.H[keep], P.h[keep], check=False)


def dedupe_points(points, tol=DEDUP_TOL):
    pts = np.asarray(points, dtype=float)
    if len(pts) == 0:
        return pts.reshape(0, pts.shape[-1] if pts.ndim == 2 else 0)
    out = []
    for p in pts:
        if not any(np.max(np.abs(p - q)) <= tol for q in out):
            out.append(p)
    return np.array(out)


def enumerate_vertices(P: Polytope, tol=DEDUP_TOL) -> np.ndarray:
    """All extreme points of P, one per row, deduplicated in the inf-norm at ``tol``."""
    n = P.dim
    if n > MAX_VERTEX_DIM:
        raise DimensionTooLarge(f"vertex enumeration supports dim <= {MAX_VERTEX_DIM}, got {n}")
    if n == 1:
        lo = -support(P, [-1.0])
        hi = support(P, [1.0])
        return dedupe_points(np.array([[lo], [hi]]), tol)
    center, radius = chebyshev_ball(P)
    scale = max(1.0, float(np.max(np.abs(P.h))))
    verts = None
    if radius > 1e-9 * scale:
        try:
            hs = HalfspaceIntersection(np.column_stack([P.H, -P.h]), center)
            verts = hs.intersections
        except QhullError:
            verts = None
    if verts is None:
        verts = _vertices_brute_force(P, tol)
    verts = dedupe_points(verts, tol)
    verts = _extreme_only(P, verts, tol)
    _report_degeneracy(P, verts)
    return verts


def _vertices_brute_force(P, tol):
    n = P.dim
    pts = []
    for rows in itertools.combinations(range(P.n_rows), n):
        A = P.H[list(rows)]
        if abs(np.linalg.det(A)) < 1e-12:
            continue
        x = np.linalg.solve(A, P.h[list(rows)])
        if np.all(P.H @ x <= P.h + tol):
            pts.append(x)
    if not pts:
        raise InfeasibleSet("no vertices found")
    return np.array(pts)


def _extreme_only(P, verts, tol):
    """Keep points at which the active rows span the full space."""
    n = P.dim
    keep = []
    for v in verts:
        active = np.abs(P.H @ v - P.h) <= max(tol, 1e-7) * max(1.0, np.max(np.abs(P.h)))
        if active.sum() >= n and np.linalg.matrix_rank(P.H[active], tol=1e-9) == n:
            keep.append(v)
    if not keep:
        return verts
    return np.array(keep)


def _report_degeneracy(P, verts):
    n = P.dim
    act = np.abs(verts @ P.H.T - P.h) <= 1e-7 * max(1.0, np.max(np.abs(P.h)))
    n_deg = int(np.sum(act.sum(axis=1) > n))
    if n_deg:
        warnings.warn(f"{n_deg} degenerate vertices (more than {n} active hyperplanes)", DegenerateFace, stacklevel=3)


def vertex_active_sets(P: Polytope, tol=1e-7):
    """Boolean matrix (vertices x rows) of hyperplanes active at each vertex."""
    return np.abs(P.vertices @ P.H.T - P.h) <= tol * max(1.0, np.max(np.abs(P.h)))


def facet_rows(P: Polytope, tol=1e-7):
    """Indices of rows that define facets (active on an (n-1)-dimensional face)."""
    act = vertex_active_sets(P, tol)
    n = P.dim
    keep = []
    for i in range(P.n_rows):
        V = P.vertices[act[:, i]]
        if len(V) < n:
            continue
        if n == 1 or np.linalg.matrix_rank(V[1:] - V[0], tol=1e-9) >= n - 1:
            keep.append(i)
    return np.array(keep, dtype=int)
