"""Decision-vector bookkeeping, affine vector expressions and row batches.

Rows are collected as affine expressions ``expr <= 0`` or ``expr == 0`` and
flattened to sparse triplets once. Bilinear rows carry extra terms
``lam[c] * g(x)`` where ``g`` is a row of a registered affine expression.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp


class Layout:
    """Named, disjoint index blocks covering the decision vector."""

    def __init__(self):
        self.n = 0
        self.blocks = {}
        self._lb = []
        self._ub = []

    def add(self, name, shape, lb=-np.inf, ub=np.inf):
        if name in self.blocks:
            raise KeyError(f"block {name!r} already allocated")
        shape = tuple(np.atleast_1d(shape).astype(int)) if not isinstance(shape, tuple) else shape
        size = int(np.prod(shape)) if shape else 1
        idx = np.arange(self.n, self.n + size).reshape(shape)
        self.blocks[name] = idx
        self._lb.append(np.full(size, lb, dtype=float))
        self._ub.append(np.full(size, ub, dtype=float))
        self.n += size
        return idx

    def __getitem__(self, name):
        return self.blocks[name]

    def __contains__(self, name):
        return name in self.blocks

    @property
    def lb(self):
        return np.concatenate(self._lb) if self._lb else np.zeros(0)

    @property
    def ub(self):
        return np.concatenate(self._ub) if self._ub else np.zeros(0)

    def value(self, x, name):
        return np.asarray(x)[self.blocks[name]]

    def check(self):
        """Blocks are disjoint and cover 0..n-1 exactly."""
        allidx = np.concatenate([b.ravel() for b in self.blocks.values()]) if self.blocks else np.zeros(0, int)
        return bool(np.array_equal(np.sort(allidx), np.arange(self.n)))


class Aff:
    """Vector-valued affine expression  const + sum_k M_k @ x[cols_k]."""

    __slots__ = ("const", "terms")
    __array_ufunc__ = None  # make ndarray (+-) Aff defer to Aff

    def __init__(self, const, terms=()):
        self.const = np.asarray(const, dtype=float).ravel()
        self.terms = list(terms)

    @property
    def size(self):
        return self.const.size

    @classmethod
    def var(cls, cols, coef=None):
        """x[cols] (optionally left-multiplied by ``coef``)."""
        cols = np.asarray(cols).ravel()
        M = np.eye(cols.size) if coef is None else np.asarray(coef, dtype=float).reshape(-1, cols.size)
        return cls(np.zeros(M.shape[0]), [(cols, M)])

    @classmethod
    def scalar_times(cls, col, vec):
        """vec * x[col] for a single scalar variable."""
        vec = np.asarray(vec, dtype=float).ravel()
        return cls(np.zeros(vec.size), [(np.array([int(col)]), vec[:, None])])

    @classmethod
    def const_(cls, c):
        return cls(np.asarray(c, dtype=float).ravel())

    @classmethod
    def matvar(cls, L, R, order="C"):
        """Flattened L @ R for an index matrix L (a x b) and dense R (b x c).

        order "C" lists entries (row, col) row-major, "F" column-major.
        """
        L = np.asarray(L)
        R = np.asarray(R, dtype=float)
        a, b = L.shape
        if order == "C":
            return cls(np.zeros(a * R.shape[1]), [(L.ravel(), np.kron(np.eye(a), R.T))])
        return cls(np.zeros(a * R.shape[1]), [(L.ravel(order="F"), np.kron(R.T, np.eye(a)))])

    def __add__(self, other):
        if isinstance(other, Aff):
            if other.size != self.size:
                raise ValueError(f"size mismatch {self.size} vs {other.size}")
            return Aff(self.const + other.const, self.terms + other.terms)
        return Aff(self.const + np.asarray(other, dtype=float), self.terms)

    __radd__ = __add__

    def __neg__(self):
        return Aff(-self.const, [(c, -M) for c, M in self.terms])

    def __sub__(self, other):
        return self + (-other if isinstance(other, Aff) else -np.asarray(other, dtype=float))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, s):
        s = float(s)
        return Aff(s * self.const, [(c, s * M) for c, M in self.terms])

    __rmul__ = __mul__

    def lmul(self, L):
        """L @ self."""
        L = np.atleast_2d(np.asarray(L, dtype=float))
        return Aff(L @ self.const, [(c, L @ M) for c, M in self.terms])

    def rows(self, idx):
        idx = np.atleast_1d(idx)
        return Aff(self.const[idx], [(c, M[idx]) for c, M in self.terms])

    def eval(self, x):
        x = np.asarray(x, dtype=float)
        out = self.const.copy()
        for c, M in self.terms:
            out += M @ x[c]
        return out

    def coo(self):
        """(row, col, val) triplets of the linear part (duplicates allowed)."""
        rs, cs, vs = [], [], []
        for c, M in self.terms:
            r, k = np.nonzero(M)
            rs.append(r)
            cs.append(c[k])
            vs.append(M[r, k])
        if not rs:
            return np.zeros(0, int), np.zeros(0, int), np.zeros(0)
        return np.concatenate(rs), np.concatenate(cs), np.concatenate(vs)

    def matrix(self, n):
        r, c, v = self.coo()
        return sp.csr_matrix((v, (r, c)), shape=(self.size, n))

    @staticmethod
    def stack(items):
        items = [a for a in items if a.size]
        if not items:
            return Aff(np.zeros(0))
        const = np.concatenate([a.const for a in items])
        terms = []
        off = 0
        total = const.size
        for a in items:
            for c, M in a.terms:
                big = np.zeros((total, M.shape[1]))
                big[off : off + a.size] = M
                terms.append((c, big))
            off += a.size
        return Aff(const, terms)


class ConstraintBatch:
    """Rows ``expr <= 0`` and ``expr == 0`` with a tag per row, plus bilinear terms.

    A bilinear term (row, lam, g) adds ``x[lam] * G_g(x)`` to the left side of
    ``row``, where G_g is row ``g`` of the batch's registered affine expressions.
    """

    def __init__(self):
        self.parts = {"ub": [], "eq": []}
        self.tags = {"ub": [], "eq": []}
        self.count = {"ub": 0, "eq": 0}
        self.g_parts = []
        self.n_g = 0
        self.bil = {"ub": [], "eq": []}

    def _add(self, sense, expr: Aff, tag):
        start = self.count[sense]
        self.parts[sense].append(expr)
        self.tags[sense].extend([tag] * expr.size)
        self.count[sense] += expr.size
        return np.arange(start, start + expr.size)

    def leq(self, expr: Aff, tag):
        return self._add("ub", expr, tag)

    def eq(self, expr: Aff, tag):
        return self._add("eq", expr, tag)

    def register_g(self, expr: Aff):
        start = self.n_g
        self.g_parts.append(expr)
        self.n_g += expr.size
        return np.arange(start, start + expr.size)

    def bilinear(self, sense, rows, lams, gs):
        rows, lams, gs = (np.asarray(a, dtype=int).ravel() for a in (rows, lams, gs))
        if not (rows.size == lams.size == gs.size):
            raise ValueError("bilinear term arrays must have equal length")
        self.bil[sense].append((rows, lams, gs))

    def extend(self, other: "ConstraintBatch"):
        goff = self.n_g
        for expr in other.g_parts:
            self.register_g(expr)
        for sense in ("ub", "eq"):
            roff = self.count[sense]
            for expr, tag in _iter_parts(other, sense):
                self._add(sense, expr, tag)
            for rows, lams, gs in other.bil[sense]:
                self.bil[sense].append((rows + roff, lams, gs + goff))
        return self

    def tag_counts(self, sense):
        return Counter(self.tags[sense])

    def n_bilinear(self):
        return sum(len(r) for s in ("ub", "eq") for r, _, _ in self.bil[s])


def _iter_parts(batch, sense):
    pos = 0
    for expr in batch.parts[sense]:
        yield expr, batch.tags[sense][pos]
        pos += expr.size


@dataclass
class BilinearTerms:
    rows: np.ndarray
    lams: np.ndarray
    gs: np.ndarray


@dataclass
class Skeleton:
    """Flattened program: linear rows, bilinear terms over G(x) = Gm x + g0, objective, bounds."""

    n: int
    c: np.ndarray
    A_ub: sp.csr_matrix
    b_ub: np.ndarray
    A_eq: sp.csr_matrix
    b_eq: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    Gm: sp.csr_matrix
    g0: np.ndarray
    bil_ub: BilinearTerms
    bil_eq: BilinearTerms
    tags_ub: list
    tags_eq: list

    @property
    def n_bilinear(self):
        return self.bil_ub.rows.size + self.bil_eq.rows.size

    def bilinear_values(self, x, sense):
        """Contribution of the bilinear terms to each row's left side."""
        b = self.bil_ub if sense == "ub" else self.bil_eq
        nrows = self.A_ub.shape[0] if sense == "ub" else self.A_eq.shape[0]
        if b.rows.size == 0:
            return np.zeros(nrows)
        g = self.Gm @ x + self.g0
        return np.bincount(b.rows, weights=x[b.lams] * g[b.gs], minlength=nrows)

    def residuals(self, x):
        """(ub violations, |eq residuals|) of the exact bilinear program at x."""
        ub = self.A_ub @ x + self.bilinear_values(x, "ub") - self.b_ub
        eq = self.A_eq @ x + self.bilinear_values(x, "eq") - self.b_eq
        return ub, eq

    def max_violation(self, x):
        ub, eq = self.residuals(x)
        v = max(float(np.max(ub, initial=0.0)), float(np.max(np.abs(eq), initial=0.0)))
        v = max(v, float(np.max(self.lb - x, initial=0.0)), float(np.max(x - self.ub, initial=0.0)))
        return v

    def violation_by_tag(self, x):
        ub, eq = self.residuals(x)
        out = {}
        for vals, tags in ((np.maximum(ub, 0.0), self.tags_ub), (np.abs(eq), self.tags_eq)):
            for v, t in zip(vals, tags):
                if v > out.get(t, 0.0):
                    out[t] = float(v)
        return out


def flatten(batch: ConstraintBatch, layout: Layout, c) -> Skeleton:
    n = layout.n
    mats, rhs = {}, {}
    for sense in ("ub", "eq"):
        rs, cs, vs, consts = [], [], [], []
        off = 0
        for expr in batch.parts[sense]:
            r, cc, v = expr.coo()
            rs.append(r + off)
            cs.append(cc)
            vs.append(v)
            consts.append(expr.const)
            off += expr.size
        if rs:
            A = sp.csr_matrix((np.concatenate(vs), (np.concatenate(rs), np.concatenate(cs))), shape=(off, n))
            b = -np.concatenate(consts)
        else:
            A, b = sp.csr_matrix((0, n)), np.zeros(0)
        mats[sense], rhs[sense] = A, b
    if batch.g_parts:
        G = Aff.stack(batch.g_parts)
        Gm, g0 = G.matrix(n), G.const
    else:
        Gm, g0 = sp.csr_matrix((0, n)), np.zeros(0)

    def terms(sense):
        parts = batch.bil[sense]
        if not parts:
            z = np.zeros(0, int)
            return BilinearTerms(z, z, z)
        return BilinearTerms(*(np.concatenate([p[i] for p in parts]) for i in range(3)))

    return Skeleton(
        n=n,
        c=np.asarray(c, dtype=float),
        A_ub=mats["ub"],
        b_ub=rhs["ub"],
        A_eq=mats["eq"],
        b_eq=rhs["eq"],
        lb=layout.lb,
        ub=layout.ub,
        Gm=Gm.tocsr(),
        g0=g0,
        bil_ub=terms("ub"),
        bil_eq=terms("eq"),
        tags_ub=list(batch.tags["ub"]),
        tags_eq=list(batch.tags["eq"]),
    )
