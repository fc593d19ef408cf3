import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dampc.errors import DimensionMismatch, DimensionTooLarge, InfeasibleSet, Unbounded
from dampc.polytope import (
    Polytope,
    chebyshev_ball,
    contains,
    dedupe_points,
    enumerate_vertices,
    facet_rows,
    remove_redundant,
    support,
    vertex_active_sets,
)

points_2d = arrays(np.float64, (8, 2), elements=st.floats(-5, 5, allow_nan=False, width=32))


def _random_hull(seed, dim=2, n=10):
    pts = np.random.default_rng(seed).normal(size=(n, dim))
    return Polytope.from_vertices(pts), pts


def test_box_support_and_vertices():
    P = Polytope.box([-1, -2], [3, 1])
    assert support(P, [1, 0]) == pytest.approx(3.0)
    assert support(P, [0, -1]) == pytest.approx(2.0)
    assert support(P, [1, 1]) == pytest.approx(4.0)
    V = enumerate_vertices(Polytope(P.H, P.h, check=False))
    assert len(V) == 4
    assert {tuple(v) for v in np.round(V, 9)} == set(itertools.product((-1.0, 3.0), (-2.0, 1.0)))


def test_contains_tolerance():
    P = Polytope.inf_ball(1.0, 3)
    assert contains(P, [1.0, -1.0, 0.5])
    assert contains(P, [1.0 + 1e-10, 0, 0])
    assert not contains(P, [1.0 + 1e-6, 0, 0])


def test_chebyshev_ball_of_box():
    c, r = chebyshev_ball(Polytope.box([0, 0], [4, 2]))
    assert r == pytest.approx(1.0)
    assert c[1] == pytest.approx(1.0)
    assert 1.0 - 1e-9 <= c[0] <= 3.0 + 1e-9


def test_empty_set_raises():
    with pytest.raises(InfeasibleSet):
        Polytope([[1.0], [-1.0]], [-1.0, -1.0])


def test_unbounded_raises():
    with pytest.raises(Unbounded):
        Polytope([[1.0, 0.0]], [1.0])


def test_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        Polytope(np.eye(2), [1.0, 1.0, 1.0])


def test_vertex_dimension_cap():
    P = Polytope.inf_ball(1.0, 9)
    with pytest.raises(DimensionTooLarge):
        enumerate_vertices(Polytope(P.H, P.h, check=False))


def test_remove_redundant_drops_implied_rows():
    H = np.vstack([np.eye(2), -np.eye(2), [[1.0, 1.0]], [[1.0, 0.0]]])
    h = np.array([1, 1, 1, 1, 5.0, 2.0])
    P = remove_redundant(Polytope(H, h))
    assert P.n_rows == 4
    for d in np.random.default_rng(0).normal(size=(20, 2)):
        assert support(P, d) == pytest.approx(np.abs(d).sum())


def test_dedupe_points():
    pts = np.array([[0, 0], [1e-9, 0], [1, 1], [1, 1 + 1e-8]])
    assert len(dedupe_points(pts)) == 2


def test_facet_rows_and_active_sets_square():
    P = Polytope(*[np.vstack([np.eye(2), -np.eye(2)]), np.ones(4)], check=False)
    rows = facet_rows(P)
    assert len(rows) == 4
    active = vertex_active_sets(P)
    assert active.shape == (4, 4)
    assert np.all(active.sum(axis=1) == 2)


@given(st.integers(0, 10_000))
def test_support_matches_vertex_maximum(seed):
    P, pts = _random_hull(seed)
    d = np.random.default_rng(seed + 1).normal(size=2)
    assert support(P, d) == pytest.approx(np.max(pts @ d), abs=1e-7)


@given(st.integers(0, 10_000))
def test_hull_contains_its_generators(seed):
    P, pts = _random_hull(seed, dim=3, n=12)
    assert all(contains(P, x, tol=1e-7) for x in pts)


@given(st.integers(0, 10_000))
def test_enumerated_vertices_are_hull_vertices(seed):
    P, _ = _random_hull(seed, dim=2, n=9)
    V = enumerate_vertices(Polytope(P.H, P.h, check=False))
    ref = np.asarray(P.vertices)
    assert len(V) == len(ref)
    for v in V:
        assert np.min(np.abs(ref - v).max(axis=1)) < 1e-6


@given(st.integers(0, 10_000), st.floats(0.1, 3.0), arrays(np.float64, 2, elements=st.floats(-2, 2)))
def test_scaling_and_translation_commute_with_support(seed, alpha, c):
    P, _ = _random_hull(seed)
    d = np.random.default_rng(seed + 7).normal(size=2)
    Q = P.scaled(alpha).translated(c)
    assert support(Q, d) == pytest.approx(alpha * support(P, d) + d @ c, abs=1e-7)


@given(st.integers(0, 10_000))
def test_normalized_preserves_set(seed):
    P, _ = _random_hull(seed)
    c, _ = chebyshev_ball(P)
    Pc = P.translated(-c).normalized()
    assert np.allclose(Pc.h, 1.0)
    for d in np.eye(2):
        assert support(Pc, d) == pytest.approx(support(P, d) - d @ c, abs=1e-7)
