import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dampc.model import eval_matrices
from dampc.tube_builder import fallback_terminal_point, offline_terminal_design, solve_setpoints, terminal_rows_slack

from oracles import sample_polytope


def _sub_box(seed, p=2):
    """A random nonempty sub-box of [-1, 1]^p as (H, h)."""
    rng = np.random.default_rng(seed)
    lo = rng.uniform(-1, 0.9, p)
    hi = np.minimum(lo + rng.uniform(0.01, 1.5, p), 1.0)
    return np.vstack([np.eye(p), -np.eye(p)]), np.concatenate([hi, -lo])


def test_constructive_terminal_point_two_state(two_state):
    model, design = two_state
    xt, ut, at = fallback_terminal_point(model, design)
    assert at == pytest.approx(1.0 / design.ff_bar)
    assert terminal_rows_slack(model, design, model.Theta0.H, model.Theta0.h, xt, ut, at) >= -1e-9


def test_constructive_terminal_point_mass_spring(mass_spring):
    model, design = mass_spring
    xt, ut, at = fallback_terminal_point(model, design)
    assert terminal_rows_slack(model, design, model.Theta0.H, model.Theta0.h, xt, ut, at) >= -1e-9


@given(st.integers(0, 10_000))
def test_constructive_terminal_point_any_parameter_subset(two_state, seed):
    model, design = two_state
    H, h = _sub_box(seed)
    xt, ut, at = fallback_terminal_point(model, design)
    assert terminal_rows_slack(model, design, H, h, xt, ut, at) >= -1e-9


def test_enlarged_terminal_scale_is_infeasible(two_state):
    model, design = two_state
    xt, ut, at = fallback_terminal_point(model, design)
    assert terminal_rows_slack(model, design, model.Theta0.H, model.Theta0.h, xt, ut, 1.5 * at) < 0


def test_offline_terminal_sets_are_robustly_invariant(two_state, rng):
    model, design = two_state
    tuples = offline_terminal_design(model, design)
    assert len(tuples) == model.T - model.N + 1
    W = model.W
    for xt, ut, at in {id(t): t for t in tuples if t is not None}.values():
        X = xt + at * design.verts
        U = (X - xt) @ design.K.T + ut
        assert np.max(X @ model.F.T + U @ model.G.T) <= 1 + 1e-7
        for _ in range(300):
            theta = sample_polytope(model.Theta0, rng, 1)[0]
            x = sample_polytope(design.X0, rng, 1)[0] * at + xt
            w = sample_polytope(W, rng, 1)[0]
            A, B = eval_matrices(model, theta)
            xn = A @ x + B @ (design.K @ (x - xt) + ut) + w
            assert np.max(design.Hx @ (xn - xt)) <= at + 1e-7


def test_setpoints_track_reference(two_state):
    model, _ = two_state
    theta = np.array([0.3, -0.2])
    refs = model.refs[10:19]
    xs, us, resid = solve_setpoints(model, theta, refs)
    A, B = eval_matrices(model, theta)
    assert resid < 1e-9
    assert np.allclose(xs @ model.C.T, refs, atol=1e-9)
    assert np.allclose(xs[:-1] @ A.T + us[:-1] @ B.T, xs[1:], atol=1e-9)
    assert np.allclose(A @ xs[-1] + B @ us[-1], xs[-1], atol=1e-9)
